"""FROC curves and the CPM score for candidate classification."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

FPS_POINTS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class ScoredCandidate:
    scan_id: str
    score: float
    label: int

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class FrocCurve:
    fps: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    n_scans: int

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fps.tolist(), self.tpr.tolist()))


@dataclass(frozen=True)
class CpmReport:
    fps_points: tuple[float, ...]
    sensitivities: tuple[float, ...]
    cpm: float


def confusion_at_threshold(candidates: Sequence[ScoredCandidate], t: float) -> tuple[int, int, int, int]:
    """``(TP, FN, TN, FP)`` with a positive prediction iff ``score >= t``."""
    tp = fn = tn = fp = 0
    for c in candidates:
        pred = c.score >= t
        if c.label == 1:
            tp += pred
            fn += not pred
        else:
            fp += pred
            tn += not pred
    return tp, fn, tn, fp


def _arrays(candidates: Sequence[ScoredCandidate]):
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    labels = np.array([c.label for c in candidates], dtype=np.int64)
    n_scans = len({c.scan_id for c in candidates})
    return scores, labels, n_scans


def _fps(fp, tn, n_scans, literal: bool):
    fp = np.asarray(fp, dtype=np.float64)
    if not literal:
        return fp / n_scans
    tn = np.asarray(tn, dtype=np.float64)
    fpr = np.divide(fp, tn + fp, out=np.zeros_like(fp), where=(tn + fp) > 0)
    return fpr * tn / n_scans


def froc_curve(candidates: Sequence[ScoredCandidate], literal_fps: bool = False) -> FrocCurve:
    """One operating point per distinct score, thresholds in descending order.

    FPS is ``FP / n_scans``. ``literal_fps`` instead evaluates
    ``FPR * TN / n_scans``, which is not monotone in the threshold.
    """
    scores, labels, n_scans = _arrays(candidates)
    if n_scans == 0:
        raise ValueError("no candidates")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("TPR is undefined without positive candidates")
    n_neg = labels.size - n_pos
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp, fp = tp[last], fp[last]
    tn = n_neg - fp
    tpr = tp / n_pos
    return FrocCurve(_fps(fp, tn, n_scans, literal_fps), tpr, s[last], n_scans)


def froc_curve_bruteforce(candidates: Sequence[ScoredCandidate], literal_fps: bool = False) -> FrocCurve:
    """Reference sweep calling :func:`confusion_at_threshold` per distinct score."""
    scores, _, n_scans = _arrays(candidates)
    thresholds = np.unique(scores)[::-1]
    fps, tpr = [], []
    for t in thresholds:
        tp, fn, tn, fp = confusion_at_threshold(candidates, t)
        if tp + fn == 0:
            raise ValueError("TPR is undefined without positive candidates")
        tpr.append(tp / (tp + fn))
        fps.append(_fps([fp], [tn], n_scans, literal_fps)[0])
    return FrocCurve(np.array(fps), np.array(tpr), thresholds, n_scans)


def sensitivity_at_fps(curve: FrocCurve, fps: float) -> float:
    """Best TPR among operating points with FPS not above ``fps`` (0 if none)."""
    if fps <= 0:
        raise ValueError("fps query must be positive")
    ok = curve.fps <= fps
    return float(curve.tpr[ok].max()) if ok.any() else 0.0


def cpm_from_sensitivities(sensitivities: Iterable[float], fps_points=FPS_POINTS) -> CpmReport:
    sens = tuple(float(s) for s in sensitivities)
    if len(sens) != len(fps_points):
        raise ValueError(f"expected {len(fps_points)} sensitivities, got {len(sens)}")
    return CpmReport(tuple(fps_points), sens, sum(sens) / len(sens))


def cpm_score(curve: FrocCurve, fps_points=FPS_POINTS) -> CpmReport:
    return cpm_from_sensitivities((sensitivity_at_fps(curve, f) for f in fps_points), fps_points)


# ---------------------------------------------------------------------------
# CSV I/O


def export_csv(curve: FrocCurve, report: CpmReport, curve_path, report_path) -> None:
    with open(curve_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fps", "tpr"])
        for f, t in curve.points:
            w.writerow([f"{f:.6f}", f"{t:.6f}"])
    write_report_csv(report, report_path)


def write_report_csv(report: CpmReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fps_point", "sensitivity"])
        for f, s in zip(report.fps_points, report.sensitivities):
            w.writerow([f"{f:.6f}", f"{s:.6f}"])
        w.writerow(["cpm", f"{report.cpm:.6f}"])


def read_curve_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["fps", "tpr"]:
        raise ValueError(f"unexpected header {rows[0]}")
    return [(float(a), float(b)) for a, b in rows[1:]]


def read_report_csv(path) -> CpmReport:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["fps_point", "sensitivity"] or rows[-1][0] != "cpm":
        raise ValueError("malformed CPM report")
    pts = tuple(float(r[0]) for r in rows[1:-1])
    sens = tuple(float(r[1]) for r in rows[1:-1])
    return CpmReport(pts, sens, float(rows[-1][1]))


def write_scores_csv(path, candidates: Sequence[ScoredCandidate]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scan_id", "score", "label"])
        for c in candidates:
            w.writerow([c.scan_id, f"{c.score:.9f}", c.label])


def read_scores_csv(path: str | os.PathLike) -> list[ScoredCandidate]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["scan_id", "score", "label"]:
            raise ValueError(f"expected header scan_id,score,label, got {reader.fieldnames}")
        return [ScoredCandidate(r["scan_id"], float(r["score"]), int(r["label"])) for r in reader]
