import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urctrans.evaluation import (
    FPS_POINTS,
    FrocCurve,
    ScoredCandidate,
    confusion_at_threshold,
    cpm_from_sensitivities,
    cpm_score,
    export_csv,
    froc_curve,
    froc_curve_bruteforce,
    read_curve_csv,
    read_report_csv,
    read_scores_csv,
    sensitivity_at_fps,
    write_scores_csv,
)

# per-FPS sensitivities and reported CPM, LUNA16 comparison
TABLE_1 = {
    "ResNet3D": ((0.773, 0.879, 0.924, 0.947, 0.955, 0.977, 0.985), 0.920),
    "ScratchTrans": ((0.561, 0.659, 0.712, 0.765, 0.788, 0.841, 0.909), 0.748),
    "DeiTTrans": ((0.803, 0.879, 0.902, 0.932, 0.962, 0.977, 0.985), 0.920),
    "URCTrans": ((0.902, 0.917, 0.955, 0.962, 0.962, 0.977, 0.977), 0.950),
}
# LUNGx generalization
TABLE_2 = {
    "ResNet3D": ((0.712, 0.767, 0.808, 0.890, 0.918, 0.959, 0.973), 0.861),
    "ScratchTrans": ((0.630, 0.685, 0.740, 0.863, 0.863, 0.904, 0.932), 0.802),
    "DeiTTrans": ((0.781, 0.822, 0.877, 0.890, 0.904, 0.904, 0.904), 0.869),
    "URCTrans": ((0.822, 0.849, 0.918, 0.945, 0.959, 0.959, 0.959), 0.916),
}


def sc(items, scan="s0"):
    return [ScoredCandidate(scan, s, y) for s, y in items]


def curve_from_steps(steps):
    """Curve whose FROC step function hits ``sens`` exactly at each FPS point."""
    fps = np.array([0.0, *FPS_POINTS])
    tpr = np.array([0.0, *steps])
    return FrocCurve(fps, tpr, np.linspace(1, 0, len(fps)), 1)


@st.composite
def instances(draw):
    n_scans = draw(st.integers(1, 10))
    n = draw(st.integers(1, 200))
    seed = draw(st.integers(0, 2**31 - 1))
    r = np.random.default_rng(seed)
    # coarse scores force ties
    scores = r.integers(0, draw(st.integers(1, 50)) + 1, n) / 50
    labels = r.integers(0, 2, n)
    labels[r.integers(n)] = 1
    scans = r.integers(0, n_scans, n)
    return [ScoredCandidate(f"scan{k}", float(s), int(y)) for s, y, k in zip(scores, labels, scans)]


class TestConfusion:
    CANDS = sc([(0.9, 1), (0.7, 0), (0.5, 1), (0.5, 0), (0.3, 1), (0.1, 0)])

    def test_zero_threshold(self):
        tp, fn, tn, fp = confusion_at_threshold(self.CANDS, 0.0)
        assert (tp, tn) == (3, 0)

    def test_above_max(self):
        tp, fn, tn, fp = confusion_at_threshold(self.CANDS, 0.9 + 1e-9)
        assert (tp, fp) == (0, 0)

    def test_enumeration(self):
        counts = {"TP": 0, "FN": 0, "TN": 0, "FP": 0}
        for c in self.CANDS:
            key = ("T" if (c.score >= 0.5) == bool(c.label) else "F") + ("P" if c.score >= 0.5 else "N")
            counts[key] += 1
        assert confusion_at_threshold(self.CANDS, 0.5) == (counts["TP"], counts["FN"], counts["TN"], counts["FP"])
        assert confusion_at_threshold(self.CANDS, 0.5) == (2, 1, 1, 2)

    @settings(max_examples=40, deadline=None)
    @given(instances(), st.floats(0, 1))
    def test_partition_law(self, cands, t):
        tp, fn, tn, fp = confusion_at_threshold(cands, t)
        assert tp + fn == sum(c.label for c in cands)
        assert tn + fp == sum(1 - c.label for c in cands)


class TestFroc:
    def test_perfect_scorer(self):
        curve = froc_curve(sc([(1.0, 1), (1.0, 1), (0.0, 0), (0.0, 0)]))
        assert curve.points[0] == (0.0, 1.0)

    def test_hand_enumerated(self):
        curve = froc_curve(sc([(0.9, 1), (0.8, 0), (0.1, 0)]))
        assert curve.points == [(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]
        assert list(curve.thresholds) == [0.9, 0.8, 0.1]

    def test_two_identical_scans(self):
        base = [(0.9, 1), (0.6, 0), (0.4, 1), (0.2, 0), (0.2, 0)]
        one = froc_curve(sc(base))
        two = froc_curve(sc(base, "a") + sc(base, "b"))
        assert one.points == two.points

    def test_zero_positives(self):
        with pytest.raises(ValueError):
            froc_curve(sc([(0.3, 0), (0.2, 0)]))

    @settings(max_examples=100, deadline=None)
    @given(instances())
    def test_equals_bruteforce(self, cands):
        a, b = froc_curve(cands), froc_curve_bruteforce(cands)
        assert np.array_equal(a.fps, b.fps) and np.array_equal(a.tpr, b.tpr)
        assert np.array_equal(a.thresholds, b.thresholds)

    @settings(max_examples=30, deadline=None)
    @given(instances())
    def test_literal_equals_bruteforce(self, cands):
        a, b = froc_curve(cands, literal_fps=True), froc_curve_bruteforce(cands, literal_fps=True)
        assert np.array_equal(a.fps, b.fps) and np.array_equal(a.tpr, b.tpr)

    @settings(max_examples=50, deadline=None)
    @given(instances())
    def test_monotone_and_bounded(self, cands):
        curve = froc_curve(cands)
        assert (np.diff(curve.fps) >= 0).all() and (np.diff(curve.tpr) >= 0).all()
        assert cpm_score(curve).cpm <= curve.tpr.max()

    def test_literal_fps_formula(self):
        # one scan, threshold 0.1: FP=2, TN=0 -> literal 0; threshold 0.5: FP=1, TN=1 -> 0.5
        curve = froc_curve(sc([(0.9, 1), (0.5, 0), (0.1, 0)]), literal_fps=True)
        assert curve.fps.tolist() == [0.0, 0.5, 0.0]


class TestSensitivity:
    CURVE = froc_curve(sc([(0.9, 1), (0.8, 0), (0.7, 1), (0.6, 0), (0.5, 0), (0.4, 1)], "a") + sc([(0.3, 1)], "b"))

    def test_hand_reading(self):
        # operating points: (0,.25) (.5,.25) (.5,.5) (1,.5) (1.5,.5) (1.5,.75) (1.5,1)
        assert self.CURVE.points == [(0.0, 0.25), (0.5, 0.25), (0.5, 0.5), (1.0, 0.5), (1.5, 0.5), (1.5, 0.75), (1.5, 1.0)]
        assert sensitivity_at_fps(self.CURVE, 0.25) == 0.25
        assert sensitivity_at_fps(self.CURVE, 0.5) == 0.5
        assert sensitivity_at_fps(self.CURVE, 1.25) == 0.5
        assert sensitivity_at_fps(self.CURVE, 1.5) == 1.0

    def test_beyond_curve(self):
        assert sensitivity_at_fps(self.CURVE, 100.0) == 1.0

    def test_below_smallest_fps(self):
        curve = froc_curve(sc([(0.9, 0), (0.8, 1)]))
        assert sensitivity_at_fps(curve, 0.5) == 0.0

    def test_query_must_be_positive(self):
        with pytest.raises(ValueError):
            sensitivity_at_fps(self.CURVE, 0.0)


class TestCpm:
    @pytest.mark.parametrize("table", [TABLE_1, TABLE_2], ids=["luna16", "lungx"])
    def test_reported_values(self, table):
        for name, (sens, reported) in table.items():
            assert round(cpm_score(curve_from_steps(sens)).cpm, 3) == reported, name
            assert round(cpm_from_sensitivities(sens).cpm, 3) == reported, name

    def test_all_ones(self):
        assert cpm_from_sensitivities([1.0] * 7).cpm == 1.0

    def test_mean_is_exact(self):
        sens = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
        assert cpm_from_sensitivities(sens).cpm == sum(sens) / 7

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            cpm_from_sensitivities([1.0] * 6)


class TestCsv:
    def test_export_round_trip(self, tmp_path):
        curve = curve_from_steps(TABLE_1["URCTrans"][0])
        report = cpm_score(curve)
        export_csv(curve, report, tmp_path / "c.csv", tmp_path / "r.csv")
        text = (tmp_path / "c.csv").read_text(encoding="utf-8").splitlines()
        assert text[0] == "fps,tpr"
        assert text[1] == "0.000000,0.000000"
        assert read_curve_csv(tmp_path / "c.csv") == [(round(f, 6), round(t, 6)) for f, t in curve.points]
        rows = (tmp_path / "r.csv").read_text(encoding="utf-8").splitlines()
        assert rows[0] == "fps_point,sensitivity"
        assert rows[-1].startswith("cpm,0.950") and len(rows[-1].split(",")[1]) == 8
        back = read_report_csv(tmp_path / "r.csv")
        assert back.sensitivities == TABLE_1["URCTrans"][0]
        assert round(back.cpm, 3) == 0.950

    def test_scores_round_trip(self, tmp_path):
        cands = sc([(0.123456789, 1), (0.5, 0)], "x")
        write_scores_csv(tmp_path / "s.csv", cands)
        assert read_scores_csv(tmp_path / "s.csv") == cands

    def test_scores_header_checked(self, tmp_path):
        (tmp_path / "s.csv").write_text("id,score,label\nx,0.5,1\n")
        with pytest.raises(ValueError):
            read_scores_csv(tmp_path / "s.csv")

    def test_invalid_candidates(self):
        with pytest.raises(ValueError):
            ScoredCandidate("a", 1.5, 1)
        with pytest.raises(ValueError):
            ScoredCandidate("a", 0.5, 2)


def test_every_threshold_subset_matches_sorting():
    """Small exhaustive check over all label patterns of four candidates."""
    scores = [0.8, 0.6, 0.6, 0.2]
    for labels in itertools.product((0, 1), repeat=4):
        if not any(labels):
            continue
        cands = [ScoredCandidate(f"s{i % 2}", s, y) for i, (s, y) in enumerate(zip(scores, labels))]
        a, b = froc_curve(cands), froc_curve_bruteforce(cands)
        assert a.points == b.points
