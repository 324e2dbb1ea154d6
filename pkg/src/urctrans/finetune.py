"""Supervised candidate classification on top of a (pre)trained encoder."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, fields
from typing import Iterator, Mapping, Sequence

import numpy as np

from .data import DEFAULT_WINDOW, CandidateRegion, Volume, extract_candidate, window_hu
from .tensorcore import tensor as T
from .tensorcore.checkpoint import load_checkpoint, save_checkpoint
from .tensorcore.optim import OptimState, adamw_step, cosine_lr
from .tensorcore.tensor import Tape
from .vit3d import ViTConfig, forward_classify, init_head, init_vit_params, predict_proba

__all__ = [
    "CandidateRegion",
    "FinetuneConfig",
    "SamplerConfig",
    "balanced_batches",
    "candidate_inputs",
    "finetune_run",
    "positive_count",
    "surgery_load",
]


@dataclass(frozen=True)
class SamplerConfig:
    positive_ratio: float = 0.2
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.positive_ratio < 1.0:
            raise ValueError("positive_ratio must lie in (0, 1)")
        if positive_count(self) < 1:
            raise ValueError(f"batch {self.batch_size} at ratio {self.positive_ratio} holds no positive")
        if positive_count(self) >= self.batch_size:
            raise ValueError(f"batch {self.batch_size} at ratio {self.positive_ratio} holds no negative")


def positive_count(cfg: SamplerConfig) -> int:
    # round half up, independent of Python's banker's rounding
    return int(math.floor(cfg.batch_size * cfg.positive_ratio + 0.5))


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    lr: float = 1e-4
    weight_decay: float = 0.05
    steps_per_epoch: int = 0  # 0: ceil(n_train / batch_size)

    @classmethod
    def from_dict(cls, d: Mapping) -> FinetuneConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown FinetuneConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# checkpoint surgery


def surgery_load(checkpoint: str | os.PathLike | Mapping[str, np.ndarray], cfg: ViTConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Keep embedding + encoder tensors, drop pretraining heads, add a fresh classifier."""
    src = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    template = init_vit_params(cfg, 0, dtype)
    params = {}
    for name, ref in template.items():
        if name.startswith("head."):
            continue
        if name not in src:
            raise ValueError(f"checkpoint is missing encoder tensor {name}")
        arr = np.asarray(src[name])
        if arr.shape != ref.shape:
            raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {ref.shape}")
        params[name] = arr.astype(dtype, copy=True)
    params.update(init_head(cfg, np.random.default_rng(seed), dtype))
    return params


# ---------------------------------------------------------------------------
# sampling


def balanced_batches(labels: Sequence[int], cfg: SamplerConfig) -> Iterator[np.ndarray]:
    """Endless stream of index batches with a fixed positive count.

    Positives and negatives are each drawn uniformly with replacement.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError(f"need both classes, got {pos.size} positives and {neg.size} negatives")
    n_pos = positive_count(cfg)
    n_neg = cfg.batch_size - n_pos
    rng = np.random.default_rng(cfg.seed)
    while True:
        idx = np.concatenate([rng.choice(pos, n_pos), rng.choice(neg, n_neg)])
        yield idx[rng.permutation(idx.size)]


# ---------------------------------------------------------------------------
# training


def candidate_inputs(
    volumes: Mapping[str, Volume], candidates: Sequence[CandidateRegion], window=DEFAULT_WINDOW
) -> tuple[np.ndarray, np.ndarray]:
    """Windowed candidate cubes ``[n, e, e, e]`` and their labels."""
    xs = [window_hu(extract_candidate(volumes[c.scan_id], c.center, c.extent), *window) for c in candidates]
    ys = [c.label for c in candidates]
    return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64)


def accuracy(params: Mapping, inputs: np.ndarray, labels: np.ndarray, cfg: ViTConfig) -> float:
    prob = predict_proba(inputs, params, cfg)
    return float(np.mean(prob.argmax(axis=1) == labels))


def finetune_run(
    inputs: np.ndarray,
    labels: np.ndarray,
    params: dict,
    vit: ViTConfig,
    cfg: FinetuneConfig,
    sampler: SamplerConfig,
    out_dir: str | os.PathLike | None = None,
    max_steps: int | None = None,
) -> tuple[dict, list[tuple[int, float, float]]]:
    """Cross-entropy training with AdamW and a cosine schedule.

    Returns the trained parameters and a ``(step, lr, loss)`` log. With
    ``out_dir`` a checkpoint is written after every epoch plus ``final.uctk``
    and the log goes to ``train_log.csv``.
    """
    spe = cfg.steps_per_epoch or math.ceil(len(inputs) / sampler.batch_size)
    total = cfg.epochs * spe
    if max_steps is not None:
        total = min(total, max_steps)
    state = OptimState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    dtype = next(iter(params.values())).dtype
    stream = balanced_batches(labels, sampler)
    log: list[tuple[int, float, float]] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for step in range(total):
        idx = next(stream)
        x = inputs[idx].astype(dtype, copy=False)
        with Tape() as tape:
            watched = {k: tape.watch(v) for k, v in params.items()}
            loss = T.cross_entropy(forward_classify(x, watched, vit), labels[idx])
        grads = tape.gradients(loss, watched)
        lr = cosine_lr(step, total, cfg.lr)
        params = adamw_step(params, grads, state, lr=lr)
        log.append((step, lr, loss.item()))
        if out_dir is not None and ((step + 1) % spe == 0 or step + 1 == total):
            save_checkpoint(os.path.join(out_dir, f"epoch_{(step + 1 + spe - 1) // spe:03d}.uctk"), params)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.uctk"), params)
        write_train_log(os.path.join(out_dir, "train_log.csv"), log)
    return params, log


def write_train_log(path, log: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in log:
            w.writerow([step, f"{lr:.9g}", f"{loss:.9g}"])
