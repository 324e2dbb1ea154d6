"""Region-based contrastive pretraining with a momentum encoder."""
from __future__ import annotations

import itertools
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import Volume, read_volume, window_hu, write_volume
from .tensorcore import tensor as T
from .tensorcore.checkpoint import save_checkpoint
from .tensorcore.optim import OptimState, adamw_step, cosine_lr
from .tensorcore.tensor import Tape, Tensor, as_tensor
from .vit3d import ViTConfig, encoder_subset, forward_features, init_vit_params, trunc_normal


@dataclass(frozen=True)
class AugmentConfig:
    S1: int = 96
    S2: int = 72
    low_range: tuple[float, float] = (-1200.0, -1000.0)
    high_range: tuple[float, float] = (600.0, 800.0)

    def __post_init__(self):
        object.__setattr__(self, "low_range", tuple(float(v) for v in self.low_range))
        object.__setattr__(self, "high_range", tuple(float(v) for v in self.high_range))
        if not 0 < self.S2 < self.S1:
            raise ValueError(f"view size S2={self.S2} must be smaller than source size S1={self.S1}")
        if self.low_range[0] > self.low_range[1] or self.high_range[0] > self.high_range[1]:
            raise ValueError("HU intervals must be ordered")
        if self.low_range[1] >= self.high_range[0]:
            raise ValueError("low HU interval must lie entirely below the high interval")

    @classmethod
    def from_dict(cls, d: Mapping) -> AugmentConfig:
        _reject_unknown(cls, d)
        return cls(**d)


@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 64
    steps: int = 200
    lr: float = 1e-4
    weight_decay: float = 0.05
    tau: float = 0.2
    momentum: float = 0.99
    proj_hidden: int = 256
    proj_out: int = 64
    exclude_positive: bool = False
    checkpoint_every: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> PretrainConfig:
        _reject_unknown(cls, d)
        return cls(**d)


def _reject_unknown(cls, d: Mapping) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# augmentation


def _rotation_group() -> list[tuple[tuple[int, int, int], tuple[bool, bool, bool]]]:
    """The 24 proper rotations of a cube as (axis permutation, axis flips)."""
    out = []
    for perm in itertools.permutations(range(3)):
        parity = np.linalg.det(np.eye(3)[list(perm)])
        for flips in itertools.product((False, True), repeat=3):
            if parity * (-1) ** sum(flips) > 0:
                out.append((perm, flips))
    return out


ROTATIONS = _rotation_group()


def rotate_cube(x: np.ndarray, index: int) -> np.ndarray:
    perm, flips = ROTATIONS[index]
    y = np.transpose(x, perm)
    axes = tuple(i for i, f in enumerate(flips) if f)
    return np.flip(y, axes) if axes else y


def random_view(cube: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Crop, rotate, then window one ``S2**3`` view of an ``S1**3`` HU cube."""
    cube = np.asarray(cube)
    if cube.shape != (cfg.S1,) * 3:
        raise ValueError(f"expected a {cfg.S1}^3 cube, got {cube.shape}")
    off = rng.integers(0, cfg.S1 - cfg.S2 + 1, size=3)
    sub = cube[off[0] : off[0] + cfg.S2, off[1] : off[1] + cfg.S2, off[2] : off[2] + cfg.S2]
    sub = rotate_cube(sub, int(rng.integers(len(ROTATIONS))))
    low = rng.uniform(*cfg.low_range)
    high = rng.uniform(*cfg.high_range)
    return np.ascontiguousarray(window_hu(sub, low, high), dtype=np.float32)


@dataclass
class ContrastiveBatch:
    views_a: np.ndarray  # [B, S2, S2, S2]
    views_b: np.ndarray
    source_ids: np.ndarray


def _view_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, index]))


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("URCTRANS_THREADS", "1")))
    except ValueError:
        return 1


def make_batch(
    corpus: Sequence[np.ndarray], ids: Sequence[int], cfg: AugmentConfig, seed: int, step: int
) -> ContrastiveBatch:
    """Two views per selected source cube; each sample owns its rng stream."""

    def pair(i):
        rng = _view_rng(seed, step, int(i))
        return random_view(corpus[i], rng, cfg), random_view(corpus[i], rng, cfg)

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            pairs = list(ex.map(pair, ids))
    else:
        pairs = [pair(i) for i in ids]
    return ContrastiveBatch(
        np.stack([a for a, _ in pairs]), np.stack([b for _, b in pairs]), np.asarray(ids, dtype=np.int64)
    )


def build_pretrain_corpus(volumes: Iterable[Volume | np.ndarray], S1: int) -> tuple[list[np.ndarray], list[int]]:
    """Non-overlapping ``S1**3`` tiles of each volume; partial border tiles are dropped.

    Returns the cubes and, per cube, the index of its source volume.
    """
    cubes, sources = [], []
    for vi, vol in enumerate(volumes):
        vox = vol.voxels if isinstance(vol, Volume) else np.asarray(vol)
        counts = [n // S1 for n in vox.shape]
        if min(counts) == 0:
            warnings.warn(f"volume {vi} with shape {vox.shape} is smaller than {S1}^3; no cubes taken")
            continue
        for i, j, k in itertools.product(*(range(c) for c in counts)):
            cubes.append(np.array(vox[i * S1 : (i + 1) * S1, j * S1 : (j + 1) * S1, k * S1 : (k + 1) * S1]))
            sources.append(vi)
    return cubes, sources


def save_corpus(out_dir, cubes: Sequence[np.ndarray], sources: Sequence, spacing=(1.0, 1.0, 1.0)) -> None:
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (cube, src) in enumerate(zip(cubes, sources)):
        name = f"cube_{i:05d}.vol"
        write_volume(os.path.join(out_dir, name), Volume(cube, spacing))
        entries.append({"file": name, "source": src})
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"cubes": entries}, fh, indent=1)


def load_corpus(out_dir) -> tuple[list[np.ndarray], list]:
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        entries = json.load(fh)["cubes"]
    cubes = [read_volume(os.path.join(out_dir, e["file"])).voxels for e in entries]
    return cubes, [e["source"] for e in entries]


# ---------------------------------------------------------------------------
# heads and loss


def init_heads(d: int, hidden: int, out: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Projection head d->hidden->hidden->out and prediction head out->hidden->out."""
    p = {}

    def linear(name, n_in, n_out):
        p[name + ".weight"] = trunc_normal(rng, (n_in, n_out), dtype=dtype)
        p[name + ".bias"] = np.zeros(n_out, dtype)

    def bn(name, n):
        p[name + ".gamma"] = np.ones(n, dtype)
        p[name + ".beta"] = np.zeros(n, dtype)

    linear("proj.fc1", d, hidden)
    bn("proj.bn1", hidden)
    linear("proj.fc2", hidden, hidden)
    bn("proj.bn2", hidden)
    linear("proj.fc3", hidden, out)
    linear("pred.fc1", out, hidden)
    bn("pred.bn1", hidden)
    linear("pred.fc2", hidden, out)
    return p


def _lin(x, params, name):
    return T.add(T.matmul(x, as_tensor(params[name + ".weight"])), as_tensor(params[name + ".bias"]))


def _bn(x, params, name):
    return T.batch_norm(x, as_tensor(params[name + ".gamma"]), as_tensor(params[name + ".beta"]))


def project(feat, params: Mapping) -> Tensor:
    h = T.gelu(_bn(_lin(feat, params, "proj.fc1"), params, "proj.bn1"))
    h = T.gelu(_bn(_lin(h, params, "proj.fc2"), params, "proj.bn2"))
    return T.batch_norm(_lin(h, params, "proj.fc3"))


def predict(z, params: Mapping) -> Tensor:
    h = T.gelu(_bn(_lin(z, params, "pred.fc1"), params, "pred.bn1"))
    return _lin(h, params, "pred.fc2")


def info_nce(q, k, tau: float, exclude_positive: bool = False) -> Tensor:
    """Mean over rows of ``-log softmax(q k^T / tau)[i, i]``.

    ``k`` is treated as a constant. With ``exclude_positive`` the positive
    term is dropped from the denominator.
    """
    q = as_tensor(q)
    k_arr = k.data if isinstance(k, Tensor) else np.asarray(k)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if q.ndim != 2 or q.shape != k_arr.shape:
        raise ValueError(f"q and k must be matching [B, p] arrays, got {q.shape} and {k_arr.shape}")
    B = q.shape[0]
    if B < 2:
        raise ValueError("InfoNCE needs at least two samples")
    for name, arr in (("q", q.data), ("k", k_arr)):
        dev = np.abs(np.linalg.norm(arr, axis=1) - 1.0).max()
        if dev > 1e-6:
            raise ValueError(f"{name} rows are not L2-normalized (max deviation {dev:.2e})")
    logits = T.scale(T.matmul(q, Tensor(np.ascontiguousarray(k_arr.T))), 1.0 / tau)
    return T.cross_entropy(logits, np.arange(B), exclude_target=exclude_positive)


def symmetric_info_nce(q_a, k_b, q_b, k_a, tau: float, exclude_positive: bool = False) -> Tensor:
    """Average of both view orderings, i.e. ``1/(2B) * sum_i [L(a_i, b_i) + L(b_i, a_i)]``."""
    la = info_nce(q_a, k_b, tau, exclude_positive)
    lb = info_nce(q_b, k_a, tau, exclude_positive)
    return T.scale(T.add(la, lb), 0.5)


def ema_update(online: Mapping[str, np.ndarray], target: Mapping[str, np.ndarray], m: float) -> dict[str, np.ndarray]:
    """``target <- m * target + (1 - m) * online`` for each entry of ``target``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    out = {}
    for name, t in target.items():
        if name not in online:
            raise ValueError(f"online parameters missing {name}")
        o = online[name]
        if o.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {o.shape} vs {t.shape}")
        if m == 1.0:
            out[name] = t.copy()
        elif m == 0.0:
            out[name] = o.copy()
        else:
            out[name] = (m * t + (1.0 - m) * o).astype(t.dtype, copy=False)
    if len(out) != len(target):
        raise ValueError("structure mismatch")
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class PretrainState:
    vit: ViTConfig
    cfg: PretrainConfig
    online: dict[str, np.ndarray]  # encoder + proj + pred
    target: dict[str, np.ndarray]  # encoder + proj
    optim: OptimState
    total_steps: int
    step: int = 0
    losses: list[float] = field(default_factory=list)


def init_pretrain_state(vit: ViTConfig, cfg: PretrainConfig, seed: int = 0, dtype=np.float32, total_steps=None) -> PretrainState:
    rng = np.random.default_rng(seed)
    online = encoder_subset(init_vit_params(vit, rng, dtype))
    online.update(init_heads(vit.d, cfg.proj_hidden, cfg.proj_out, rng, dtype))
    target = {k: v.copy() for k, v in online.items() if not k.startswith("pred.")}
    optim = OptimState.for_params(online, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return PretrainState(vit, cfg, online, target, optim, total_steps or cfg.steps)


def _encode(views, params, vit: ViTConfig) -> Tensor:
    return project(forward_features(views, params, vit), params)


def pretrain_step(batch: ContrastiveBatch, state: PretrainState) -> float:
    """Symmetric InfoNCE step: backward through the online branch, AdamW, then EMA."""
    vit, cfg = state.vit, state.cfg
    dtype = next(iter(state.online.values())).dtype
    xa = batch.views_a.astype(dtype, copy=False)
    xb = batch.views_b.astype(dtype, copy=False)

    target = {k: Tensor(v) for k, v in state.target.items()}
    k_a = T.l2_normalize(_encode(xa, target, vit)).data
    k_b = T.l2_normalize(_encode(xb, target, vit)).data

    with Tape() as tape:
        params = {k: tape.watch(v) for k, v in state.online.items()}
        q_a = T.l2_normalize(predict(_encode(xa, params, vit), params))
        q_b = T.l2_normalize(predict(_encode(xb, params, vit), params))
        loss = symmetric_info_nce(q_a, k_b, q_b, k_a, cfg.tau, cfg.exclude_positive)
    grads = tape.gradients(loss, params)

    lr = cosine_lr(min(state.step, state.total_steps), state.total_steps, cfg.lr)
    state.online = adamw_step(state.online, grads, state.optim, lr=lr)
    state.target = ema_update(state.online, state.target, cfg.momentum)
    state.step += 1
    value = loss.item()
    state.losses.append(value)
    return value


def pretrain_run(
    corpus: Sequence[np.ndarray],
    vit: ViTConfig,
    aug: AugmentConfig,
    cfg: PretrainConfig,
    seed: int = 0,
    state: PretrainState | None = None,
    log=None,
    checkpoint_dir=None,
) -> PretrainState:
    """Run ``cfg.steps`` steps sampling ``batch_size`` distinct source cubes each step.

    With ``checkpoint_dir`` and ``cfg.checkpoint_every > 0`` the online
    parameters are saved every that many steps.
    """
    if vit.input_shape != (aug.S2,) * 3:
        raise ValueError(f"view size {aug.S2} does not match model input {vit.input_shape}")
    if len(corpus) < 2:
        raise ValueError("pretraining corpus needs at least two cubes")
    state = state or init_pretrain_state(vit, cfg, seed)
    batch_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    B = min(cfg.batch_size, len(corpus))
    for _ in range(cfg.steps):
        ids = batch_rng.choice(len(corpus), size=B, replace=False)
        batch = make_batch(corpus, ids, aug, seed, state.step)
        loss = pretrain_step(batch, state)
        if log is not None:
            log(state.step, cosine_lr(state.step - 1, state.total_steps, cfg.lr), loss)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, f"pretrain_step_{state.step:06d}.uctk"), state.online)
    return state


def pair_similarity(
    encoder: Mapping[str, np.ndarray], cubes: Sequence[np.ndarray], vit: ViTConfig, aug: AugmentConfig, seed: int = 0
) -> tuple[float, float]:
    """Mean cosine similarity of encoder features for positive and negative view pairs."""
    batch = make_batch(cubes, np.arange(len(cubes)), aug, seed, step=10**6)
    params = {k: Tensor(v) for k, v in encoder.items()}
    dtype = next(iter(encoder.values())).dtype
    fa = T.l2_normalize(forward_features(batch.views_a.astype(dtype), params, vit)).data
    fb = T.l2_normalize(forward_features(batch.views_b.astype(dtype), params, vit)).data
    sim = fa.astype(np.float64) @ fb.astype(np.float64).T
    n = sim.shape[0]
    pos = float(np.trace(sim) / n)
    neg = float((sim.sum() - np.trace(sim)) / (n * (n - 1)))
    return pos, neg


def pretrain_checkpoint(state: PretrainState) -> dict[str, np.ndarray]:
    """Online encoder and heads as stored on disk."""
    return dict(state.online)


def config_dict(obj) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(obj).items()}
