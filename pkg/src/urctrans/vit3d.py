"""3D Vision Transformer over non-overlapping cubes.

Parameters are a flat ``dict[str, np.ndarray]``; forward functions accept the
same mapping with values that may be tape-attached :class:`Tensor` objects.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from .tensorcore import tensor as T
from .tensorcore.tensor import Tensor, as_tensor

ViTParams = dict  # name -> np.ndarray

ENCODER_PREFIXES = ("embed.", "cls_token", "blocks.", "norm.")


@dataclass(frozen=True)
class ViTConfig:
    H: int = 72
    W: int = 72
    D: int = 72
    S: int = 8
    d: int = 384
    L: int = 11
    M: int = 12
    C: int = 2
    mlp_ratio: int = 4
    scaled_attention: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for ext in (self.H, self.W, self.D):
            if ext <= 0 or ext % self.S:
                raise ValueError(f"cube size {self.S} must divide input extents {(self.H, self.W, self.D)}")
        if self.d % self.M:
            raise ValueError(f"embedding dim {self.d} not divisible by heads {self.M}")
        if self.d % 6:
            raise ValueError(f"embedding dim {self.d} not divisible by 6")
        if min(self.L, self.M, self.C, self.mlp_ratio) < 1:
            raise ValueError("L, M, C and mlp_ratio must be positive")

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.H // self.S, self.W // self.S, self.D // self.S

    @property
    def n_cubes(self) -> int:
        nx, ny, nz = self.grid
        return nx * ny * nz

    @property
    def n_tokens(self) -> int:
        return self.n_cubes + 1

    @property
    def head_dim(self) -> int:
        return self.d // self.M

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.H, self.W, self.D

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> ViTConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ViTConfig keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> ViTConfig:
        return cls.from_dict(json.loads(text))


FULL_CONFIG = ViTConfig()
TINY_CONFIG = ViTConfig(H=12, W=12, D=12, S=4, d=12, L=2, M=2, C=2)


# ---------------------------------------------------------------------------
# parameters


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal samples redrawn until they fall inside two standard deviations."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    # sigma=0.02 leaves cube content far below the unit-scale positional code
    fan_in, fan_out = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape).astype(dtype)


def init_head(cfg: ViTConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    return {"head.weight": trunc_normal(rng, (cfg.d, cfg.C), dtype=dtype)}


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator | int = 0, dtype=np.float32) -> ViTParams:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    d, h = cfg.d, cfg.mlp_ratio * cfg.d
    p: ViTParams = {
        "embed.weight": xavier_uniform(rng, (cfg.S**3, d), dtype=dtype),
        "embed.bias": np.zeros(d, dtype),
        "cls_token": trunc_normal(rng, (d,), dtype=dtype),
    }
    for i in range(cfg.L):
        b = f"blocks.{i}."
        p[b + "ln1.gamma"] = np.ones(d, dtype)
        p[b + "ln1.beta"] = np.zeros(d, dtype)
        p[b + "attn.qkv.weight"] = trunc_normal(rng, (d, 3 * d), dtype=dtype)
        p[b + "attn.qkv.bias"] = np.zeros(3 * d, dtype)
        p[b + "attn.proj.weight"] = trunc_normal(rng, (d, d), dtype=dtype)
        p[b + "attn.proj.bias"] = np.zeros(d, dtype)
        p[b + "ln2.gamma"] = np.ones(d, dtype)
        p[b + "ln2.beta"] = np.zeros(d, dtype)
        p[b + "mlp.fc1.weight"] = trunc_normal(rng, (d, h), dtype=dtype)
        p[b + "mlp.fc1.bias"] = np.zeros(h, dtype)
        p[b + "mlp.fc2.weight"] = trunc_normal(rng, (h, d), dtype=dtype)
        p[b + "mlp.fc2.bias"] = np.zeros(d, dtype)
    p["norm.gamma"] = np.ones(d, dtype)
    p["norm.beta"] = np.zeros(d, dtype)
    p.update(init_head(cfg, rng, dtype))
    return p


def param_count(cfg: ViTConfig) -> int:
    d, h, s3 = cfg.d, cfg.mlp_ratio * cfg.d, cfg.S**3
    per_block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)
    return s3 * d + d + d + cfg.L * per_block + 2 * d + d * cfg.C


def encoder_subset(params: Mapping) -> dict:
    """Embedding, class token, blocks and final norm (everything but the head)."""
    return {k: v for k, v in params.items() if k.startswith(ENCODER_PREFIXES)}


# ---------------------------------------------------------------------------
# tokenization


def tile_to_cubes(volume, S: int) -> Tensor:
    """``[..., H, W, D]`` -> ``[..., n_cubes, S**3]``.

    Cubes are ordered by grid index x-major, then y, then z; each row is the
    cube flattened in row-major voxel order.
    """
    v = as_tensor(volume)
    *lead, H, W, D = v.shape
    if H % S or W % S or D % S:
        raise ValueError(f"cube size {S} does not divide volume extents {(H, W, D)}")
    nx, ny, nz = H // S, W // S, D // S
    k = len(lead)
    x = T.reshape(v, (*lead, nx, S, ny, S, nz, S))
    axes = (*range(k), k, k + 2, k + 4, k + 1, k + 3, k + 5)
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, nx * ny * nz, S**3))


def untile_cubes(cubes, grid: tuple[int, int, int], S: int) -> Tensor:
    """Inverse of :func:`tile_to_cubes`."""
    c = as_tensor(cubes)
    *lead, n, s3 = c.shape
    nx, ny, nz = grid
    if n != nx * ny * nz or s3 != S**3:
        raise ValueError(f"cannot untile {c.shape} into grid {grid} with S={S}")
    k = len(lead)
    x = T.reshape(c, (*lead, nx, ny, nz, S, S, S))
    axes = (*range(k), k, k + 3, k + 1, k + 4, k + 2, k + 5)
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, nx * S, ny * S, nz * S))


def embed_cubes(cubes, weight, bias=None) -> Tensor:
    """Linear map applied to each cube independently (a stride-S conv)."""
    cubes, weight = as_tensor(cubes), as_tensor(weight)
    if cubes.shape[-1] != weight.shape[0]:
        raise ValueError(f"cube length {cubes.shape[-1]} does not match embedding weight {weight.shape}")
    z = T.matmul(cubes, weight)
    return z if bias is None else T.add(z, bias)


def cube_grid_positions(grid: tuple[int, int, int]) -> np.ndarray:
    nx, ny, nz = grid
    ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)


def position_encoding(grid: tuple[int, int, int], d: int, dtype=np.float64) -> np.ndarray:
    """``[N, d]`` sin/cos encoding of cube grid coordinates; row 0 is zeros.

    Each row is ``[sin(x w), cos(x w), sin(y w), cos(y w), sin(z w), cos(z w)]``
    with ``w_i = 10000**(-i / (d/6))``.
    """
    if d % 6:
        raise ValueError(f"d={d} is not divisible by 6")
    dp = d // 6
    pos = cube_grid_positions(grid).astype(np.float64)
    freq = 1.0 / 10000.0 ** (np.arange(dp) / dp)
    parts = []
    for axis in range(3):
        ang = pos[:, axis : axis + 1] * freq[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    pe = np.concatenate([np.zeros((1, d)), np.concatenate(parts, axis=1)], axis=0)
    return pe.astype(dtype)


# ---------------------------------------------------------------------------
# encoder


def _p(params: Mapping, name: str) -> Tensor:
    return as_tensor(params[name])


def attention(z, params: Mapping, prefix: str, cfg: ViTConfig, trace: list | None = None) -> Tensor:
    """Multi-head self-attention on ``[B, N, d]`` (input already normalized)."""
    B, N, d = z.shape
    M, dm = cfg.M, cfg.head_dim
    qkv = T.add(T.matmul(z, _p(params, prefix + "qkv.weight")), _p(params, prefix + "qkv.bias"))
    qkv = T.transpose(T.reshape(qkv, (B, N, 3, M, dm)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    if cfg.scaled_attention:
        logits = T.scale(logits, 1.0 / np.sqrt(dm))
    A = T.softmax_lastdim(logits)
    if trace is not None:
        trace.append(A.data)
    heads = T.matmul(A, v)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (B, N, d))
    return T.add(T.matmul(merged, _p(params, prefix + "proj.weight")), _p(params, prefix + "proj.bias"))


def encoder_block_forward(z, params: Mapping, index: int, cfg: ViTConfig, trace: list | None = None) -> Tensor:
    """Pre-norm block: attention + residual, then MLP + residual.

    ``z`` is ``[N, d]`` or ``[B, N, d]``.
    """
    z = as_tensor(z)
    single = z.ndim == 2
    if single:
        z = T.reshape(z, (1, *z.shape))
    b = f"blocks.{index}."
    h = T.layer_norm(z, _p(params, b + "ln1.gamma"), _p(params, b + "ln1.beta"), cfg.ln_eps)
    z_att = T.add(attention(h, params, b + "attn.", cfg, trace), z)
    h = T.layer_norm(z_att, _p(params, b + "ln2.gamma"), _p(params, b + "ln2.beta"), cfg.ln_eps)
    h = T.add(T.matmul(h, _p(params, b + "mlp.fc1.weight")), _p(params, b + "mlp.fc1.bias"))
    h = T.gelu(h)
    h = T.add(T.matmul(h, _p(params, b + "mlp.fc2.weight")), _p(params, b + "mlp.fc2.bias"))
    out = T.add(h, z_att)
    return T.reshape(out, out.shape[1:]) if single else out


def _check_volume(volume: Tensor, cfg: ViTConfig) -> bool:
    if volume.ndim == 3:
        batched = False
    elif volume.ndim == 4:
        batched = True
    else:
        raise ValueError(f"expected [H, W, D] or [B, H, W, D] input, got {volume.shape}")
    if tuple(volume.shape[-3:]) != cfg.input_shape:
        raise ValueError(f"volume extents {volume.shape[-3:]} do not match config {cfg.input_shape}")
    return batched


def token_sequence(volume, params: Mapping, cfg: ViTConfig) -> Tensor:
    """Embedded cubes with the class token prepended and positions added: ``[B, N, d]``."""
    volume = as_tensor(volume)
    B = volume.shape[0]
    cubes = tile_to_cubes(volume, cfg.S)
    z = embed_cubes(cubes, _p(params, "embed.weight"), _p(params, "embed.bias"))
    cls = T.broadcast_to(T.reshape(_p(params, "cls_token"), (1, 1, cfg.d)), (B, 1, cfg.d))
    z = T.concat([cls, z], axis=1)
    pe = position_encoding(cfg.grid, cfg.d, dtype=z.dtype)
    return T.add(z, pe)


def forward_features(volume, params: Mapping, cfg: ViTConfig, trace: list | None = None) -> Tensor:
    """Class-token feature after the final layer norm: ``[d]`` or ``[B, d]``."""
    volume = as_tensor(volume)
    batched = _check_volume(volume, cfg)
    if not batched:
        volume = T.reshape(volume, (1, *volume.shape))
    z = token_sequence(volume, params, cfg)
    for i in range(cfg.L):
        z = encoder_block_forward(z, params, i, cfg, trace)
    z = T.layer_norm(z, _p(params, "norm.gamma"), _p(params, "norm.beta"), cfg.ln_eps)
    feat = z[:, 0, :]
    return feat if batched else T.reshape(feat, (cfg.d,))


def forward_classify(volume, params: Mapping, cfg: ViTConfig, trace: list | None = None) -> Tensor:
    """Logits ``[C]`` (or ``[B, C]``) from the class-token feature."""
    feat = forward_features(volume, params, cfg, trace)
    if feat.ndim == 1:
        return T.reshape(T.matmul(T.reshape(feat, (1, cfg.d)), _p(params, "head.weight")), (cfg.C,))
    return T.matmul(feat, _p(params, "head.weight"))


def predict_proba(volumes: np.ndarray, params: Mapping, cfg: ViTConfig, batch_size: int = 64) -> np.ndarray:
    """Softmax class probabilities ``[n, C]`` without recording gradients."""
    consts = {k: Tensor(v) for k, v in params.items()}
    out = []
    for start in range(0, len(volumes), batch_size):
        logits = forward_classify(volumes[start : start + batch_size], consts, cfg).data
        out.append(T.softmax_lastdim(Tensor(logits)).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.C))
