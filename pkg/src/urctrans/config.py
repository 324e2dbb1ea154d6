"""Run configuration: one JSON object with a section per component.

Every key is checked; unknown keys are an error. The top-level ``seed``
drives all stochastic choices, so sections do not carry their own seeds.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping

import numpy as np

from .data import PhantomConfig
from .finetune import FinetuneConfig
from .pretrain import AugmentConfig, PretrainConfig
from .vit3d import TINY_CONFIG, ViTConfig


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class SamplerSection:
    positive_ratio: float = 0.2
    batch_size: int = 64


@dataclass(frozen=True)
class DataSection:
    n_train_scans: int = 24
    n_test_scans: int = 8


def desk_phantom() -> PhantomConfig:
    return PhantomConfig(shape=(48, 48, 48), nodule_count=3, negative_count=10, candidate_extent=12)


@dataclass
class RunConfig:
    """Desk-scale defaults: tiny transformer, 48^3 phantoms, 16^3 -> 12^3 views."""

    seed: int = 0
    precision: str = "float32"
    vit: ViTConfig = TINY_CONFIG
    augment: AugmentConfig = AugmentConfig(S1=16, S2=12)
    pretrain: PretrainConfig = PretrainConfig(steps=800, batch_size=64, lr=1e-3)
    finetune: FinetuneConfig = FinetuneConfig(epochs=20, lr=1e-3)
    sampler: SamplerSection = SamplerSection()
    optim: OptimConfig = OptimConfig()
    phantom: PhantomConfig = field(default_factory=desk_phantom)
    data: DataSection = DataSection()

    @property
    def dtype(self):
        return {"float32": np.float32, "float64": np.float64}[self.precision]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"seed": self.seed, "precision": self.precision}
        for f in fields(self):
            if f.name in out:
                continue
            section = asdict(getattr(self, f.name))
            section.pop("seed", None)
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunConfig:
        base = cls()
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, value in d.items():
            current = getattr(base, name)
            if name in ("seed", "precision"):
                kwargs[name] = value
                continue
            if not isinstance(value, Mapping):
                raise ValueError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(current)} - {"seed"}
            bad = set(value) - allowed
            if bad:
                raise ValueError(f"unknown keys in section {name!r}: {sorted(bad)}")
            kwargs[name] = replace(current, **{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
        cfg = replace(base, **kwargs)
        if cfg.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_input_size(self, size: int) -> RunConfig:
        """Candidate extent and model input follow ``size``."""
        vit = replace(self.vit, H=size, W=size, D=size)
        phantom = replace(self.phantom, candidate_extent=size)
        return replace(self, vit=vit, phantom=phantom)
