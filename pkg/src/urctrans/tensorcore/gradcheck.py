"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    analytic_norm: float
    numeric_norm: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``; both-zero gives 0."""
    diff = float(np.linalg.norm(analytic - numeric))
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / denom


def analytic_gradients(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray]):
    with Tape() as tape:
        watched = {k: tape.watch(v) for k, v in params.items()}
        loss = loss_fn(watched)
    return loss.item(), tape.gradients(loss, watched)


def numeric_gradient(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    name: str,
    h: float = 1e-5,
) -> np.ndarray:
    base = {k: v.copy() for k, v in params.items()}
    target = base[name]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn({k: Tensor(v) for k, v in base.items()}).item()
        flat[i] = orig - h
        fm = loss_fn({k: Tensor(v) for k, v in base.items()}).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
) -> list[GradCheckResult]:
    """Compare tape gradients with central differences for every parameter.

    Parameters must be float64 for the comparison to be meaningful.
    """
    for k, v in params.items():
        if v.dtype != np.float64:
            raise TypeError(f"gradient check needs float64 parameters ({k} is {v.dtype})")
    _, grads = analytic_gradients(loss_fn, params)
    results = []
    for name in params:
        num = numeric_gradient(loss_fn, params, name, h)
        results.append(
            GradCheckResult(
                name,
                relative_error(grads[name], num),
                float(np.linalg.norm(grads[name])),
                float(np.linalg.norm(num)),
            )
        )
    return results
