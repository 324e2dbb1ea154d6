"""Dense tensors with a define-by-run reverse-mode tape.

A :class:`Tensor` is an immutable wrapper around a numpy array. When a
:class:`Tape` is active and at least one input of an operation is attached to
it, the operation is appended to the tape together with a vector-Jacobian
closure. ``Tape.backward`` walks the nodes once in reverse order.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "NonFiniteError",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "batch_norm",
    "broadcast_to",
    "concat",
    "cross_entropy",
    "gelu",
    "getitem",
    "l2_normalize",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "reshape",
    "scale",
    "softmax_lastdim",
    "sub",
    "sum",
    "transpose",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]
    dtype: np.dtype


class Tensor:
    """N-d array value, optionally attached to a tape node."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100

    def __init__(self, data, node: int | None = None, tape: Tape | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


class Tape:
    """Append-only record of differentiable operations.

    Use as a context manager; parameters become leaf nodes via :meth:`watch`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Register ``value`` as a leaf and return the attached tensor."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.nodes.append(_Node("leaf", (), None, data.shape, data.dtype))
        return Tensor(data, len(self.nodes) - 1, self)

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        ids = []
        for t in inputs:
            if t.node is not None:
                if t.tape is not self:
                    raise ValueError("operation mixes tensors from different tapes")
                ids.append(t.node)
            else:
                ids.append(-1)
        self.nodes.append(_Node(kind, tuple(ids), vjp, out.shape, out.dtype))
        return Tensor(out, len(self.nodes) - 1, self)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse accumulation from a scalar ``loss``.

        Returns a gradient for every node on the tape; nodes with no path to
        the loss get zeros.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node] = np.ones(loss.shape, dtype=loss.dtype)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            in_grads = node.vjp(g)
            for j, gj in zip(node.inputs, in_grads):
                if j < 0 or gj is None:
                    continue
                if gj.shape != self.nodes[j].shape:
                    raise AssertionError(
                        f"{node.kind}: gradient shape {gj.shape} != input shape {self.nodes[j].shape}"
                    )
                grads[j] = gj if grads[j] is None else grads[j] + gj
        return {
            i: g if g is not None else np.zeros(n.shape, dtype=n.dtype)
            for i, (g, n) in enumerate(zip(grads, self.nodes))
        }

    def gradients(self, loss: Tensor, wrt: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Convenience: backward and pick out gradients by parameter name."""
        gmap = self.backward(loss)
        return {name: gmap[t.node] for name, t in wrt.items()}


def _check_finite(out: np.ndarray, kind: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    return out


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    _check_finite(out, kind)
    tape = active_tape()
    if tape is not None and any(t.node is not None and t.tape is tape for t in inputs):
        return tape.record(kind, inputs, out, vjp)
    if tape is not None and any(t.node is not None for t in inputs):
        raise ValueError("operation mixes tensors from different tapes")
    # no active tape: attached inputs are read as constants
    return Tensor(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    dtype = (ta or tb).dtype
    if ta is None:
        ta = Tensor(np.asarray(a, dtype=dtype))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=dtype))
    return ta, tb


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    x, y = a.data, b.data
    return _emit(
        "mul", (a, b), x * y, lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    )


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _emit("scale", (a,), a.data * a.dtype.type(s), lambda g: (g * s,))


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _emit("gelu", (a,), out, vjp)


# ---------------------------------------------------------------------------
# shape


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    a = as_tensor(a)
    src_shape, dtype = a.shape, a.dtype

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", (a,), np.array(a.data[idx]), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = np.array(np.broadcast_to(a.data, shape))
    return _emit("broadcast", (a,), out, lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {y.shape}")
    try:
        out = np.matmul(x, y)
    except ValueError as err:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {y.shape}") from err

    def vjp(g):
        if y.ndim == 2:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# normalization and probabilistic ops


def softmax_lastdim(a: Tensor) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", (a,), y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def _standardize_vjp(g, xhat, rstd, axis):
    n = xhat.shape[axis]
    return rstd * (g - g.sum(axis=axis, keepdims=True) / n - xhat * (g * xhat).sum(axis=axis, keepdims=True) / n)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then ``gamma * x + beta``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gm, bt = gamma.data, beta.data
    out = xhat * gm + bt

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return _standardize_vjp(g * gm, xhat, rstd, -1), dgamma, dbeta

    return _emit("layer_norm", (a, gamma, beta), out, vjp)


def batch_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Standardize each feature over the batch axis (training statistics).

    ``a`` is ``[B, F]``. Without ``gamma``/``beta`` no affine map is applied.
    """
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=0, keepdims=True) + eps)
    xhat = xc * rstd
    if gamma is None:
        return _emit("batch_norm", (a,), xhat, lambda g: (_standardize_vjp(g, xhat, rstd, 0),))
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    gm = gamma.data
    out = xhat * gm + beta.data

    def vjp(g):
        return _standardize_vjp(g * gm, xhat, rstd, 0), (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("batch_norm", (a, gamma, beta), out, vjp)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis row to unit Euclidean norm."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x / norm
    return _emit("l2_normalize", (a,), y, lambda g: ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,))


def cross_entropy(logits: Tensor, labels, exclude_target: bool = False) -> Tensor:
    """Mean softmax cross-entropy over the batch.

    With ``exclude_target`` the target logit is left out of the normalizer, so
    the per-row loss is ``logsumexp_{j != y}(s_j) - s_y`` (may be negative).
    """
    logits = as_tensor(logits)
    s = logits.data
    if s.ndim != 2:
        raise ValueError(f"cross_entropy expects [B, C] logits, got {s.shape}")
    b, c = s.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise ValueError(f"{labels.shape[0]} labels for {b} rows")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    rows = np.arange(b)
    if exclude_target:
        if c < 2:
            raise ValueError("exclude_target needs at least two classes")
        mask = np.zeros_like(s, dtype=bool)
        mask[rows, labels] = True
        m = np.where(mask, -np.inf, s).max(axis=1, keepdims=True)
        e = np.where(mask, 0.0, np.exp(np.where(mask, 0.0, s - m)))
    else:
        m = s.max(axis=1, keepdims=True)
        e = np.exp(s - m)
    tot = e.sum(axis=1, keepdims=True)
    # shifted form keeps constant logits exact: log(C) - 0
    per_row = np.log(tot[:, 0]) - (s[rows, labels] - m[:, 0])
    # mean of deviations from the first row: equal rows average exactly
    loss = np.asarray(per_row[0] + (per_row - per_row[0]).mean(), dtype=s.dtype)
    p = e / tot

    def vjp(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return ((d * (g / b)).astype(s.dtype, copy=False),)

    return _emit("cross_entropy", (logits,), loss, vjp)
