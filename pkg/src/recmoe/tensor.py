"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays. Each differentiable operation records its
parents and a backward closure on a dynamically built graph; ``backward``
on a scalar walks that graph in reverse topological order and accumulates
gradients into ``.grad``. Gradients keep accumulating across repeated
backward calls until cleared, which is what an optimizer step expects.

Everything is float64: this library trades speed for gradients that can be
verified against central finite differences to tight tolerances.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf as _erf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid structural arguments (dims, counts, ranges)."""


class ContractError(ValueError):
    """Raised when an operation's calling contract is violated."""


_GRAD_ENABLED = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (sampling, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat as read-only."""
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap an op result, recording the graph edge when tracking is on."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(dy):
        return (
            _unbroadcast(dy, a.shape) if need_a else None,
            _unbroadcast(dy, b.shape) if need_b else None,
        )

    return _node(out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(dy):
        return (
            _unbroadcast(dy, a.shape) if need_a else None,
            _unbroadcast(-dy, b.shape) if need_b else None,
        )

    return _node(out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(dy):
        return (
            _unbroadcast(dy * b.data, a.shape) if need_a else None,
            _unbroadcast(dy * a.data, b.shape) if need_b else None,
        )

    return _node(out, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def grad_fn(dy):
        return (
            _unbroadcast(dy / b.data, a.shape),
            _unbroadcast(-dy * a.data / (b.data * b.data), b.shape),
        )

    return _node(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda dy: (-dy,))


def power(a: Tensor, p: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data**p

    def grad_fn(dy):
        return (dy * p * a.data ** (p - 1),)

    return _node(out, (a,), grad_fn)


def texp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda dy: (dy * out,))


def tlog(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _node(np.log(a.data), (a,), lambda dy: (dy / a.data,))


def tsqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda dy: (dy * 0.5 / out,))


def ttanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda dy: (dy * (1.0 - out * out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * cdf

    def grad_fn(dy):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (dy * (cdf + x * pdf),)

    return _node(out, (a,), grad_fn)


# -- reductions ----------------------------------------------------------


def _expand_reduced(dy: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(dy, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            dy = np.expand_dims(dy, ax)
    return np.broadcast_to(dy, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(dy):
        return (_expand_reduced(dy, a.shape, axis, keepdims),)

    return _node(out, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size / out.size

    def grad_fn(dy):
        return (_expand_reduced(dy, a.shape, axis, keepdims) / count,)

    return _node(out, (a,), grad_fn)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-sum-exp along one axis (keepdims=False)."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    ex = np.exp(a.data - m)
    s = ex.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis=axis)

    def grad_fn(dy):
        soft = ex / s
        return (np.expand_dims(dy, axis % a.ndim) * soft,)

    return _node(out, (a,), grad_fn)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's stacked-batch broadcasting (operands >= 2-D)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(dy):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(np.matmul(dy, np.swapaxes(b.data, -1, -2)), a.shape)
        if need_b:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), dy), b.shape)
        return ga, gb

    return _node(out, (a, b), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to one."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def grad_fn(dy):
        inner = (dy * out).sum(axis=axis, keepdims=True)
        return (out * (dy - inner),)

    return _node(out, (a,), grad_fn)


def layernorm(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``. No affine part:
    scale and shift are supplied by conditioning-driven modulation."""
    a = _as_tensor(a)
    if a.shape[axis] < 2:
        raise ShapeError(f"layernorm axis {axis} needs >=2 elements, shape {a.shape}")
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def grad_fn(dy):
        m1 = dy.mean(axis=axis, keepdims=True)
        m2 = (dy * out).mean(axis=axis, keepdims=True)
        return (inv * (dy - m1 - out * m2),)

    return _node(out, (a,), grad_fn)


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def grad_fn(dy):
        return (dy.reshape(a.shape),)

    return _node(out, (a,), grad_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 1, -1, -1))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def grad_fn(dy):
        return (dy.transpose(inv),)

    return _node(out, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(dy):
        return tuple(np.split(dy, splits, axis=axis))

    return _node(out, tuple(tensors), grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def grad_fn(dy):
        g = np.zeros(a.shape, dtype=np.float64)
        g[idx] = dy
        return (g,)

    return _node(out, (a,), grad_fn)


def index_select(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis``; duplicate indices accumulate on backward."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(
            f"index out of range for axis {axis} of shape {a.shape}: "
            f"[{idx.min()}, {idx.max()}]"
        )
    out = np.take(a.data, idx, axis=axis)

    def grad_fn(dy):
        g = np.zeros(a.shape, dtype=np.float64)
        if axis == 0:
            np.add.at(g, idx, dy)
        else:
            gm = np.moveaxis(g, axis, 0)
            np.add.at(gm, idx, np.moveaxis(dy, axis, 0))
        return (g,)

    return _node(out, (a,), grad_fn)


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, detached from the graph."""
    return Tensor(_as_tensor(a).data)


# -- embeddings -------------------------------------------------------------


def sinusoidal_embed(t: int, dim: int) -> Tensor:
    """Interleaved sin/cos embedding of a non-negative integer position.

    Frequencies are geometrically spaced with base 10000; index 0 has
    frequency exactly 1. ``dim`` must be even.
    """
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal_embed dim must be even, got {dim}")
    if t < 0:
        raise ConfigError(f"sinusoidal_embed position must be >= 0, got {t}")
    return Tensor(_sinusoidal(np.asarray([t], dtype=np.float64), dim)[0])


def sinusoidal_embed_batch(ts, dim: int) -> Tensor:
    """Vectorized sinusoidal_embed over a 1-D array of positions."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal_embed dim must be even, got {dim}")
    return Tensor(_sinusoidal(np.asarray(ts, dtype=np.float64), dim))


def _sinusoidal(ts: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    angles = ts[:, None] * freqs[None, :]  # [n, half]
    out = np.empty((ts.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor the scalar ``loss`` depends on.

    Repeated calls without zeroing accumulate, matching optimizer semantics.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        dy = grads.pop(id(node), None)
        if dy is None:
            continue
        if node.grad is None:
            node.grad = dy.copy()
        else:
            node.grad = node.grad + dy
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(dy)
        for p, g in zip(node._parents, parent_grads):
            if g is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = g if acc is None else acc + g


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    ``f`` must be deterministic: freeze or replay any sampling (routing
    noise, data noise) before calling. Runs with graph recording off.
    """

    def evaluate(arr: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(arr))
        return out.item() if isinstance(out, Tensor) else float(out)

    work = x.data.copy()
    grad = np.zeros_like(work)
    flat_g = grad.reshape(-1)
    flat = work.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(work)
        flat[i] = orig - h
        fm = evaluate(work)
        flat[i] = orig
        flat_g[i] = (fp - fm) / (2.0 * h)
    return grad


__all__ = [
    "Tensor",
    "ShapeError",
    "ConfigError",
    "ContractError",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "texp",
    "tlog",
    "tsqrt",
    "ttanh",
    "gelu",
    "tsum",
    "tmean",
    "logsumexp",
    "matmul",
    "softmax",
    "layernorm",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "index_select",
    "stop_gradient",
    "sinusoidal_embed",
    "sinusoidal_embed_batch",
    "backward",
    "finite_diff_grad",
]
