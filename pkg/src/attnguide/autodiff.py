"""Dense tensors with reverse-mode differentiation.

Every primitive is a numpy computation paired with a closure that maps the
output gradient onto the gradients of its inputs.  Calling :func:`backward`
on a scalar orders the recorded nodes topologically (the tape), replays it in
reverse, and leaves total derivatives in ``Tensor.grad`` for every leaf that
requires them.

Reductions use numpy's fixed pairwise order, so a forward/backward pass on the
same inputs is bit-for-bit repeatable.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradientTape",
    "AutodiffError",
    "ShapeError",
    "NonFiniteError",
    "DegenerateRowError",
    "EmptyMaskError",
    "DeterminismError",
    "no_grad",
    "matmul",
    "linear",
    "softmax_rows",
    "cross_entropy_masked",
    "matrix_mse",
    "weighted_sq_error",
    "layer_norm",
    "gelu",
    "embedding",
    "dropout",
    "take_rows",
    "backward",
    "finite_difference_check",
]


class AutodiffError(Exception):
    """Base class for engine errors."""


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class DegenerateRowError(AutodiffError, ValueError):
    pass


class EmptyMaskError(AutodiffError, ValueError):
    pass


class DeterminismError(AutodiffError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional array that optionally tracks how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return scale(total(self), 1.0 / self.data.size)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a single reduction is cheaper than isfinite over the whole array
    if not math.isfinite(float(arr.sum(dtype=np.float64))):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = a.data * c
    return _node(out, (a,), lambda g: (g * c,), "scale")


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _node(out, (a,), bw, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _node(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly.

    For 2-d inputs this is the plain ``m x k @ k x n`` product.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` where x has any number of leading axes and w is ``in x out``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[1])

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw, "linear")


# normalisation and activations --------------------------------------------


def softmax_rows(x: Tensor, valid_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, restricted to ``valid_mask`` positions.

    Masked entries come out exactly 0.  The mask may be any shape that
    broadcasts against ``x``.
    """
    data = x.data
    if valid_mask is None:
        shifted = data - data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(valid_mask, dtype=bool), data.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row has no valid positions")
        neg = np.array(-np.inf, dtype=data.dtype)
        masked = np.where(mask, data, neg)
        shifted = np.where(mask, masked - masked.max(axis=-1, keepdims=True), neg)
        e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        ggain = (lead * xhat.reshape(-1, d)).sum(axis=0)
        gbias = lead.sum(axis=0)
        return gx, ggain, gbias

    return _node(out, (x, gain, bias), bw, "layer_norm")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * x.dtype.type(_INV_SQRT2)))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * x.dtype.type(_INV_SQRT2PI)
        return (g * (cdf + x.data * pdf),)

    return _node(out, (x,), bw, "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# indexing ------------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    out = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _node(out, (weight,), bw, "embedding")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Flatten all but the last axis and gather the given rows."""
    index = np.asarray(index, dtype=np.int64)
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat[index]

    def bw(g):
        gx = np.zeros_like(flat)
        np.add.at(gx, index, g)
        return (gx.reshape(x.shape),)

    return _node(out, (x,), bw, "take_rows")


def select_axis(x: Tensor, axis: int, index: Sequence[int]) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    out = np.take(x.data, index, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        gx[tuple(sl)] += g
        return (gx,)

    return _node(out, (x,), bw, "select")


# losses ------------------------------------------------------------------


def cross_entropy_masked(logits: Tensor, labels, positions) -> Tensor:
    """Mean of ``-log softmax(logits[p])[labels[p]]`` over row indices ``positions``.

    ``logits`` is ``N x V``; ``labels`` holds one id per row.
    """
    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    if positions.size == 0:
        raise EmptyMaskError("no masked positions")
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be N x V, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != logits.shape[0]:
        raise ShapeError("one label per logits row required")
    rows = logits.data[positions]
    target = labels[positions]
    if target.min() < 0 or target.max() >= logits.shape[1]:
        raise ValueError("label outside vocabulary")
    shifted = rows - rows.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(z)
    picked = logp[np.arange(positions.size), target]
    count = positions.size
    out = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def bw(g):
        p = e / z
        p[np.arange(count), target] -= 1.0
        p *= g / count
        gl = np.zeros_like(logits.data)
        np.add.at(gl, positions, p)
        return (gl,)

    return _node(out, (logits,), bw, "cross_entropy")


def matrix_mse(h: Tensor, p) -> Tensor:
    """Squared Frobenius distance divided by the number of entries."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=h.dtype)
    if h.shape != p.shape:
        raise ShapeError(f"matrix_mse shape mismatch: {h.shape} vs {p.shape}")
    diff = h.data - p
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=h.dtype)
    return _node(out, (h,), lambda g: (diff * (2.0 * g / n),), "matrix_mse")


def weighted_sq_error(h: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """``sum(weight * (h - target)**2)`` with ``target``/``weight`` constants.

    ``weight`` broadcasts against ``h``; used to evaluate many per-matrix MSE
    terms in one node.
    """
    diff = h.data - target
    wd = np.broadcast_to(weight, diff.shape) * diff
    out = np.asarray((wd * diff).sum(), dtype=h.dtype)
    return _node(out, (h,), lambda g: (wd * (2.0 * g),), "weighted_sq_error")


# reverse pass ------------------------------------------------------------


class GradientTape:
    """Topologically ordered record of the nodes reachable from a root."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def replay(self) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if g is not None:
                contribs = node._backward(g)
                for parent, pg in zip(node._parents, contribs):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            # consume the tape so intermediate buffers can be released
            node._parents = ()
            node._backward = None
            node.requires_grad = False


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any tensor that requires grad")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    GradientTape(loss).replay()


# verification --------------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
    num_coords: int = 100,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between backprop and central differences.

    ``loss_fn`` rebuilds the loss from the current values of ``params``; the
    parameters should be float64.  Coordinates are drawn uniformly from the
    concatenation of all parameters.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    params = list(params)
    for p in params:
        p.zero_grad()
        p.requires_grad = True
    loss = loss_fn()
    again = loss_fn()
    if loss.data.tobytes() != again.data.tobytes():
        raise DeterminismError("loss_fn returned different values for identical inputs")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]

    sizes = np.array([p.data.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(num_coords, int(offsets[-1])), replace=False)
    worst = 0.0
    with no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            local = int(flat - offsets[which])
            p = params[which]
            view = p.data.reshape(-1)
            orig = view[local]
            view[local] = orig + epsilon
            f_plus = loss_fn().item()
            view[local] = orig - epsilon
            f_minus = loss_fn().item()
            view[local] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[which].reshape(-1)[local])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
