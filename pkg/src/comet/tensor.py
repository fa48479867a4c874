"""
Minimal reverse-mode automatic differentiation on top of numpy.

Every operation produces a new :class:`Tensor`. When at least one input
requires a gradient (and recording is enabled), the result keeps references
to its inputs together with a closure mapping the output gradient to input
gradients. Calling :meth:`Tensor.backward` assembles a :class:`Tape` from the
recorded graph and replays it in exact reverse execution order.

All data is stored as 64-bit floats.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvalidMaskError, ShapeError, StateError

_counter = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap the result of a custom op.

        ``backward`` receives the output gradient and returns one gradient
        (or ``None``) per parent, in order.
        """
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out.name = None
        out._seq = next(_counter)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        Tape.from_output(self).backward(self, np.asarray(grad, dtype=np.float64))

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its own Adam moment buffers."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of the ops that produced a tensor.

    Nodes are stored in execution order; :meth:`backward` walks them in
    reverse, accumulating gradients additively into every leaf reached.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, out: Tensor, grad: np.ndarray) -> None:
        if not out.requires_grad:
            raise StateError("tensor does not require grad")
        if out._backward is None:
            out.grad = grad.copy() if out.grad is None else out.grad + grad
            return
        pending = {id(out): grad}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = np.array(pg, dtype=np.float64) if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    pending[key] = pg if key not in pending else pending[key] + pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * ad / bd**2, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op(ad / bd, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor.from_op(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * 0.5 / y,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return Tensor.from_op(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


# -- shape manipulation ---------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor.from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(np.array(x.data[idx]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor.from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes.

    Both operands need at least two dimensions.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor.from_op(ad @ bd, (a, b), backward)


# -- normalisation and probability ----------------------------------------


def additive_mask(mask) -> np.ndarray:
    """Turn a boolean allow-mask into additive 0 / -inf form.

    Float masks are assumed to already be additive and are returned as is.
    """
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return np.where(mask, 0.0, -np.inf)
    return mask.astype(np.float64, copy=False)


def softmax_masked(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis after adding ``mask`` to the logits.

    ``mask`` holds 0 for allowed and -inf for blocked entries (a boolean
    allow-mask is also accepted). Blocked entries come out exactly 0.
    """
    z = logits.data
    if mask is not None:
        z = z + additive_mask(mask)
    zmax = z.max(axis=-1, keepdims=True)
    if np.isneginf(zmax).any():
        raise InvalidMaskError("mask blocks every entry of at least one row")
    e = np.exp(z - zmax)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(y, (logits,), backward)


def log_softmax(logits: Tensor, mask=None) -> Tensor:
    z = logits.data
    if mask is not None:
        z = z + additive_mask(mask)
    zmax = z.max(axis=-1, keepdims=True)
    if np.isneginf(zmax).any():
        raise InvalidMaskError("mask blocks every entry of at least one row")
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        gs = np.where(np.isfinite(y), g, 0.0)
        return (gs - p * gs.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(y, (logits,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine map ``gamma, beta``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = xd.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return Tensor.from_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept activations are scaled by ``1 / (1 - p)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise StateError("dropout in training mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients are scattered back additively."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def backward(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding id out of range [0, {rows})")
    return Tensor.from_op(table.data[ids], (table,), backward)


def cross_entropy_smoothed(
    logits: Tensor,
    targets,
    epsilon: float = 0.0,
    ignore_index: int = -1,
    valid=None,
) -> Tensor:
    """Label-smoothed cross-entropy averaged over non-ignored positions.

    The target distribution puts ``1 - epsilon`` on the gold class and
    spreads ``epsilon`` uniformly over the remaining valid classes.
    ``valid`` is an optional boolean array broadcastable to ``logits``
    restricting the classes of each row; invalid classes get zero
    probability. Positions whose target equals ``ignore_index`` are skipped.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {epsilon}")
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    used = targets != ignore_index
    if np.any((targets[used] < 0) | (targets[used] >= V)):
        raise IndexError(f"target index out of range [0, {V})")
    n_used = int(used.sum())
    if n_used == 0:
        return Tensor(0.0)

    if valid is None:
        valid = np.ones(logits.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), logits.shape)
    safe_t = np.where(used, targets, 0)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
    if np.any(used & ~valid[onehot.astype(bool)].reshape(targets.shape)):
        raise IndexError("target points at a class excluded by the validity mask")

    z = np.where(valid, logits.data, -np.inf)
    # Unused rows may be fully invalid; give them a harmless finite row.
    z = np.where(used[..., None], z, 0.0)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(logp)

    n_valid = np.where(used[..., None], valid, True).sum(axis=-1, keepdims=True)
    others = np.maximum(n_valid - 1, 1)
    smooth = np.where(n_valid > 1, epsilon, 0.0)
    q = onehot * (1.0 - smooth) + (valid & (onehot == 0)) * (smooth / others)
    q = q * used[..., None]
    row_loss = -np.where(q > 0, q * np.where(np.isfinite(logp), logp, 0.0), 0.0).sum(axis=-1)
    loss = row_loss.sum() / n_used

    def backward(g):
        # q sums to 1 on used rows and to 0 on ignored rows.
        grad = (p * used[..., None] - q) / n_used
        return (g * grad,)

    return Tensor.from_op(np.asarray(loss), (logits,), backward)


# -- optimisation ---------------------------------------------------------


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; gradients are cleared afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise StateError(f"parameter {p.name!r} has no gradient; run backward() first")
    b1, b2 = betas
    for p in params:
        g = p.grad
        p.step += 1
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * g * g
        mhat = p.m / (1.0 - b1**p.step)
        vhat = p.v / (1.0 - b2**p.step)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = None


# -- numerical checking ---------------------------------------------------


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative discrepancy ``|a - b| / max(|a|, |b|, floor)``."""
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den
