"""Transformer building blocks on top of :mod:`comet.tensor`."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor


class Module:
    """Container that discovers parameters and submodules by attribute."""

    training = True

    def named_parameters(self, prefix: str = "", _seen: set | None = None):
        """Parameters in attribute order; a shared parameter is listed once."""
        seen = set() if _seen is None else _seen
        out = OrderedDict()
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + ".", seen))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}.", seen))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, in_features, out_features), "weight")
        self.bias = Parameter(np.zeros(out_features), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, scale: float = 0.1):
        self.weight = Parameter(rng.uniform(-scale, scale, size=(num, dim)), "weight")

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim), "gamma")
        self.beta = Parameter(np.zeros(dim), "beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Position-wise ``Linear -> ReLU -> Dropout -> Linear``."""

    def __init__(self, dim: int, hidden: int, dropout: float, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.p = dropout
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        h = T.dropout(T.relu(self.fc1(x)), self.p, self.rng, self.training)
        return self.fc2(h)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` subspaces.

    Inputs are (batch, length, dim) or (length, dim). ``mask`` is additive
    (0 / -inf) or a boolean allow-mask, broadcastable to
    (batch, query_len, key_len). Set ``record`` to keep the attention
    probabilities of the last call in ``last_attention`` with shape
    (batch, heads, query_len, key_len).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model dimension {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.d_head = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.record = False
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
        squeeze = q.ndim == 2
        if squeeze:
            q, k, v = (x.reshape(1, *x.shape) for x in (q, k, v))
        if q.shape[-1] != self.dim or k.shape[-1] != self.dim or v.shape[-1] != self.dim:
            raise ShapeError(f"attention inputs must have last dimension {self.dim}")
        B, Lq, _ = q.shape
        Q = self._split(self.q_proj(q))
        K = self._split(self.k_proj(k))
        V = self._split(self.v_proj(v))
        scores = (Q @ T.swap_last(K)) * (1.0 / math.sqrt(self.d_head))
        if mask is not None:
            mask = T.additive_mask(mask)
            if mask.ndim == 3:
                mask = mask[:, None]
        attn = T.softmax_masked(scores, mask)
        if self.record:
            self.last_attention = attn.data.copy()
        ctx = (attn @ V).transpose(0, 2, 1, 3).reshape(B, Lq, self.dim)
        out = self.out_proj(ctx)
        return out.reshape(Lq, self.dim) if squeeze else out


class EncoderLayer(Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, dim: int, heads: int, ffn: int, dropout: float, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn, dropout, rng)
        self.norm2 = LayerNorm(dim)
        self.p = dropout
        self.rng = rng

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        h = self.attn(x, x, x, mask)
        x = self.norm1(x + T.dropout(h, self.p, self.rng, self.training))
        h = self.ffn(x)
        return self.norm2(x + T.dropout(h, self.p, self.rng, self.training))
