"""Context-aware memory: masked transformer layers over ``[Sum.Rep; entities]``."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .kb import MemoryMask
from .nn import EncoderLayer, Module
from .tensor import Tensor

MASKED, FULL = "M", "F"


def parse_scheme(scheme: str | Sequence[str], layers: int | None = None) -> tuple[str, ...]:
    """Validate a per-layer scheme such as ``"MMF"``."""
    flags = tuple(scheme)
    if not flags or any(f not in (MASKED, FULL) for f in flags):
        raise ConfigError(f"mask scheme must be a nonempty string over {{M, F}}, got {scheme!r}")
    if layers is not None and len(flags) != layers:
        raise ConfigError(f"mask scheme {scheme!r} has {len(flags)} entries but there are {layers} memory layers")
    return flags


class MemoryEncoder(Module):
    def __init__(self, dim: int, layers: int, heads: int, ffn: int, dropout: float,
                 scheme: str, rng: np.random.Generator):
        self.layers = [EncoderLayer(dim, heads, ffn, dropout, rng) for _ in range(layers)]
        self.scheme = parse_scheme(scheme, layers)
        self.dim = dim

    def record_attention(self, on: bool = True) -> None:
        for layer in self.layers:
            layer.attn.record = on

    def attention_maps(self) -> list[np.ndarray | None]:
        return [layer.attn.last_attention for layer in self.layers]

    def __call__(self, x: Tensor, masked: np.ndarray, full: np.ndarray) -> Tensor:
        """Run all layers over a padded batch.

        ``x`` is (batch, L, d); ``masked`` and ``full`` are boolean
        (batch, L, L) allow-masks used by ``M`` and ``F`` layers respectively.
        """
        for flag, layer in zip(self.scheme, self.layers):
            x = layer(x, masked if flag == MASKED else full)
        return x


def generate_memory(encoder: MemoryEncoder, sum_rep: Tensor, entity_emb: Tensor, mask: MemoryMask) -> Tensor:
    """``E_K`` for one example: row 0 is the summary slot, rows 1.. the entities."""
    n = entity_emb.shape[0]
    if mask.size != n + 1:
        raise ShapeError(f"memory mask is {mask.size}x{mask.size} but there are {n} entities")
    if sum_rep.shape != (encoder.dim,) or entity_emb.shape[1:] != (encoder.dim,):
        raise ShapeError(f"expected sum_rep ({encoder.dim},) and entities (n, {encoder.dim})")
    x = T.concat([sum_rep.reshape(1, encoder.dim), entity_emb], axis=0).reshape(1, n + 1, encoder.dim)
    full = np.ones((1, n + 1, n + 1), dtype=bool)
    return encoder(x, mask.allowed[None], full)[0]


def generate_memory_no_sumrep(encoder: MemoryEncoder, entity_emb: Tensor, mask: MemoryMask) -> Tensor:
    """Ablation without the summary slot; the mask shrinks to its row blocks."""
    n = entity_emb.shape[0]
    if mask.size != n + 1:
        raise ShapeError(f"memory mask is {mask.size}x{mask.size} but there are {n} entities")
    x = entity_emb.reshape(1, n, encoder.dim)
    full = np.ones((1, n, n), dtype=bool)
    return encoder(x, mask.without_summary()[None], full)[0]
