"""Sketch decoder with gated dual cross-attention and the entity-linking head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor

GATED, ENCODER_ONLY, MEMORY_ONLY = "gated", "encoder_only", "memory_only"
GATE_MODES = (GATED, ENCODER_ONLY, MEMORY_ONLY)


def causal_mask(n: int) -> np.ndarray:
    """Boolean allow-mask letting position t see positions <= t."""
    return np.tril(np.ones((n, n), dtype=bool))


class DecoderLayer(Module):
    """Self-attention, then cross-attention to the history and to the memory
    fused by a scalar sigmoid gate per position, then a feed-forward block.
    All sublayers are residual with post-norm.

    ``gate_mode`` ``encoder_only`` fixes the gate at 1 (history only) and
    ``memory_only`` at 0; the unused cross-attention is not built.
    """

    def __init__(self, dim: int, heads: int, ffn: int, dropout: float, gate_mode: str, rng: np.random.Generator):
        if gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {gate_mode!r}")
        self.gate_mode = gate_mode
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        if gate_mode != MEMORY_ONLY:
            self.enc_attn = MultiHeadAttention(dim, heads, rng)
        if gate_mode != ENCODER_ONLY:
            self.mem_attn = MultiHeadAttention(dim, heads, rng)
        if gate_mode == GATED:
            self.gate = Linear(dim, 1, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn, dropout, rng)
        self.norm3 = LayerNorm(dim)
        self.p = dropout
        self.rng = rng
        self.record = False
        self.last_gate: np.ndarray | None = None
        self.last_branches: tuple | None = None

    def __call__(self, x: Tensor, self_mask, H_enc: Tensor, enc_mask, E_K: Tensor, mem_mask) -> Tensor:
        h = self.self_attn(x, x, x, self_mask)
        x = self.norm1(x + T.dropout(h, self.p, self.rng, self.training))
        if self.gate_mode == GATED:
            from_enc = self.enc_attn(x, H_enc, H_enc, enc_mask)
            from_mem = self.mem_attn(x, E_K, E_K, mem_mask)
            g = T.sigmoid(self.gate(from_mem))
            agg = g * from_enc + (1.0 - g) * from_mem
            gate_values = g.data[..., 0]
        elif self.gate_mode == ENCODER_ONLY:
            from_enc = from_mem = agg = self.enc_attn(x, H_enc, H_enc, enc_mask)
            gate_values = np.ones(x.shape[:-1])
        else:
            from_enc = from_mem = agg = self.mem_attn(x, E_K, E_K, mem_mask)
            gate_values = np.zeros(x.shape[:-1])
        if self.record:
            self.last_gate = gate_values
            self.last_branches = (from_enc.data, from_mem.data, agg.data)
        x = self.norm2(x + T.dropout(agg, self.p, self.rng, self.training))
        return self.norm3(x + T.dropout(self.ffn(x), self.p, self.rng, self.training))


class ResponseDecoder(Module):
    def __init__(self, word_emb: Embedding, vocab_size: int, dim: int, layers: int, heads: int, ffn: int,
                 dropout: float, max_len: int, gate_mode: str, tie_output: bool, rng: np.random.Generator):
        self.word_emb = word_emb
        self.pos_emb = Embedding(max_len, dim, rng)
        self.layers = [DecoderLayer(dim, heads, ffn, dropout, gate_mode, rng) for _ in range(layers)]
        self.tie_output = tie_output
        if tie_output:
            self.out_bias = T.Parameter(np.zeros(vocab_size), "out_bias")
        else:
            self.out = Linear(dim, vocab_size, rng)
        self.p = dropout
        self.rng = rng
        self.max_len = max_len

    def record(self, on: bool = True) -> None:
        for layer in self.layers:
            layer.record = on

    def __call__(self, ids: np.ndarray, H_enc: Tensor, enc_mask, E_K: Tensor, mem_mask) -> Tensor:
        """Final decoder states (batch, T, d) for input token ids (batch, T).

        ``enc_mask`` and ``mem_mask`` are key allow-masks broadcastable to
        (batch, T, key_len).
        """
        B, n = ids.shape
        if n > self.max_len:
            raise ShapeError(f"decoder input of length {n} exceeds the maximum {self.max_len}")
        x = self.word_emb(ids) + self.pos_emb(np.arange(n))
        x = T.dropout(x, self.p, self.rng, self.training)
        self_mask = causal_mask(n)
        for layer in self.layers:
            x = layer(x, self_mask, H_enc, enc_mask, E_K, mem_mask)
        return x

    def sketch_logits(self, H: Tensor) -> Tensor:
        """Vocabulary logits ``H W_v + b_v``; no softmax applied."""
        if self.tie_output:
            return H @ T.swap_last(self.word_emb.weight) + self.out_bias
        return self.out(H)

    def gates(self) -> list[np.ndarray | None]:
        return [layer.last_gate for layer in self.layers]


def link_logits(H: Tensor, E_K: Tensor) -> Tensor:
    """Dot products of decoder states (batch, T, d) with memory rows (batch, L, d)."""
    return H @ T.swap_last(E_K)


def entity_link_distribution(h_t: Tensor, E_K: Tensor) -> Tensor:
    """Softmax of ``h_t . E_K[k]`` over entity rows ``k >= 1``.

    Returns a length-|M| distribution; the summary slot (row 0) is excluded.
    """
    if h_t.ndim != 1 or E_K.ndim != 2 or E_K.shape[1] != h_t.shape[0]:
        raise ShapeError(f"expected h_t (d,) and E_K (|M|+1, d), got {h_t.shape} and {E_K.shape}")
    scores = E_K @ h_t.reshape(h_t.shape[0], 1)
    valid = np.ones(E_K.shape[0], dtype=bool)
    valid[0] = False
    probs = T.softmax_masked(scores.reshape(E_K.shape[0]), valid)
    return probs[1:]
