"""Dialogue history flattening and the history encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import SPEAKERS, SUM, Turn
from .errors import ValidationError
from .nn import Embedding, EncoderLayer, Module
from .tensor import Tensor

#: speaker-tag ids; the summary token gets its own tag
USER, SYSTEM, SUMMARY = 0, 1, 2


@dataclass(frozen=True)
class HistorySequence:
    tokens: tuple[str, ...]
    speakers: tuple[int, ...]
    turn_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != SUM:
            raise ValidationError("history must start with [SUM]")
        if not len(self.tokens) == len(self.speakers) == len(self.turn_ids):
            raise ValidationError("history tokens and tags differ in length")

    def __len__(self) -> int:
        return len(self.tokens)


def _turn_tokens(turn) -> tuple[list[str], int]:
    if isinstance(turn, Turn):
        return turn.tokens, SPEAKERS.index(turn.speaker)
    speaker, text = turn if isinstance(turn, tuple) else (None, turn)
    return text.lower().split(), speaker


def build_history(turns: Sequence, max_len: int | None = None) -> HistorySequence:
    """Flatten ``u1 s1 ... uk`` into one token sequence prefixed by ``[SUM]``.

    ``turns`` holds :class:`Turn` objects or plain strings; strings alternate
    user/system starting with the user. When ``max_len`` is given, whole
    turns are dropped from the front until the sequence fits; if the newest
    turn alone is too long, its oldest tokens are cut.
    """
    pieces = []
    for i, turn in enumerate(turns):
        tokens, speaker = _turn_tokens(turn)
        if speaker is None:
            speaker = i % 2
        pieces.append((tokens, speaker, i))
    if not any(sp == USER for _, sp, _ in pieces):
        raise ValidationError("history needs at least one user utterance")
    if max_len is not None:
        budget = max_len - 1
        while len(pieces) > 1 and sum(len(p[0]) for p in pieces) > budget:
            pieces.pop(0)
        if len(pieces[0][0]) > budget:
            tokens, sp, i = pieces[0]
            pieces[0] = (tokens[len(tokens) - budget :], sp, i)
    tokens, speakers, turn_ids = [SUM], [SUMMARY], [-1]
    for toks, sp, i in pieces:
        tokens.extend(toks)
        speakers.extend([sp] * len(toks))
        turn_ids.extend([i] * len(toks))
    return HistorySequence(tuple(tokens), tuple(speakers), tuple(turn_ids))


class DialogueEncoder(Module):
    """Transformer encoder over ``word + position + speaker`` embeddings.

    Output row 0 (the ``[SUM]`` position) is the summary representation.
    """

    def __init__(self, word_emb: Embedding, dim: int, layers: int, heads: int, ffn: int,
                 dropout: float, max_len: int, rng: np.random.Generator):
        self.word_emb = word_emb
        self.pos_emb = Embedding(max_len, dim, rng)
        self.speaker_emb = Embedding(3, dim, rng)
        self.layers = [EncoderLayer(dim, heads, ffn, dropout, rng) for _ in range(layers)]
        self.p = dropout
        self.rng = rng
        self.max_len = max_len

    def __call__(self, ids: np.ndarray, speakers: np.ndarray, key_mask: np.ndarray | None = None):
        """Encode a padded batch.

        ``ids`` and ``speakers`` are (batch, n); ``key_mask`` marks real
        (non-pad) positions. Returns ``(H, sum_rep)`` with shapes
        (batch, n, d) and (batch, d).
        """
        B, n = ids.shape
        if n > self.max_len:
            raise ValidationError(f"history of length {n} exceeds the maximum {self.max_len}")
        x = self.word_emb(ids) + self.pos_emb(np.arange(n)) + self.speaker_emb(speakers)
        x = T.dropout(x, self.p, self.rng, self.training)
        mask = None if key_mask is None else key_mask[:, None, :]
        for layer in self.layers:
            x = layer(x, mask)
        return x, x[:, 0]


def encode_history(encoder: DialogueEncoder, seq: HistorySequence, vocab) -> tuple[Tensor, Tensor]:
    """Encode one history; returns ``(H_enc [n x d], sum_rep [d])``."""
    ids = np.array([vocab.encode(seq.tokens)])
    speakers = np.array([seq.speakers])
    H, _ = encoder(ids, speakers)
    H = H[0]
    return H, H[0]
