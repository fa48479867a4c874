"""
Knowledge-base data model, flattening into a memory sequence, and the
row-block memory mask.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError

_WS = re.compile(r"\s+")


def canonicalize_entity(surface: str) -> str:
    """Lower-case an entity and join its words with underscores.

    >>> canonicalize_entity("Stanford Exp")
    'stanford_exp'
    """
    if not isinstance(surface, str) or not surface.strip():
        raise ValidationError(f"entity surface must be a nonempty string, got {surface!r}")
    return _WS.sub("_", surface.strip().lower())


@dataclass(frozen=True)
class KnowledgeBase:
    columns: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    domain: str = ""

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        if len(set(self.columns)) != len(self.columns):
            raise ValidationError(f"duplicate column names in KB: {list(self.columns)}")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise ValidationError(
                    f"KB row {i} has {len(row)} cells but there are {len(self.columns)} columns"
                )

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    def permute_rows(self, order: Sequence[int]) -> "KnowledgeBase":
        return KnowledgeBase(self.columns, [self.rows[i] for i in order], self.domain)


@dataclass(frozen=True)
class MemoryEntry:
    token: str
    column: str
    row: int
    col: int


@dataclass(frozen=True)
class MemorySequence:
    entries: tuple[MemoryEntry, ...]
    n_rows: int
    n_cols: int

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, k: int) -> MemoryEntry:
        return self.entries[k]

    def __iter__(self):
        return iter(self.entries)

    @property
    def tokens(self) -> list[str]:
        return [e.token for e in self.entries]

    @property
    def columns(self) -> list[str]:
        return [e.column for e in self.entries]

    @property
    def row_index(self) -> np.ndarray:
        return np.array([e.row for e in self.entries], dtype=np.int64)

    def positions_of(self, token: str) -> list[int]:
        return [k for k, e in enumerate(self.entries) if e.token == token]


def flatten_kb(kb: KnowledgeBase) -> MemorySequence:
    """Flatten ``kb`` row-major; cell (i, j) lands at index ``i * c + j``."""
    if kb.n_rows == 0 or kb.n_cols == 0:
        raise ValidationError("cannot build a memory from an empty KB")
    entries = []
    for i, row in enumerate(kb.rows):
        if len(row) != kb.n_cols:
            raise ValidationError(f"KB row {i} has {len(row)} cells, expected {kb.n_cols}")
        for j, cell in enumerate(row):
            entries.append(MemoryEntry(canonicalize_entity(cell), kb.columns[j], i, j))
    return MemorySequence(tuple(entries), kb.n_rows, kb.n_cols)


@dataclass(frozen=True, eq=False)
class MemoryMask:
    """Boolean allow-matrix over ``[Sum.Rep] + memory`` positions.

    Index 0 is the summary slot; index ``k + 1`` is memory entry ``k``.
    """

    allowed: np.ndarray
    row_labels: tuple[str, ...] = field(default=())

    @property
    def size(self) -> int:
        return self.allowed.shape[0]

    def additive(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, -np.inf)

    def without_summary(self) -> np.ndarray:
        """The |M| x |M| row-block sub-mask used when the summary slot is dropped."""
        return self.allowed[1:, 1:].copy()

    def n_allowed(self) -> int:
        return int(self.allowed.sum())

    def render(self) -> str:
        """ASCII grid: ``#`` allowed, ``.`` blocked, with row/column labels."""
        labels = list(self.row_labels) or [str(i) for i in range(self.size)]
        width = max(len(s) for s in labels)
        header = " " * (width + 1) + "".join(str(j % 10) for j in range(self.size))
        lines = [header]
        for i in range(self.size):
            cells = "".join("#" if a else "." for a in self.allowed[i])
            lines.append(f"{labels[i]:>{width}} {cells}")
        return "\n".join(lines)


def build_memory_mask(seq: MemorySequence) -> MemoryMask:
    """Summary row/column fully allowed; memory entries see only their own KB row."""
    rows = seq.row_index
    n = len(rows)
    allowed = np.ones((n + 1, n + 1), dtype=bool)
    allowed[1:, 1:] = rows[:, None] == rows[None, :]
    allowed.setflags(write=False)
    labels = ["[SUM]"] + [f"r{e.row}:{e.column}" for e in seq]
    return MemoryMask(allowed, tuple(labels))


def full_mask(seq: MemorySequence) -> MemoryMask:
    allowed = np.ones((len(seq) + 1,) * 2, dtype=bool)
    allowed.setflags(write=False)
    return MemoryMask(allowed)


def embed_memory(seq: MemorySequence, vocab, word_emb, type_emb):
    """Entity embeddings ``word_emb[token] + type_emb[column]`` (no positions).

    Unknown tokens and columns fall back to the vocabulary's UNK entries.
    """
    word_ids = np.array([vocab.token_id(e.token) for e in seq], dtype=np.int64)
    type_ids = np.array([vocab.column_id(e.column) for e in seq], dtype=np.int64)
    return word_emb(word_ids) + type_emb(type_ids)
