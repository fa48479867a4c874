"""
Dialogue corpus: data model, JSON I/O, vocabulary, splitting and a
deterministic synthetic generator.

Corpus JSON schema::

    {
      "version": 1,
      "domains": ["navigate", ...],
      "dialogues": [
        {
          "id": "nav-0001",
          "domain": "navigate",
          "kb": {"columns": ["poi", ...], "rows": [["Tom's house", ...], ...]},
          "turns": [
            {"speaker": "user", "text": "where does my friend live ?", "entities": []},
            {"speaker": "system", "text": "Tom's house is 6 miles away ...",
             "entities": [{"span": [0, 2], "column": "poi", "row": 1}, ...]}
          ]
        }
      ]
    }

``span`` is a half-open ``[start, end)`` range over the whitespace tokens of
``text``; ``row`` is optional (``null`` when unknown). Entity surfaces are
canonicalized (lower-cased, words joined by ``_``) when tokens are derived.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from .errors import ConfigError, ValidationError
from .kb import KnowledgeBase, canonicalize_entity

SCHEMA_VERSION = 1
SPEAKERS = ("user", "system")

PAD, UNK, SUM, EOS = "[PAD]", "[UNK]", "[SUM]", "[EOS]"
RESERVED = (PAD, UNK, SUM, EOS)


@dataclass(frozen=True)
class EntitySpan:
    start: int
    end: int
    column: str
    row: int | None = None


@dataclass(frozen=True)
class Mention:
    """An entity inside the canonical token list of a turn."""

    position: int
    token: str
    column: str
    row: int | None


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    entities: tuple[EntitySpan, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(sorted(self.entities, key=lambda e: e.start)))
        check_spans(self.entities, len(self.text.split()))

    @property
    def tokens(self) -> list[str]:
        return self._canonical()[0]

    @property
    def mentions(self) -> list[Mention]:
        return self._canonical()[1]

    def _canonical(self):
        raw = self.text.split()
        tokens, mentions = [], []
        i = 0
        for ent in self.entities:
            tokens.extend(w.lower() for w in raw[i : ent.start])
            surface = " ".join(raw[ent.start : ent.end])
            mentions.append(Mention(len(tokens), canonicalize_entity(surface), ent.column, ent.row))
            tokens.append(mentions[-1].token)
            i = ent.end
        tokens.extend(w.lower() for w in raw[i:])
        return tokens, mentions


def check_spans(entities: Sequence[EntitySpan], n_tokens: int) -> None:
    prev_end = 0
    for ent in sorted(entities, key=lambda e: e.start):
        if not 0 <= ent.start < ent.end <= n_tokens:
            raise ValidationError(f"entity span [{ent.start}, {ent.end}) outside a {n_tokens}-token utterance")
        if ent.start < prev_end:
            raise ValidationError(f"overlapping entity spans at token {ent.start}")
        prev_end = ent.end


@dataclass(frozen=True)
class Dialogue:
    id: str
    domain: str
    kb: KnowledgeBase
    turns: tuple[Turn, ...]

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValidationError(f"dialogue {self.id}: no turns")
        for i, turn in enumerate(self.turns):
            if turn.speaker != SPEAKERS[i % 2]:
                raise ValidationError(
                    f"dialogue {self.id}: turns[{i}].speaker is {turn.speaker!r}, expected {SPEAKERS[i % 2]!r}"
                )
            for k, ent in enumerate(turn.entities):
                if ent.row is None:
                    continue
                path = f"dialogue {self.id}: turns[{i}].entities[{k}]"
                if not 0 <= ent.row < self.kb.n_rows:
                    raise ValidationError(f"{path}.row {ent.row} outside KB with {self.kb.n_rows} rows")
                if ent.column not in self.kb.columns:
                    raise ValidationError(f"{path}.column {ent.column!r} not a KB column")
                cell = canonicalize_entity(self.kb.rows[ent.row][self.kb.columns.index(ent.column)])
                surface = canonicalize_entity(" ".join(turn.text.split()[ent.start : ent.end]))
                if cell != surface:
                    raise ValidationError(f"{path}: span {surface!r} does not match KB cell {cell!r}")

    def system_turn_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.turns) if t.speaker == "system"]

    def exchanges(self) -> Iterator[tuple[tuple[Turn, ...], Turn]]:
        """Yield ``(history, gold_response)`` for every system turn."""
        for i in self.system_turn_indices():
            yield self.turns[:i], self.turns[i]

    def out_of_kb_mentions(self) -> list[Mention]:
        cells = {canonicalize_entity(c) for row in self.kb.rows for c in row}
        return [m for t in self.turns for m in t.mentions if m.token not in cells]


@dataclass(frozen=True)
class Corpus:
    dialogues: tuple[Dialogue, ...]
    domains: tuple[str, ...] = ()
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "dialogues", tuple(self.dialogues))
        if not self.domains:
            object.__setattr__(self, "domains", tuple(sorted({d.domain for d in self.dialogues})))
        ids = [d.id for d in self.dialogues]
        if len(set(ids)) != len(ids):
            raise ValidationError("dialogue ids are not unique")

    def __len__(self) -> int:
        return len(self.dialogues)

    def __iter__(self):
        return iter(self.dialogues)

    def by_id(self, dialogue_id: str) -> Dialogue:
        for d in self.dialogues:
            if d.id == dialogue_id:
                return d
        raise KeyError(f"unknown dialogue id {dialogue_id!r}")

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus(tuple(self.dialogues[i] for i in indices), self.domains, self.version)

    def n_examples(self) -> int:
        return sum(len(d.system_turn_indices()) for d in self.dialogues)


# -- JSON I/O -------------------------------------------------------------


def dialogue_to_dict(d: Dialogue) -> dict:
    return {
        "id": d.id,
        "domain": d.domain,
        "kb": {"columns": list(d.kb.columns), "rows": [list(r) for r in d.kb.rows]},
        "turns": [
            {
                "speaker": t.speaker,
                "text": t.text,
                "entities": [
                    {"span": [e.start, e.end], "column": e.column, "row": e.row} for e in t.entities
                ],
            }
            for t in d.turns
        ],
    }


def corpus_to_dict(corpus: Corpus) -> dict:
    return {
        "version": corpus.version,
        "domains": list(corpus.domains),
        "dialogues": [dialogue_to_dict(d) for d in corpus.dialogues],
    }


def _require(obj, key, kind, path):
    if not isinstance(obj, dict) or key not in obj:
        raise ValidationError(f"{path}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise ValidationError(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}")
    return value


def turn_from_dict(tobj: dict, path: str = "turn") -> Turn:
    speaker = _require(tobj, "speaker", str, path)
    text = _require(tobj, "text", str, path)
    ents = []
    for m, eobj in enumerate(tobj.get("entities", []) or []):
        epath = f"{path}.entities[{m}]"
        span = _require(eobj, "span", list, epath)
        if len(span) != 2 or not all(isinstance(s, int) for s in span):
            raise ValidationError(f"{epath}.span: expected [start, end]")
        row = eobj.get("row")
        if row is not None and not isinstance(row, int):
            raise ValidationError(f"{epath}.row: expected integer or null")
        ents.append(EntitySpan(span[0], span[1], _require(eobj, "column", str, epath), row))
    try:
        return Turn(speaker, text, tuple(ents))
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def dialogue_from_dict(obj: dict, index: int = 0) -> Dialogue:
    path = f"dialogues[{index}]"
    did = str(_require(obj, "id", (str, int), path))
    path = f"dialogue {did}"
    domain = _require(obj, "domain", str, path)
    kbobj = _require(obj, "kb", dict, path)
    columns = _require(kbobj, "columns", list, f"{path}.kb")
    rows = _require(kbobj, "rows", list, f"{path}.kb")
    if not rows:
        raise ValidationError(f"{path}.kb.rows: KB has no rows")
    for i, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != len(columns):
            raise ValidationError(
                f"{path}.kb.rows[{i}]: ragged row with {len(row) if isinstance(row, list) else '?'} cells, "
                f"expected {len(columns)}"
            )
        for j, cell in enumerate(row):
            if not isinstance(cell, str) or not cell.strip():
                raise ValidationError(f"{path}.kb.rows[{i}][{j}]: cells must be nonempty strings")
    try:
        kb = KnowledgeBase(tuple(columns), tuple(tuple(r) for r in rows), domain)
    except ValidationError as exc:
        raise ValidationError(f"{path}.kb: {exc}") from None
    turns = [turn_from_dict(t, f"{path}.turns[{k}]") for k, t in enumerate(_require(obj, "turns", list, path))]
    return Dialogue(did, domain, kb, tuple(turns))


def corpus_from_dict(obj: dict) -> Corpus:
    if not isinstance(obj, dict):
        raise ValidationError("corpus: top level must be an object")
    version = obj.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"corpus: unsupported schema version {version!r}")
    dialogues = [dialogue_from_dict(d, i) for i, d in enumerate(_require(obj, "dialogues", list, "corpus"))]
    return Corpus(tuple(dialogues), tuple(obj.get("domains", ()) or ()), version)


def load_corpus(path) -> Corpus:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from None
    except FileNotFoundError:
        raise ValidationError(f"{path}: no such corpus file") from None
    return corpus_from_dict(obj)


def dumps_corpus(corpus: Corpus) -> str:
    return json.dumps(corpus_to_dict(corpus), indent=1, ensure_ascii=False) + "\n"


def save_corpus(corpus: Corpus, path) -> None:
    Path(path).write_text(dumps_corpus(corpus), encoding="utf-8")


# -- vocabulary -----------------------------------------------------------


def sketch_tag(column: str) -> str:
    return "@" + column


def is_sketch_tag(token: str) -> bool:
    return token.startswith("@") and len(token) > 1


@dataclass
class Vocabulary:
    """Word ids (reserved ids 0..3) plus a separate id space for column types."""

    tokens: list[str]
    columns: list[str] = field(default_factory=lambda: [UNK])

    def __post_init__(self):
        if tuple(self.tokens[: len(RESERVED)]) != RESERVED:
            raise ValidationError(f"vocabulary must start with the reserved tokens {RESERVED}")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValidationError("vocabulary tokens are not unique")
        self._col_index = {c: i for i, c in enumerate(self.columns)}

    pad_id, unk_id, sum_id, eos_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def token_id(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def column_id(self, column: str) -> int:
        return self._col_index.get(column, 0)

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @property
    def tags(self) -> list[str]:
        return [t for t in self.tokens if is_sketch_tag(t)]

    def is_tag_id(self, i: int) -> bool:
        return is_sketch_tag(self.tokens[i])

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "columns": list(self.columns)}

    @classmethod
    def from_dict(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["tokens"]), list(obj["columns"]))


def build_vocab(corpus: Corpus, min_count: int = 1) -> Vocabulary:
    """Utterance tokens, KB entity tokens and one ``@column`` tag per column.

    Tokens seen fewer than ``min_count`` times are left out (they map to UNK).
    """
    counts: Counter = Counter()
    columns = set()
    for d in corpus:
        columns.update(d.kb.columns)
        for row in d.kb.rows:
            counts.update(canonicalize_entity(c) for c in row)
        for t in d.turns:
            counts.update(t.tokens)
            columns.update(e.column for e in t.entities)
    tags = sorted(sketch_tag(c) for c in columns)
    words = sorted(t for t, n in counts.items() if n >= min_count and t not in RESERVED and t not in tags)
    return Vocabulary(list(RESERVED) + tags + words, [UNK] + sorted(columns))


# -- splitting ------------------------------------------------------------


def split(corpus: Corpus, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Corpus, Corpus, Corpus]:
    """Deterministic dialogue-level train/dev/test partition."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(corpus)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_train = int(round(fractions[0] * n))
    n_dev = min(int(round(fractions[1] * n)), n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_dev], order[n_train + n_dev :])
    return tuple(corpus.subset(sorted(p)) for p in parts)


# -- synthetic generator --------------------------------------------------

_POI_A = ["stanford", "philz", "tom's", "jill's", "valero", "teavana", "coupa", "midtown", "sigona's", "hacienda", "dish", "mandarin"]
_POI_B = ["house", "cafe", "express care", "gas", "garden", "market", "roots", "parking"]
_STREETS = ["el camino real", "van ness ave", "alester ave", "barringer street", "arastradero rd", "ames ct", "oak rd", "hillview st", "bryant st", "cowper st"]
_WEEKDAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]

POOLS = {
    "poi": [f"{a} {b}" for a in _POI_A for b in _POI_B],
    "poi_type": ["hospital", "friend's house", "coffee or tea place", "gas station", "grocery store", "parking garage", "rest stop", "chinese restaurant"],
    "traffic": ["no traffic", "moderate traffic", "heavy traffic"],
    "address": [f"{n} {s}" for n in (113, 214, 329, 434, 528, 580, 583, 611, 657, 792, 819, 865) for s in _STREETS],
    "distance": [f"{k} miles" for k in range(1, 10)],
    "event": ["yoga activity", "dentist appointment", "tennis activity", "doctor appointment", "conference", "lab appointment", "dinner", "swimming activity", "meeting", "optometrist appointment", "football activity", "taking medicine", "piano lesson", "car service"],
    "date": _WEEKDAYS,
    "time": ["9am", "10am", "11am", "1pm", "2pm", "3pm", "5pm", "7pm"],
    "party": ["alex", "ana", "jeff", "tom", "martha", "jon", "sister", "brother", "boss", "father"],
    "room": ["conference room 50", "conference room 100", "room 102", "main office", "lab 3"],
    "location": ["mountain view", "san francisco", "palo alto", "redwood city", "boston", "seattle", "new york", "cleveland", "durham", "fresno", "carson", "manhattan", "alhambra", "grand rapids"],
    "weekday": _WEEKDAYS,
    "weather": ["rain", "clear skies", "snow", "foggy", "windy", "cloudy", "hail", "overcast"],
    "temperature_low": [f"{t}f" for t in (20, 30, 40, 50)],
    "temperature_high": [f"{t}f" for t in (60, 70, 80, 90)],
}

DOMAINS = {
    "navigate": ["poi", "poi_type", "traffic", "address", "distance"],
    "schedule": ["event", "date", "time", "party", "room"],
    "weather": ["location", "weekday", "weather", "temperature_low", "temperature_high"],
}

_ASK = ["what is the {a} of {k} ?", "tell me the {a} of {k} .", "i need the {a} of {k} ."]
_ASK2 = ["what are the {a} and {b} of {k} ?", "tell me the {a} and {b} of {k} ."]
_FOLLOW = ["what about the {a} ?", "and the {a} ?"]


def _column_pool(column: str) -> list[str]:
    if column in POOLS:
        return POOLS[column]
    return [f"{column} value {i}" for i in range(12)]


def _domain_columns(domain: str, c: int) -> list[str]:
    base = DOMAINS[domain]
    extra = [f"{domain}_attr_{k}" for k in range(max(0, c - len(base)))]
    return (base + extra)[:c]


class _Utterance:
    """Accumulates whitespace tokens and entity spans."""

    def __init__(self):
        self.words: list[str] = []
        self.entities: list[EntitySpan] = []

    def text(self, s: str) -> "_Utterance":
        self.words.extend(s.split())
        return self

    def entity(self, surface: str, column: str, row: int) -> "_Utterance":
        start = len(self.words)
        self.words.extend(surface.split())
        self.entities.append(EntitySpan(start, len(self.words), column, row))
        return self

    def fill(self, template: str, slots: dict) -> "_Utterance":
        for piece in template.split():
            if piece.startswith("{") and piece.endswith("}"):
                value = slots[piece[1:-1]]
                if isinstance(value, tuple):
                    self.entity(*value)
                else:
                    self.text(value)
            else:
                self.text(piece)
        return self

    def turn(self, speaker: str) -> Turn:
        return Turn(speaker, " ".join(self.words), tuple(self.entities))


def _name(column: str) -> str:
    return column.replace("_", " ")


def generate_synthetic(
    seed: int = 0,
    n_dialogues: int = 100,
    r: int = 4,
    c: int = 5,
    n_domains: int = 1,
) -> Corpus:
    """Templated dialogues that each query one KB row by its key column.

    Every gold entity is annotated with the queried row. Non-key columns draw
    from small pools, so the same token often appears in several rows.
    """
    if n_dialogues < 1 or r < 1 or c < 2 or not 1 <= n_domains <= len(DOMAINS):
        raise ConfigError(
            f"need n_dialogues >= 1, r >= 1, c >= 2 and 1 <= n_domains <= {len(DOMAINS)}"
        )
    rng = random.Random(seed)
    domains = list(DOMAINS)[:n_domains]
    dialogues = []
    for n in range(n_dialogues):
        domain = domains[n % n_domains]
        columns = _domain_columns(domain, c)
        key = columns[0]
        if r > len(_column_pool(key)):
            raise ConfigError(f"r={r} exceeds the {len(_column_pool(key))} distinct keys of domain {domain}")
        keys = rng.sample(_column_pool(key), r)
        rows = [[k] + [rng.choice(_column_pool(col)) for col in columns[1:]] for k in keys]
        target = rng.randrange(r)
        row = rows[target]

        def slot(col):
            return (row[columns.index(col)], col, target)

        others = columns[1:]
        asked = rng.sample(others, min(len(others), rng.choice((1, 2))))
        user = _Utterance()
        system = _Utterance()
        if len(asked) == 1:
            user.fill(rng.choice(_ASK), {"a": _name(asked[0]), "k": slot(key)})
            system.fill("the {a} of {k} is {va} .", {"a": _name(asked[0]), "k": slot(key), "va": slot(asked[0])})
        else:
            a, b = asked
            user.fill(rng.choice(_ASK2), {"a": _name(a), "b": _name(b), "k": slot(key)})
            system.fill(
                "the {a} of {k} is {va} and the {b} is {vb} .",
                {"a": _name(a), "b": _name(b), "k": slot(key), "va": slot(a), "vb": slot(b)},
            )
        turns = [user.turn("user"), system.turn("system")]
        remaining = [col for col in others if col not in asked]
        if remaining and rng.random() < 0.5:
            follow = rng.choice(remaining)
            turns.append(_Utterance().fill(rng.choice(_FOLLOW), {"a": _name(follow)}).turn("user"))
            turns.append(_Utterance().fill("it is {v} .", {"v": slot(follow)}).turn("system"))
        kb = KnowledgeBase(tuple(columns), tuple(tuple(x) for x in rows), domain)
        dialogues.append(Dialogue(f"{domain}-{n:05d}", domain, kb, tuple(turns)))
    return Corpus(tuple(dialogues), tuple(domains))
