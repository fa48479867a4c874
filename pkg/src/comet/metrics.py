"""Corpus BLEU-4 and micro-averaged Entity F1."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .errors import ValidationError


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus-level BLEU in [0, 100] with one reference per candidate.

    Clipped n-gram counts are pooled over the corpus and combined with
    uniform weights and the usual brevity penalty. Orders n >= 2 use add-one
    smoothing, ``(matches + 1) / (total + 1)``; unigram precision is left
    unsmoothed, so a corpus without any unigram overlap scores 0.
    """
    if len(candidates) != len(references):
        raise ValidationError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValidationError("BLEU of an empty corpus is undefined")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, rc[g]) for g, k in cc.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def _prf(tp: int, fp: int, fn: int) -> dict:
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "fp": fp, "fn": fn}


def entity_counts(pred: Sequence[str], gold: Sequence[str]) -> tuple[int, int, int]:
    """Multiset TP/FP/FN between predicted and gold entities of one response."""
    p, g = Counter(pred), Counter(gold)
    tp = sum((p & g).values())
    return tp, sum(p.values()) - tp, sum(g.values()) - tp


def entity_f1(
    predictions: Sequence[Sequence[str]],
    golds: Sequence[Sequence[str]],
    domains: Sequence[str] | None = None,
) -> dict:
    """Micro Entity F1 from global TP/FP/FN counts, overall and per domain.

    With no entities predicted and none expected, precision and recall are
    taken as 1.
    """
    if len(predictions) != len(golds):
        raise ValidationError(f"{len(predictions)} predictions but {len(golds)} gold sets")
    domains = list(domains) if domains is not None else [""] * len(golds)
    per: dict[str, list[int]] = {}
    total = [0, 0, 0]
    for pred, gold, dom in zip(predictions, golds, domains):
        counts = entity_counts(pred, gold)
        acc = per.setdefault(dom, [0, 0, 0])
        for i in range(3):
            acc[i] += counts[i]
            total[i] += counts[i]
    out = _prf(*total)
    out["per_domain"] = {d: _prf(*c) for d, c in sorted(per.items())}
    return out
