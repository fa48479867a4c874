"""
Label construction, the three-part objective and the training loop.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .corpus import Corpus, Mention, Turn, Vocabulary, build_vocab, check_spans, sketch_tag
from .errors import TrainingDiverged, ValidationError
from .kb import MemorySequence, flatten_kb
from .metrics import corpus_bleu, entity_f1
from .model import CometModel, ModelInput, collate, greedy_generate_batch, make_input
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


# -- labels ---------------------------------------------------------------


def row_match_counts(memory: MemorySequence, context_tokens: Iterable[str]) -> np.ndarray:
    """Number of distinct context entities found in each KB row."""
    context = set(context_tokens)
    counts = np.zeros(memory.n_rows, dtype=np.int64)
    for r in range(memory.n_rows):
        row_tokens = {e.token for e in memory if e.row == r}
        counts[r] = len(row_tokens & context)
    return counts


def build_link_targets(
    mentions: Sequence[Mention],
    memory: MemorySequence,
    context_tokens: Iterable[str],
) -> list[int | None]:
    """Distant-supervision link index for every gold entity mention.

    A mention links to a memory cell holding the same token, preferring cells
    in the annotated column. When several rows qualify, the row containing
    the most context entities wins, ties going to the lowest row. Mentions
    absent from the memory get ``None``.
    """
    counts = row_match_counts(memory, context_tokens)
    links: list[int | None] = []
    for m in mentions:
        candidates = memory.positions_of(m.token)
        same_col = [k for k in candidates if memory[k].column == m.column]
        candidates = same_col or candidates
        if not candidates:
            links.append(None)
            continue
        links.append(min(candidates, key=lambda k: (-counts[memory[k].row], memory[k].row, k)))
    return links


def delexicalize(response: Turn, memory: MemorySequence, links: Sequence[int | None]) -> tuple[list[str], list[int]]:
    """Replace each gold entity by ``@column`` of its linked cell.

    Unlinked mentions fall back to their annotated column. Returns the
    sketch tokens and the tag positions.
    """
    check_spans(response.entities, len(response.text.split()))
    tokens = list(response.tokens)
    mentions = response.mentions
    if len(links) != len(mentions):
        raise ValidationError(f"{len(links)} links for {len(mentions)} mentions")
    positions = []
    for m, k in zip(mentions, links):
        column = memory[k].column if k is not None else m.column
        tokens[m.position] = sketch_tag(column)
        positions.append(m.position)
    return tokens, positions


# -- examples -------------------------------------------------------------


@dataclass
class TrainingExample:
    input: ModelInput
    sketch: list[str]
    sketch_ids: np.ndarray
    tag_positions: list[int]
    links: list[int | None]
    gold_response: list[str]
    gold_entities: list[str]
    dialogue_id: str = ""
    domain: str = ""

    @property
    def linked(self) -> list[tuple[int, int]]:
        return [(t, k) for t, k in zip(self.tag_positions, self.links) if k is not None]


def make_examples(corpus: Corpus, vocab: Vocabulary, config: ModelConfig) -> list[TrainingExample]:
    """One example per system turn, with distant-supervision link labels."""
    out = []
    limit = config.max_response_len - 1
    for d in corpus:
        memory = flatten_kb(d.kb)
        for history, response in d.exchanges():
            context = [m.token for t in history for m in t.mentions]
            if config.match_response_entities:
                context += [m.token for m in response.mentions]
            links = build_link_targets(response.mentions, memory, context)
            for m, k in zip(response.mentions, links):
                if k is None:
                    log.info("dialogue %s: entity %r not in KB, excluded from the link loss", d.id, m.token)
            sketch, positions = delexicalize(response, memory, links)
            sketch = sketch[:limit]
            keep = [i for i, p in enumerate(positions) if p < limit]
            inp = make_input(history, memory, vocab, config.max_history_len)
            inp.domain = d.domain
            out.append(TrainingExample(
                input=inp,
                sketch=sketch,
                sketch_ids=np.array(vocab.encode(sketch), dtype=np.int64),
                tag_positions=[positions[i] for i in keep],
                links=[links[i] for i in keep],
                gold_response=list(response.tokens),
                gold_entities=[m.token for m in response.mentions],
                dialogue_id=d.id,
                domain=d.domain,
            ))
    return out


# -- objective ------------------------------------------------------------


def _column_norm_sum(P: Tensor, row_mask: np.ndarray | None) -> Tensor:
    """sum_i sqrt(sum_t P[..., t, i]^2) over the last two axes, per leading index."""
    p = P.data if row_mask is None else P.data * row_mask[..., None]
    norms = np.sqrt((p * p).sum(axis=-2))
    safe = np.where(norms > 0, norms, 1.0)

    def backward(g):
        grad = np.where(norms > 0, 1.0, 0.0)[..., None, :] * p / safe[..., None, :]
        if row_mask is not None:
            grad = grad * row_mask[..., None]
        return (np.asarray(g)[..., None, None] * grad,)

    return Tensor.from_op(norms.sum(axis=-1), (P,), backward)


def l21_regularizer(P: Tensor) -> Tensor:
    """L2,1 norm of a tag-position x entity probability matrix: the sum over
    entity columns of each column's Euclidean norm."""
    if P.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got shape {P.shape}")
    return _column_norm_sum(P, None)


def batched_l21(P: Tensor, row_mask: np.ndarray) -> Tensor:
    """Mean over the batch of the L2,1 norm of each example's tag rows."""
    return T.mean(_column_norm_sum(P, row_mask.astype(np.float64)))


@dataclass
class LossBreakdown:
    total: Tensor
    sketch_ce: float
    link_ce: float
    l21: float
    weights: tuple[float, float, float]
    n_tokens: int = 0
    n_links: int = 0

    def to_dict(self) -> dict:
        return {"total": float(self.total.data), "sketch_ce": self.sketch_ce, "link_ce": self.link_ce, "l21": self.l21}


def decoder_arrays(examples: Sequence[TrainingExample], vocab: Vocabulary):
    """Teacher-forcing inputs, sketch targets, link targets and tag-row mask."""
    B = len(examples)
    n = max(len(e.sketch_ids) for e in examples) + 1
    dec_in = np.full((B, n), vocab.pad_id, dtype=np.int64)
    targets = np.full((B, n), -1, dtype=np.int64)
    link_t = np.full((B, n), -1, dtype=np.int64)
    tag_rows = np.zeros((B, n), dtype=bool)
    for b, e in enumerate(examples):
        s = e.sketch_ids
        dec_in[b, 0] = vocab.eos_id
        dec_in[b, 1 : len(s) + 1] = s
        targets[b, : len(s)] = s
        targets[b, len(s)] = vocab.eos_id
        tag_rows[b, e.tag_positions] = True
        for t, k in e.linked:
            link_t[b, t] = k + 1
    return dec_in, targets, link_t, tag_rows


def compute_loss(examples: Sequence[TrainingExample], model: CometModel, config: ModelConfig | None = None,
                 training: bool | None = None) -> LossBreakdown:
    """Smoothed sketch CE + smoothed link CE over tag steps + L2,1 on tag rows."""
    config = config or model.config
    training = model.training if training is None else training
    vocab = model.vocab
    batch = collate(
        [e.input for e in examples],
        kb_mask_prob=config.kb_mask_prob if training else 0.0,
        rng=model.rng,
        unk_id=vocab.unk_id,
    )
    dec_in, targets, link_t, tag_rows = decoder_arrays(examples, vocab)
    out = model.forward(batch, dec_in)
    eps = config.label_smoothing
    sketch_ce = T.cross_entropy_smoothed(out.sketch_logits, targets, eps)
    valid = out.link_valid[:, None, :]
    link_ce = T.cross_entropy_smoothed(out.link_logits, link_t, eps if config.link_smoothing else 0.0, valid=valid)
    if tag_rows.any():
        P = T.softmax_masked(out.link_logits, valid)
        l21 = batched_l21(P, tag_rows)
    else:
        l21 = Tensor(0.0)
    w = (config.lambda_sketch, config.lambda_link, config.lambda_reg)
    total = sketch_ce * w[0] + link_ce * w[1] + l21 * w[2]
    return LossBreakdown(
        total=total,
        sketch_ce=float(sketch_ce.data),
        link_ce=float(link_ce.data),
        l21=float(l21.data),
        weights=w,
        n_tokens=int((targets >= 0).sum()),
        n_links=int((link_t >= 0).sum()),
    )


# -- evaluation -----------------------------------------------------------


def token_accuracy(model: CometModel, examples: Sequence[TrainingExample], batch_size: int = 32) -> float:
    """Teacher-forced argmax accuracy over sketch tokens (EOS included)."""
    correct = total = 0
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for i in range(0, len(examples), batch_size):
                chunk = examples[i : i + batch_size]
                batch = collate([e.input for e in chunk])
                dec_in, targets, _, _ = decoder_arrays(chunk, model.vocab)
                pred = model.forward(batch, dec_in).sketch_logits.data.argmax(axis=-1)
                used = targets >= 0
                correct += int((pred[used] == targets[used]).sum())
                total += int(used.sum())
    finally:
        model.train(was_training)
    return correct / max(total, 1)


def evaluate(model: CometModel, examples: Sequence[TrainingExample], batch_size: int = 32) -> dict:
    """Greedy-decode every example and score BLEU and micro Entity F1."""
    preds, golds, hyps, refs, domains = [], [], [], [], []
    generations = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        gens = greedy_generate_batch(model, [e.input for e in chunk])
        for e, g in zip(chunk, gens):
            generations.append(g)
            preds.append(g.entities)
            golds.append(e.gold_entities)
            hyps.append(g.response)
            refs.append(e.gold_response)
            domains.append(e.domain)
    f1 = entity_f1(preds, golds, domains)
    return {
        "bleu": corpus_bleu(hyps, refs) if examples else 0.0,
        "f1": f1["f1"],
        "per_domain": {d: v["f1"] for d, v in f1["per_domain"].items()},
        "n_examples": len(examples),
        "generations": generations,
    }


# -- training loop --------------------------------------------------------


@dataclass
class TrainResult:
    model: CometModel
    vocab: Vocabulary
    best_state: dict
    best_step: int
    best_dev_f1: float
    log: list[dict] = field(default_factory=list)
    final_loss: float = math.nan


def train(
    train_corpus: Corpus,
    config: ModelConfig,
    dev_corpus: Corpus | None = None,
    vocab: Vocabulary | None = None,
    log_path=None,
    on_eval=None,
) -> TrainResult:
    """Adam on shuffled minibatches; keeps the parameters with the best dev Entity F1.

    Deterministic given ``config.seed``. Raises :class:`TrainingDiverged`
    if the loss stops being finite.
    """
    vocab = vocab or build_vocab(train_corpus, config.min_count)
    model = CometModel(config, vocab)
    examples = make_examples(train_corpus, vocab, config)
    dev = make_examples(dev_corpus, vocab, config) if dev_corpus is not None and len(dev_corpus) else []
    if not examples:
        raise ValidationError("training corpus has no system turns")
    params = model.parameters()
    order_rng = random.Random(config.seed)
    records: list[dict] = []
    sink = open(log_path, "w") if log_path else None

    def emit(rec):
        records.append(rec)
        if sink:
            sink.write(json.dumps(rec) + "\n")

    best_state, best_step, best_f1 = model.state_dict(), 0, -1.0
    step = 0
    last = math.nan
    running = None
    try:
        model.train()
        while step < config.max_steps:
            order = list(range(len(examples)))
            order_rng.shuffle(order)
            for i in range(0, len(order), config.batch_size):
                chunk = [examples[j] for j in order[i : i + config.batch_size]]
                loss = compute_loss(chunk, model, config, training=True)
                last = float(loss.total.data)
                if not math.isfinite(last):
                    raise TrainingDiverged(
                        f"loss became {last} at step {step + 1} "
                        f"(sketch {loss.sketch_ce}, link {loss.link_ce}, l21 {loss.l21})"
                    )
                model.zero_grad()
                loss.total.backward()
                for p in params:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                T.clip_grad_norm(params, config.grad_clip)
                T.adam_step(params, config.learning_rate, config.adam_betas, config.adam_eps)
                step += 1
                running = last if running is None else 0.9 * running + 0.1 * last
                if step % config.log_every == 0:
                    emit({"step": step, "kind": "train", **loss.to_dict(), "ema": running})
                if step % config.eval_every == 0 or step == config.max_steps:
                    rec = {"step": step, "kind": "dev"}
                    if dev:
                        res = evaluate(model, dev)
                        rec.update(bleu=res["bleu"], f1=res["f1"], per_domain=res["per_domain"])
                        if res["f1"] > best_f1:
                            best_state, best_step, best_f1 = model.state_dict(), step, res["f1"]
                    else:
                        best_state, best_step = model.state_dict(), step
                    emit(rec)
                    if on_eval:
                        on_eval(step, model, rec)
                if step >= config.max_steps:
                    break
    finally:
        if sink:
            sink.close()
    model.load_state_dict(best_state)
    return TrainResult(model, vocab, best_state, best_step, best_f1, records, last)
