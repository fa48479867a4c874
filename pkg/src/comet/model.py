"""
The full model: history encoder, context-aware memory, sketch decoder and
entity linker, plus batch collation and greedy generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .corpus import Vocabulary, is_sketch_tag
from .errors import ConfigError
from .decoder import ResponseDecoder, link_logits
from .encoder import DialogueEncoder, HistorySequence, build_history
from .kb import KnowledgeBase, MemorySequence, flatten_kb
from .memory import MemoryEncoder
from .nn import Embedding, Module
from .tensor import Tensor, no_grad


@dataclass
class ModelInput:
    """One encoded (history, KB) pair."""

    history: HistorySequence
    memory: MemorySequence
    history_ids: np.ndarray
    speakers: np.ndarray
    mem_word_ids: np.ndarray
    mem_type_ids: np.ndarray
    domain: str = ""


def make_input(turns: Sequence, kb: KnowledgeBase | MemorySequence, vocab: Vocabulary,
               max_history_len: int | None = None) -> ModelInput:
    history = build_history(turns, max_history_len)
    memory = kb if isinstance(kb, MemorySequence) else flatten_kb(kb)
    return ModelInput(
        history=history,
        memory=memory,
        history_ids=np.array(vocab.encode(history.tokens), dtype=np.int64),
        speakers=np.array(history.speakers, dtype=np.int64),
        mem_word_ids=np.array(vocab.encode(memory.tokens), dtype=np.int64),
        mem_type_ids=np.array([vocab.column_id(c) for c in memory.columns], dtype=np.int64),
        domain=getattr(kb, "domain", ""),
    )


def kb_entity_dropout(word_ids: np.ndarray, prob: float, rng: np.random.Generator, unk_id: int) -> np.ndarray:
    """Replace each memory word id by UNK independently with probability ``prob``.

    Only the word component is affected; type ids are left alone by callers.
    """
    if not 0.0 <= prob < 1.0:
        raise ConfigError(f"KB mask probability must lie in [0, 1), got {prob}")
    if prob == 0.0:
        return word_ids
    hit = rng.random(word_ids.shape) < prob
    return np.where(hit, unk_id, word_ids)


@dataclass
class Batch:
    hist_ids: np.ndarray          # (B, n)
    speakers: np.ndarray          # (B, n)
    hist_real: np.ndarray         # (B, n) bool
    mem_word: np.ndarray          # (B, M)
    mem_type: np.ndarray          # (B, M)
    mem_real: np.ndarray          # (B, M) bool
    mem_rows: np.ndarray          # (B, M) row index, -1 for padding
    inputs: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.hist_ids.shape[0]

    def memory_masks(self, with_summary: bool) -> tuple[np.ndarray, np.ndarray]:
        """Padded (masked, full) allow-masks for the memory encoder.

        With the summary slot the masks are (B, M+1, M+1) and index 0 is the
        slot. Padding keys are always blocked; padding queries see only the
        summary slot (or themselves when there is no slot) so rows stay valid.
        """
        real, rows = self.mem_real, self.mem_rows
        B, M = real.shape
        pair_real = real[:, :, None] & real[:, None, :]
        same_row = pair_real & (rows[:, :, None] == rows[:, None, :])
        if not with_summary:
            eye = np.broadcast_to(np.eye(M, dtype=bool), (B, M, M))
            pad_self = eye & ~real[:, :, None]
            return same_row | pad_self, pair_real | pad_self
        L = M + 1
        masked = np.zeros((B, L, L), dtype=bool)
        full = np.zeros((B, L, L), dtype=bool)
        for m in (masked, full):
            m[:, :, 0] = True
            m[:, 0, 1:] = real
        masked[:, 1:, 1:] = same_row
        full[:, 1:, 1:] = pair_real
        return masked, full

    def link_valid(self) -> np.ndarray:
        """(B, M+1) mask of linkable memory slots; slot 0 and padding excluded."""
        return np.concatenate([np.zeros((self.size, 1), dtype=bool), self.mem_real], axis=1)


def _pad(seqs: Sequence[np.ndarray], value: int) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def collate(inputs: Sequence[ModelInput], kb_mask_prob: float = 0.0, rng: np.random.Generator | None = None,
            unk_id: int = 1, pad_id: int = 0) -> Batch:
    mem_word = [x.mem_word_ids for x in inputs]
    if kb_mask_prob > 0.0:
        mem_word = [kb_entity_dropout(w, kb_mask_prob, rng, unk_id) for w in mem_word]
    hist = [x.history_ids for x in inputs]
    return Batch(
        hist_ids=_pad(hist, pad_id),
        speakers=_pad([x.speakers for x in inputs], 0),
        hist_real=_pad([np.ones(len(h), dtype=np.int64) for h in hist], 0).astype(bool),
        mem_word=_pad(mem_word, pad_id),
        mem_type=_pad([x.mem_type_ids for x in inputs], 0),
        mem_real=_pad([np.ones(len(w), dtype=np.int64) for w in mem_word], 0).astype(bool),
        mem_rows=_pad([x.memory.row_index for x in inputs], -1),
        inputs=list(inputs),
    )


@dataclass
class ForwardOutput:
    H_enc: Tensor
    sum_rep: Tensor
    E_K: Tensor
    H_dec: Tensor
    sketch_logits: Tensor
    link_logits: Tensor
    link_valid: np.ndarray


class CometModel(Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        init = np.random.default_rng(config.seed)
        d = config.d_model
        self.word_emb = Embedding(len(vocab), d, init)
        self.mem_word_emb = self.word_emb if config.share_embeddings else Embedding(len(vocab), d, init)
        self.type_emb = Embedding(vocab.n_columns, d, init)
        self.encoder = DialogueEncoder(
            self.word_emb, d, config.n_layer_dialogue_enc, config.n_head, config.ffn_size,
            config.dropout_prob, config.max_history_len, init,
        )
        self.memory = MemoryEncoder(
            d, config.n_layer_memory, config.n_head, config.ffn_size, config.dropout_prob,
            config.mask_scheme, init,
        )
        self.decoder = ResponseDecoder(
            self.word_emb, len(vocab), d, config.n_layer_response_dec, config.n_head, config.ffn_size,
            config.dropout_prob, config.max_response_len, config.gate_mode, config.tie_output, init,
        )
        # dropout and KB masking draw from their own stream
        self.rng = np.random.default_rng([config.seed, 1])
        for m in self.modules():
            if "rng" in vars(m):
                m.rng = self.rng
        for name, p in self.named_parameters().items():
            p.name = name

    # -- pieces -----------------------------------------------------------

    def encode(self, batch: Batch) -> tuple[Tensor, Tensor]:
        return self.encoder(batch.hist_ids, batch.speakers, batch.hist_real)

    def entity_embeddings(self, batch: Batch) -> Tensor:
        return self.mem_word_emb(batch.mem_word) + self.type_emb(batch.mem_type)

    def generate_memory(self, batch: Batch, sum_rep: Tensor) -> Tensor:
        """Padded ``E_K`` of shape (B, M+1, d); row 0 is the summary slot.

        Without the summary input the slot is a zero row that the decoder
        and the linker never attend to.
        """
        E = self.entity_embeddings(batch)
        B, M, d = E.shape
        masked, full = batch.memory_masks(self.config.sum_rep)
        if self.config.sum_rep:
            x = T.concat([sum_rep.reshape(B, 1, d), E], axis=1)
            return self.memory(x, masked, full)
        out = self.memory(E, masked, full)
        return T.concat([T.Tensor(np.zeros((B, 1, d))), out], axis=1)

    def memory_key_mask(self, batch: Batch) -> np.ndarray:
        keys = np.concatenate([np.full((batch.size, 1), self.config.sum_rep), batch.mem_real], axis=1)
        return keys[:, None, :]

    def context(self, batch: Batch):
        H_enc, sum_rep = self.encode(batch)
        E_K = self.generate_memory(batch, sum_rep)
        return H_enc, sum_rep, E_K

    def decode(self, batch: Batch, dec_ids: np.ndarray, H_enc: Tensor, E_K: Tensor) -> Tensor:
        return self.decoder(dec_ids, H_enc, batch.hist_real[:, None, :], E_K, self.memory_key_mask(batch))

    def forward(self, batch: Batch, dec_ids: np.ndarray) -> ForwardOutput:
        H_enc, sum_rep, E_K = self.context(batch)
        H_dec = self.decode(batch, dec_ids, H_enc, E_K)
        return ForwardOutput(
            H_enc=H_enc,
            sum_rep=sum_rep,
            E_K=E_K,
            H_dec=H_dec,
            sketch_logits=self.decoder.sketch_logits(H_dec),
            link_logits=link_logits(H_dec, E_K),
            link_valid=batch.link_valid(),
        )

    __call__ = forward


@dataclass
class Generation:
    sketch: list[str]
    response: list[str]
    links: list[dict]
    gates: list[list[float]]

    @property
    def entities(self) -> list[str]:
        return [link["entity"] for link in self.links]

    def to_dict(self) -> dict:
        return {
            "sketch": " ".join(self.sketch),
            "response": " ".join(self.response),
            "links": self.links,
            "gates": self.gates,
        }


def lexicalize(sketch: Sequence[str], links: dict[int, str]) -> list[str]:
    """Substitute linked entity tokens at tag positions."""
    return [links.get(i, tok) for i, tok in enumerate(sketch)]


def greedy_generate_batch(model: CometModel, inputs: Sequence[ModelInput], max_len: int | None = None) -> list[Generation]:
    """Argmax decoding; each emitted ``@tag`` is linked at the step that emits it.

    The decoder is recomputed over the whole prefix at every step, so the
    states match a teacher-forced pass exactly.
    """
    vocab = model.vocab
    max_len = min(max_len or model.config.max_response_len, model.config.max_response_len)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            batch = collate(inputs)
            H_enc, _, E_K = model.context(batch)
            valid = batch.link_valid()
            B = batch.size
            dec = np.full((B, 1), vocab.eos_id, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            sketches = [[] for _ in range(B)]
            links = [[] for _ in range(B)]
            gates = [[] for _ in range(B)]
            banned = np.array([vocab.pad_id, vocab.sum_id])
            for t in range(max_len):
                model.decoder.record(True)
                H = model.decode(batch, dec, H_enc, E_K)
                model.decoder.record(False)
                h_last = H[:, -1:, :]
                logits = model.decoder.sketch_logits(h_last).data[:, 0]
                logits[:, banned] = -np.inf
                next_ids = logits.argmax(axis=-1)
                scores = link_logits(h_last, E_K).data[:, 0]
                scores = np.where(valid, scores, -np.inf)
                choice = scores.argmax(axis=-1)
                layer_gates = [g[:, -1] for g in model.decoder.gates()]
                for b in range(B):
                    if done[b]:
                        continue
                    tok_id = int(next_ids[b])
                    if tok_id == vocab.eos_id:
                        done[b] = True
                        continue
                    tok = vocab.tokens[tok_id]
                    gates[b].append([float(g[b]) for g in layer_gates])
                    if is_sketch_tag(tok):
                        k = int(choice[b]) - 1
                        entry = inputs[b].memory[k]
                        links[b].append({"position": t, "tag": tok, "index": k, "entity": entry.token,
                                         "column": entry.column, "row": entry.row})
                    sketches[b].append(tok)
                if done.all():
                    break
                dec = np.concatenate([dec, next_ids[:, None]], axis=1)
    finally:
        model.train(was_training)
    out = []
    for b in range(B):
        by_pos = {link["position"]: link["entity"] for link in links[b]}
        out.append(Generation(sketches[b], lexicalize(sketches[b], by_pos), links[b], gates[b]))
    return out


def greedy_generate(model: CometModel, history: Sequence, kb: KnowledgeBase, max_len: int | None = None) -> Generation:
    inp = make_input(history, kb, model.vocab, model.config.max_history_len)
    return greedy_generate_batch(model, [inp], max_len)[0]
