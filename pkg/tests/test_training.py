import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import comet.training as training_module
from comet.corpus import Corpus, EntitySpan, Mention, Turn, build_vocab, generate_synthetic
from comet.errors import ConfigError, TrainingDiverged, ValidationError
from comet.kb import KnowledgeBase, flatten_kb
from comet.model import CometModel, collate, kb_entity_dropout, make_input
from comet.tensor import Tensor
from comet.training import (
    batched_l21,
    build_link_targets,
    compute_loss,
    delexicalize,
    l21_regularizer,
    make_examples,
    token_accuracy,
    train,
)
from conftest import tiny_config
from oracles import fd_grad, l21_oracle, link_oracle, rel_err


def mention(token, column):
    return Mention(0, token, column, None)


class TestDistantSupervision:
    def test_nav_no_traffic(self, kb1):
        memory = flatten_kb(kb1)
        history = ["tom's_house", "6_miles", "580_van_ness_ave"]
        assert build_link_targets([mention("no", "traffic")], memory, history + ["no"]) == [7]
        assert build_link_targets([mention("no", "traffic")], memory, history) == [7]

    def test_unique_entity_ignores_context(self, kb1):
        memory = flatten_kb(kb1)
        assert build_link_targets([mention("philz", "poi")], memory, ["tom's_house", "6_miles"]) == [10]

    def test_tie_goes_to_lowest_row(self, kb1):
        memory = flatten_kb(kb1)
        assert build_link_targets([mention("no", "traffic")], memory, []) == [7]
        assert build_link_targets([mention("2_miles", "distance")], memory, ["2_miles"]) == [4]

    def test_column_preference(self, kb1):
        memory = flatten_kb(kb1)
        street = "5672_barringer_street"
        assert build_link_targets([mention(street, "address")], memory, []) == [18]
        assert build_link_targets([mention(street, "poi")], memory, []) == [15]

    def test_absent_entity(self, kb1):
        assert build_link_targets([mention("mars", "poi")], flatten_kb(kb1), []) == [None]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            r, c = rng.integers(2, 6), rng.integers(2, 5)
            cols = tuple(f"k{j}" for j in range(c))
            rows = [[f"t{rng.integers(0, 4)}" for _ in range(c)] for _ in range(r)]
            kb = KnowledgeBase(cols, rows)
            context = [f"t{i}" for i in rng.integers(0, 6, size=rng.integers(0, 5))]
            ments = [(f"t{rng.integers(0, 5)}", cols[rng.integers(0, c)]) for _ in range(3)]
            got = build_link_targets([mention(t, col) for t, col in ments], flatten_kb(kb), context)
            assert got == link_oracle(ments, rows, cols, context)


class TestDelexicalize:
    def test_worked_sentence(self, kb1):
        turn = Turn("system", "Tom's house is 6 miles away at 580 Van Ness Ave .",
                    (EntitySpan(0, 2, "poi", 1), EntitySpan(3, 5, "distance", 1), EntitySpan(7, 11, "address", 1)))
        memory = flatten_kb(kb1)
        links = build_link_targets(turn.mentions, memory, [m.token for m in turn.mentions])
        sketch, positions = delexicalize(turn, memory, links)
        assert " ".join(sketch) == "@poi is @distance away at @address ."
        assert positions == [0, 2, 5]

    def test_no_entities(self, kb1):
        turn = Turn("system", "have a nice day")
        assert delexicalize(turn, flatten_kb(kb1), []) == (["have", "a", "nice", "day"], [])

    def test_two_entities_same_column(self, kb1):
        turn = Turn("system", "philz or tom's house", (EntitySpan(0, 1, "poi"), EntitySpan(2, 4, "poi")))
        memory = flatten_kb(kb1)
        sketch, positions = delexicalize(turn, memory, build_link_targets(turn.mentions, memory, []))
        assert sketch == ["@poi", "or", "@poi"] and positions == [0, 2]

    def test_unlinked_falls_back_to_annotation(self, kb1):
        turn = Turn("system", "try mars", (EntitySpan(1, 2, "poi"),))
        assert delexicalize(turn, flatten_kb(kb1), [None])[0] == ["try", "@poi"]

    def test_overlapping_spans(self):
        with pytest.raises(ValidationError):
            Turn("system", "a b c", (EntitySpan(0, 2, "x"), EntitySpan(1, 3, "y")))


class TestMakeExamples:
    def test_nav_example(self, corpus1):
        vocab = build_vocab(corpus1)
        ex = make_examples(corpus1, vocab, tiny_config())
        assert len(ex) == 2
        assert ex[1].sketch[5] == "@traffic" and ex[1].links == [7]
        assert ex[0].links == [5, 9, 8]
        assert ex[0].gold_entities == ["tom's_house", "6_miles", "580_van_ness_ave"]
        assert ex[1].input.history.tokens[-1] == "?"

    def test_sketch_tags_in_vocab(self):
        corpus = generate_synthetic(3, 40, 3, 4, 3)
        vocab = build_vocab(corpus)
        for e in make_examples(corpus, vocab, tiny_config()):
            assert all(t in vocab for t in e.sketch if t.startswith("@"))


class TestL21:
    def test_identity(self):
        assert l21_regularizer(Tensor(np.eye(2))).item() == 2.0

    def test_uniform(self):
        assert l21_regularizer(Tensor(np.full((2, 2), 0.5))).item() == pytest.approx(math.sqrt(2), rel=1e-15)

    def test_oracle(self, rng):
        for _ in range(20):
            P = rng.dirichlet(np.ones(7), size=4)
            assert abs(l21_regularizer(Tensor(P)).item() - l21_oracle(P.tolist())) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_bounds(self, t, m, seed):
        P = np.random.default_rng(seed).dirichlet(np.ones(m), size=t)
        value = l21_regularizer(Tensor(P)).item()
        assert math.sqrt(t) - 1e-12 <= value <= t + 1e-12

    def test_lower_bound_attained(self):
        P = np.zeros((4, 3))
        P[:, 1] = 1.0
        assert l21_regularizer(Tensor(P)).item() == pytest.approx(2.0)

    def test_gradient_with_zero_column(self, rng):
        P = rng.dirichlet(np.ones(4), size=3)
        P[:, 2] = 0.0
        x = Tensor(P, requires_grad=True)
        l21_regularizer(x).backward()
        assert np.all(np.isfinite(x.grad)) and np.all(x.grad[:, 2] == 0.0)
        keep = [0, 1, 3]
        num = fd_grad(lambda: l21_regularizer(Tensor(P)).item(), P)
        assert rel_err(x.grad[:, keep], num[:, keep]) <= 1e-6

    def test_batched_masks_rows(self, rng):
        P = rng.dirichlet(np.ones(5), size=(2, 4))
        rows = np.array([[True, False, True, False], [False] * 3 + [True]])
        want = (l21_oracle(P[0][[0, 2]].tolist()) + l21_oracle(P[1][[3]].tolist())) / 2
        assert batched_l21(Tensor(P), rows).item() == pytest.approx(want, rel=1e-14)

    def test_rejects_non_matrix(self):
        with pytest.raises(ValidationError):
            l21_regularizer(Tensor(np.ones(3)))


class TestKbEntityDropout:
    def test_zero_is_identity(self, rng):
        ids = np.arange(10)
        assert kb_entity_dropout(ids, 0.0, rng, 1) is ids

    @pytest.mark.parametrize("p", [1.0, -0.2])
    def test_range(self, p, rng):
        with pytest.raises(ConfigError):
            kb_entity_dropout(np.arange(3), p, rng, 1)

    def test_rate_and_types_kept(self, kb1, corpus1):
        vocab = build_vocab(corpus1)
        inp = make_input(["hi"], kb1, vocab)
        hits = 0
        rng = np.random.default_rng(0)
        for _ in range(500):
            b = collate([inp], kb_mask_prob=0.2, rng=rng, unk_id=vocab.unk_id)
            changed = b.mem_word[0] != inp.mem_word_ids
            assert np.all(b.mem_word[0][changed] == vocab.unk_id)
            assert np.array_equal(b.mem_type[0], inp.mem_type_ids)
            hits += changed.sum()
        assert hits / (500 * 20) == pytest.approx(0.2, abs=0.02)


@pytest.fixture
def nav_examples(corpus1):
    vocab = build_vocab(corpus1)
    return make_examples(corpus1, vocab, tiny_config()), vocab


class TestComputeLoss:
    def test_breakdown(self, nav_examples):
        ex, vocab = nav_examples
        model = CometModel(tiny_config(lambda_sketch=0.5, lambda_link=2.0, lambda_reg=0.3), vocab)
        loss = compute_loss(ex, model)
        want = 0.5 * loss.sketch_ce + 2.0 * loss.link_ce + 0.3 * loss.l21
        assert loss.total.item() == pytest.approx(want, rel=1e-14)
        assert min(loss.sketch_ce, loss.link_ce, loss.l21) > 0
        assert loss.n_links == 4

    def test_without_regularizer(self, nav_examples):
        ex, vocab = nav_examples
        model = CometModel(tiny_config(lambda_reg=0.0), vocab)
        loss = compute_loss(ex, model)
        assert loss.total.item() == pytest.approx(loss.sketch_ce + loss.link_ce, rel=1e-14)

    def test_empty_tag_set(self, nav_examples):
        ex, vocab = nav_examples
        e = ex[0]
        e.tag_positions, e.links = [], []
        loss = compute_loss([e], CometModel(tiny_config(), vocab))
        assert loss.link_ce == 0.0 and loss.l21 == 0.0 and loss.total.item() > 0

    def test_gradient_fd(self, nav_examples):
        ex, vocab = nav_examples
        model = CometModel(tiny_config(n_layer_memory=2, mask_scheme="MF"), vocab)
        model.zero_grad()
        compute_loss(ex, model).total.backward()
        for name in ["type_emb.weight", "memory.layers.1.attn.q_proj.weight", "decoder.layers.0.gate.weight",
                     "decoder.out.bias", "encoder.pos_emb.weight"]:
            p = model.named_parameters()[name]
            num = fd_grad(lambda: compute_loss(ex, model).total.item(), p.data)
            assert rel_err(p.grad, num) <= 1e-4, name

    def test_batch_padding_is_neutral(self):
        corpus = generate_synthetic(5, 6, 2, 3)
        vocab = build_vocab(corpus)
        model = CometModel(tiny_config(), vocab).eval()
        ex = make_examples(corpus, vocab, tiny_config())[:3]
        both = collate([e.input for e in ex])
        full = model.context(both)[2].data
        for b, e in enumerate(ex):
            alone = model.context(collate([e.input]))[2].data[0]
            n = len(e.input.memory) + 1
            np.testing.assert_allclose(full[b, :n], alone, rtol=0, atol=1e-12)


class TestTrainLoop:
    @pytest.fixture
    def small(self):
        corpus = generate_synthetic(2, 12, 2, 3)
        return corpus.subset(range(10)), corpus.subset(range(10, 12))

    def test_deterministic_and_logged(self, small, tmp_path):
        tr, dv = small
        cfg = tiny_config(max_steps=12, eval_every=6, log_every=3, learning_rate=1e-2, dropout_prob=0.1,
                          kb_mask_prob=0.1)
        a = train(tr, cfg, dv, log_path=tmp_path / "a.jsonl")
        b = train(tr, cfg, dv, log_path=tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert a.final_loss == b.final_loss
        recs = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert [r["step"] for r in recs if r["kind"] == "dev"] == [6, 12]
        assert {"total", "sketch_ce", "link_ce", "l21"} <= set(recs[0])
        assert a.best_step in (6, 12)

    def test_divergence(self, small, monkeypatch):
        real = training_module.compute_loss

        def broken(*args, **kw):
            out = real(*args, **kw)
            out.total = out.total * math.nan
            return out

        monkeypatch.setattr(training_module, "compute_loss", broken)
        with pytest.raises(TrainingDiverged, match="step 1"):
            train(small[0], tiny_config(max_steps=3))

    def test_loss_decreases(self, small):
        tr, _ = small
        cfg = tiny_config(max_steps=40, log_every=10, eval_every=1000, learning_rate=1e-2)
        res = train(tr, cfg)
        ema = [r["ema"] for r in res.log if r["kind"] == "train"]
        assert ema[-1] < ema[0]
        assert 0.0 <= token_accuracy(res.model, make_examples(tr, res.vocab, cfg)) <= 1.0

    def test_empty_training_set(self):
        with pytest.raises(ValidationError):
            train(Corpus(()), tiny_config(max_steps=1))
