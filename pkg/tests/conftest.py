import numpy as np
import pytest

from comet.config import ModelConfig
from comet.corpus import RESERVED, UNK, Corpus, Dialogue, EntitySpan, Turn, Vocabulary, build_vocab
from comet.kb import KnowledgeBase
from comet.model import CometModel

NAV_COLUMNS = ("poi", "poi_type", "traffic", "address", "distance")
NAV_ROWS = (
    ("Stanford Express Care", "hospital", "moderate", "214 El Camino Real", "2 miles"),
    ("Tom's house", "friend's house", "no", "580 Van Ness Ave", "6 miles"),
    ("Philz", "coffee or tea place", "no", "583 Alester Ave", "4 miles"),
    ("5672 Barringer Street", "certain address", "no", "5672 Barringer Street", "2 miles"),
)


def nav_kb() -> KnowledgeBase:
    return KnowledgeBase(NAV_COLUMNS, NAV_ROWS, "navigate")


def nav_dialogue() -> Dialogue:
    return Dialogue(
        "nav",
        "navigate",
        nav_kb(),
        (
            Turn("user", "Where does my friend live ?"),
            Turn(
                "system",
                "Tom's house is 6 miles away at 580 Van Ness Ave .",
                (EntitySpan(0, 2, "poi", 1), EntitySpan(3, 5, "distance", 1), EntitySpan(7, 11, "address", 1)),
            ),
            Turn("user", "Is that the fastest route ?"),
            Turn(
                "system",
                "I'll send the route with no traffic on your screen , drive carefully !",
                (EntitySpan(5, 6, "traffic"),),
            ),
        ),
    )


@pytest.fixture
def kb1():
    return nav_kb()


@pytest.fixture
def dialogue1():
    return nav_dialogue()


@pytest.fixture
def corpus1():
    return Corpus((nav_dialogue(),))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        batch_size=2, hidden_size=8, embedding_size=8, n_layer_dialogue_enc=1, n_layer_response_dec=1,
        n_layer_memory=1, n_head=2, ffn_size=16, dropout_prob=0.0, kb_mask_prob=0.0, mask_scheme="M",
        max_history_len=32, max_response_len=16, seed=3,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_vocab(words=("a", "b", "c", "d", "e"), columns=("x", "y", "z")) -> Vocabulary:
    tags = sorted("@" + c for c in columns)
    return Vocabulary(list(RESERVED) + tags + sorted(words), [UNK] + sorted(columns))


@pytest.fixture
def nav_model(corpus1):
    vocab = build_vocab(corpus1)
    return CometModel(tiny_config(), vocab)


ACCEPTANCE: list[str] = []


@pytest.fixture
def accept():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
