"""Model and training hyperparameters, including the ablation switches."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .decoder import GATE_MODES
from .errors import ConfigError
from .memory import parse_scheme


@dataclass
class ModelConfig:
    # architecture (defaults are the SMD settings)
    batch_size: int = 32
    hidden_size: int = 512
    embedding_size: int = 512
    n_layer_dialogue_enc: int = 6
    n_layer_response_dec: int = 6
    n_layer_memory: int = 3
    n_head: int = 8
    ffn_size: int = 2048
    learning_rate: float = 1e-4
    kb_mask_prob: float = 0.2
    dropout_prob: float = 0.1
    max_history_len: int = 128
    max_response_len: int = 48

    # objective
    lambda_sketch: float = 1.0
    lambda_link: float = 1.0
    lambda_reg: float = 1.0
    label_smoothing: float = 0.1
    link_smoothing: bool = True

    # ablations
    mask_scheme: str = "MMM"
    sum_rep: bool = True
    gate_mode: str = "gated"
    share_embeddings: bool = True
    tie_output: bool = False
    match_response_entities: bool = True

    # optimisation and bookkeeping
    seed: int = 0
    max_steps: int = 2000
    eval_every: int = 200
    log_every: int = 20
    grad_clip: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    min_count: int = 1
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    init: dict = field(default_factory=lambda: {"embedding": "uniform(-0.1, 0.1)", "linear": "xavier_uniform"})

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.split = tuple(self.split)
        self.validate()

    def validate(self) -> None:
        if self.hidden_size != self.embedding_size:
            raise ConfigError("hidden_size and embedding_size must be equal")
        if self.hidden_size % self.n_head:
            raise ConfigError(f"hidden_size {self.hidden_size} is not divisible by n_head {self.n_head}")
        for name in ("batch_size", "hidden_size", "n_layer_dialogue_enc", "n_layer_response_dec",
                     "n_layer_memory", "n_head", "ffn_size", "max_history_len", "max_response_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("kb_mask_prob", "dropout_prob", "label_smoothing"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if min(self.lambda_sketch, self.lambda_link, self.lambda_reg) < 0:
            raise ConfigError("loss weights must be nonnegative")
        parse_scheme(self.mask_scheme, self.n_layer_memory)
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}")

    @property
    def d_model(self) -> int:
        return self.hidden_size

    def replace(self, **changes) -> "ModelConfig":
        try:
            return dataclasses.replace(self, **changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["adam_betas"] = list(self.adam_betas)
        out["split"] = list(self.split)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_dict(obj)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    # presets

    @classmethod
    def smd(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def multiwoz(cls, **kw) -> "ModelConfig":
        return cls(**{"batch_size": 16, "kb_mask_prob": 0.05, **kw})

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        """Small CPU configuration used by the test-suite learning runs."""
        base = dict(
            batch_size=8, hidden_size=64, embedding_size=64, n_layer_dialogue_enc=2,
            n_layer_response_dec=2, n_layer_memory=2, n_head=4, ffn_size=128,
            mask_scheme="MM", max_history_len=64, max_response_len=24,
        )
        base.update(kw)
        return cls(**base)
