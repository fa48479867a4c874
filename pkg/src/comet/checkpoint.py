"""JSON checkpoints: config echo, seed, vocabulary and every parameter."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .corpus import Vocabulary
from .errors import CheckpointError, ConfigError, ShapeError
from .model import CometModel

FORMAT = "comet-checkpoint/1"


def checkpoint_dict(model: CometModel, extra: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "seed": model.config.seed,
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "params": {
            name: {"shape": list(p.shape), "data": p.data.ravel().tolist()}
            for name, p in model.named_parameters().items()
        },
        "extra": extra or {},
    }


def save_checkpoint(model: CometModel, path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, extra)))


def load_state(obj: dict) -> dict[str, np.ndarray]:
    state = {}
    for name, entry in obj["params"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {data.size} values do not fill shape {shape}")
        state[name] = data.reshape(shape)
    return state


def load_checkpoint(path, model: CometModel | None = None) -> CometModel:
    """Rebuild (or fill) a model from a checkpoint; shapes must match exactly."""
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if obj.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if model is None:
        try:
            config = ModelConfig.from_dict(obj["config"])
        except ConfigError as exc:
            raise CheckpointError(f"{path}: bad config echo ({exc})") from None
        model = CometModel(config, Vocabulary.from_dict(obj["vocab"]))
    try:
        model.load_state_dict(load_state(obj))
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from None
    return model
