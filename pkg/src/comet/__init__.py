"""Memory-masked transformer for knowledge-base grounded task-oriented dialogue."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .corpus import (
    Corpus,
    Dialogue,
    EntitySpan,
    Turn,
    Vocabulary,
    build_vocab,
    generate_synthetic,
    load_corpus,
    save_corpus,
    split,
)
from .errors import (
    CheckpointError,
    CometError,
    ConfigError,
    InvalidMaskError,
    ShapeError,
    StateError,
    TrainingDiverged,
    ValidationError,
)
from .kb import KnowledgeBase, MemoryMask, MemorySequence, build_memory_mask, canonicalize_entity, flatten_kb, full_mask
from .metrics import corpus_bleu, entity_f1
from .model import CometModel, Generation, greedy_generate, greedy_generate_batch, make_input
from .training import build_link_targets, delexicalize, evaluate, l21_regularizer, make_examples, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "CometError", "CometModel", "ConfigError", "Corpus", "Dialogue", "EntitySpan",
    "Generation", "InvalidMaskError", "KnowledgeBase", "MemoryMask", "MemorySequence", "ModelConfig",
    "ShapeError", "StateError", "TrainingDiverged", "Turn", "ValidationError", "Vocabulary",
    "build_link_targets", "build_memory_mask", "build_vocab", "canonicalize_entity", "corpus_bleu",
    "delexicalize", "entity_f1", "evaluate", "flatten_kb", "full_mask", "generate_synthetic",
    "greedy_generate", "greedy_generate_batch", "l21_regularizer", "load_checkpoint", "load_corpus",
    "make_examples", "make_input", "save_checkpoint", "save_corpus", "split", "train",
]
