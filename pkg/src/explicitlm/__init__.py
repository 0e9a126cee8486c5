"""ExplicitLM: a small transformer LM reading from an explicit, human-readable memory bank."""

from .bank import MemoryBank, build_bank, load_bank, save_bank
from .corpus import Vocab, build_vocab, generate_kg, make_splits
from .model import ExplicitLM, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "ExplicitLM",
    "MemoryBank",
    "ModelConfig",
    "Vocab",
    "build_bank",
    "build_vocab",
    "generate_kg",
    "load_bank",
    "make_splits",
    "save_bank",
]
