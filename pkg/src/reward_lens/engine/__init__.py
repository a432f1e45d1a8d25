"""Minimal decoder-only reward-model engine."""
from .adapters import (
    ModelAdapter,
    MultiObjectiveAdapter,
    ScalarHeadAdapter,
    get_adapter,
)
from .builders import PlantedCircuit, build_length_model, build_planted_model, build_seeded_model
from .config import BOS, SEP, TransformerConfig, default_vocab, full_vocab_size
from .model import (
    ActivationCache,
    PairScore,
    PreferencePair,
    RewardModel,
    RewardModelBundle,
    component_names,
    expected_shapes,
    final_token_positions,
    hook_name,
)
from .storage import config_hash, load_model, save_model

__all__ = [
    "ActivationCache", "BOS", "ModelAdapter", "MultiObjectiveAdapter", "PairScore",
    "PlantedCircuit", "PreferencePair", "RewardModel", "RewardModelBundle", "SEP",
    "ScalarHeadAdapter", "TransformerConfig", "build_length_model", "build_planted_model",
    "build_seeded_model", "component_names", "config_hash", "default_vocab",
    "expected_shapes", "final_token_positions", "full_vocab_size", "get_adapter",
    "hook_name", "load_model", "save_model",
]
