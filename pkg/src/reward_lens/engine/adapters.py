"""Adapter contract between analyses and a model family.

Every analysis reaches the weights through these accessors only, so a new head
layout needs a new adapter and nothing else. The scalar adapter reads the
single head row; the multi-objective adapter averages the K objective rows into
one reward direction and exposes the full matrix separately.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from ..errors import UnknownHeadKindError

if TYPE_CHECKING:
    from .model import RewardModel


@dataclass(frozen=True)
class AttentionParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    b_O: np.ndarray


@dataclass(frozen=True)
class MLPParams:
    W_in: np.ndarray
    b_in: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray


@dataclass(frozen=True)
class BlockParams:
    index: int
    ln1_w: np.ndarray
    ln1_b: np.ndarray
    attn: AttentionParams
    ln2_w: np.ndarray
    ln2_b: np.ndarray
    mlp: MLPParams


@dataclass(frozen=True)
class BlockOutput:
    """Full-sequence tensors produced by one block, each (T, d_model)."""

    resid_post: np.ndarray
    attn_out: np.ndarray
    mlp_out: np.ndarray


@dataclass(frozen=True)
class ForwardOutput:
    final_hidden: np.ndarray       # pre-norm residual at the final token
    normed_hidden: np.ndarray      # after the final norm
    reward: float                  # reward-direction readout of normed_hidden
    objective_rewards: np.ndarray  # (K,)


class ModelAdapter:
    head_kind = "scalar"

    def get_reward_head_params(self, model: "RewardModel") -> tuple[np.ndarray, float]:
        W, b = model.params["head.W"], model.params["head.b"]
        return W[0], float(b[0])

    def get_layers(self, model: "RewardModel") -> list[BlockParams]:
        return list(model.blocks)

    def n_layers(self, model: "RewardModel") -> int:
        return model.config.n_layers

    def n_heads(self, model: "RewardModel") -> int:
        return model.config.n_heads

    def get_attn_module(self, layer: BlockParams) -> AttentionParams | None:
        return layer.attn

    def get_mlp_module(self, layer: BlockParams) -> MLPParams | None:
        return layer.mlp

    def extract_layer_output(self, out: BlockOutput) -> np.ndarray:
        return out.resid_post

    def extract_attn_output(self, out: BlockOutput) -> np.ndarray:
        return out.attn_out

    def extract_mlp_output(self, out: BlockOutput) -> np.ndarray:
        return out.mlp_out

    def get_embedding(self, model: "RewardModel") -> tuple[np.ndarray, np.ndarray]:
        return model.params["embed.W_E"], model.params["embed.W_pos"]

    def extract_reward(self, out: ForwardOutput, inputs=None) -> float:
        return float(out.reward)

    def per_objective_directions(self, model: "RewardModel") -> np.ndarray:
        return model.params["head.W"]


class ScalarHeadAdapter(ModelAdapter):
    head_kind = "scalar"


class MultiObjectiveAdapter(ModelAdapter):
    """K-row linear head; the reward direction is the mean of the rows.

    No gating network is modelled, so the aggregate reward equals the mean of
    the K objective scores.
    """

    head_kind = "multi_objective"

    def get_reward_head_params(self, model: "RewardModel") -> tuple[np.ndarray, float]:
        W, b = model.params["head.W"], model.params["head.b"]
        return W.mean(axis=0), float(b.mean())


_ADAPTERS = {cls.head_kind: cls for cls in (ScalarHeadAdapter, MultiObjectiveAdapter)}


def get_adapter(head_kind: str) -> ModelAdapter:
    try:
        return _ADAPTERS[head_kind]()
    except KeyError:
        raise UnknownHeadKindError(f"no adapter for head_kind {head_kind!r}") from None
