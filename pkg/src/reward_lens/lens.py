"""Reward Lens: per-layer projection of the residual stream onto the reward direction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import PreferencePair, RewardModel

# Final differentials smaller than this (reward units) leave the crystallisation depth undefined.
EPS0 = 1e-6


@dataclass(frozen=True)
class RewardLensResult:
    layers: list[int]
    lens_preferred: np.ndarray
    lens_dispreferred: Optional[np.ndarray]
    differential: Optional[np.ndarray]
    marginal_contributions: Optional[np.ndarray]
    reward_preferred: float
    reward_dispreferred: Optional[float]
    crystallisation_layer: Optional[int]
    crystallisation_depth: Optional[float]
    n_layers: int

    @property
    def depths(self) -> np.ndarray:
        """Fractional depth (l + 1) / (L + 1) of every lens point."""
        return (np.asarray(self.layers) + 1.0) / (self.n_layers + 1.0)

    def to_dict(self) -> dict:
        def lst(a):
            return None if a is None else [float(x) for x in a]

        return {
            "layers": list(self.layers),
            "depths": lst(self.depths),
            "lens_preferred": lst(self.lens_preferred),
            "lens_dispreferred": lst(self.lens_dispreferred),
            "differential": lst(self.differential),
            "marginal_contributions": lst(self.marginal_contributions),
            "reward_preferred": self.reward_preferred,
            "reward_dispreferred": self.reward_dispreferred,
            "crystallisation_layer": self.crystallisation_layer,
            "crystallisation_depth": self.crystallisation_depth,
        }


def lens_trajectory(model: RewardModel, cache) -> np.ndarray:
    w, b = model.reward_direction, model.reward_bias
    return np.array([w @ cache.residual[l] + b for l in range(-1, model.n_layers)])


def crystallisation_index(differential, eps0: float = EPS0) -> Optional[int]:
    """Position in ``differential`` where it first reaches half its final value with the same sign."""
    diff = np.asarray(differential, dtype=np.float64)
    final = diff[-1]
    if abs(final) < eps0:
        return None
    hits = np.flatnonzero((np.sign(diff) == np.sign(final)) & (np.abs(diff) >= 0.5 * abs(final)))
    return int(hits[0])


def crystallisation_depth(result: RewardLensResult, eps0: float = EPS0) -> Optional[float]:
    """Fractional depth (l + 1) / (L + 1) of the crystallisation layer l, or None."""
    if result.differential is None:
        return None
    idx = crystallisation_index(result.differential, eps0)
    if idx is None:
        return None
    return float(result.depths[idx])


def trace(model: RewardModel, pair: PreferencePair, eps0: float = EPS0) -> RewardLensResult:
    r_pref, c_pref = model.forward_with_cache(pair.prompt, pair.preferred)
    r_disp, c_disp = model.forward_with_cache(pair.prompt, pair.dispreferred)
    lp, ld = lens_trajectory(model, c_pref), lens_trajectory(model, c_disp)
    diff = lp - ld
    marginal = np.diff(diff)
    layers = list(range(-1, model.n_layers))
    idx = crystallisation_index(diff, eps0)
    L = model.n_layers
    return RewardLensResult(
        layers=layers,
        lens_preferred=lp,
        lens_dispreferred=ld,
        differential=diff,
        marginal_contributions=marginal,
        reward_preferred=r_pref,
        reward_dispreferred=r_disp,
        crystallisation_layer=None if idx is None else layers[idx],
        crystallisation_depth=None if idx is None else (layers[idx] + 1.0) / (L + 1.0),
        n_layers=L,
    )


def trace_single(model: RewardModel, prompt: str, response: str) -> RewardLensResult:
    reward, cache = model.forward_with_cache(prompt, response)
    return RewardLensResult(
        layers=list(range(-1, model.n_layers)),
        lens_preferred=lens_trajectory(model, cache),
        lens_dispreferred=None,
        differential=None,
        marginal_contributions=None,
        reward_preferred=reward,
        reward_dispreferred=None,
        crystallisation_layer=None,
        crystallisation_depth=None,
        n_layers=model.n_layers,
    )
