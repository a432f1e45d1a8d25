"""Per-component decomposition of the reward along the reward direction.

Contributions are taken against the pre-final-norm stream: with
``h_final = embed + sum(attn + mlp)``, the contributions plus the bias equal
``w_r . h_final + b_r`` exactly. For models with a final layer norm that sum is
the lens readout of the last layer, not the scored reward.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import PreferencePair, RewardModel, component_names
from .errors import SchemaMismatchError
from .numerics import topk_indices

NORM_NOTE = ("contributions decompose w_r . h_final + b_r on the pre-final-norm stream; "
             "the scored reward additionally passes through the final norm")

_FIELDS = {
    "differential": "differential_contributions",
    "preferred": "contributions_preferred",
    "dispreferred": "contributions_dispreferred",
}


@dataclass(frozen=True)
class ComponentResult:
    component_names: list[str]
    component_types: list[str]
    layer_indices: list[int]
    contributions_preferred: np.ndarray
    contributions_dispreferred: np.ndarray | None
    differential_contributions: np.ndarray | None
    total_reward_preferred: float
    total_reward_dispreferred: float | None
    bias: float

    @property
    def n_layers(self) -> int:
        return (len(self.component_names) - 1) // 2

    def top_k(self, k: int, by: str = "differential") -> list[str]:
        return top_k(self, k, by)

    def by_type(self, kind: str) -> dict[str, float]:
        vals = self._field("differential" if self.differential_contributions is not None else "preferred")
        return {n: float(v) for n, t, v in zip(self.component_names, self.component_types, vals) if t == kind}

    def _field(self, by: str) -> np.ndarray:
        try:
            arr = getattr(self, _FIELDS[by])
        except KeyError:
            raise ValueError(f"by must be one of {sorted(_FIELDS)}, got {by!r}") from None
        if arr is None:
            raise ValueError(f"{by!r} contributions are not populated for a single-response result")
        return arr

    def heatmap(self, by: str = "differential") -> np.ndarray:
        """(2, L + 1) matrix: rows attn / mlp, column 0 the embedding (attn row only; mlp cell NaN)."""
        vals = self._field(by)
        L = self.n_layers
        out = np.full((2, L + 1), np.nan)
        out[0, 0] = vals[0]
        out[0, 1:] = vals[1::2]
        out[1, 1:] = vals[2::2]
        return out

    def to_dict(self) -> dict:
        def lst(a):
            return None if a is None else [float(x) for x in a]

        return {
            "component_names": list(self.component_names),
            "component_types": list(self.component_types),
            "layer_indices": list(self.layer_indices),
            "contributions_preferred": lst(self.contributions_preferred),
            "contributions_dispreferred": lst(self.contributions_dispreferred),
            "differential_contributions": lst(self.differential_contributions),
            "total_reward_preferred": self.total_reward_preferred,
            "total_reward_dispreferred": self.total_reward_dispreferred,
            "bias": self.bias,
            "note": NORM_NOTE,
        }


def _schema(n_layers: int):
    names = component_names(n_layers)
    types = ["embed"] + ["attn", "mlp"] * n_layers
    layers = [-1] + [l for l in range(n_layers) for _ in (0, 1)]
    return names, types, layers


def contributions(model: RewardModel, cache) -> np.ndarray:
    w = model.reward_direction
    return np.array([w @ v for v in cache.component_vectors()])


def attribute(model: RewardModel, pair: PreferencePair) -> ComponentResult:
    r_pref, c_pref = model.forward_with_cache(pair.prompt, pair.preferred)
    r_disp, c_disp = model.forward_with_cache(pair.prompt, pair.dispreferred)
    cp, cd = contributions(model, c_pref), contributions(model, c_disp)
    names, types, layers = _schema(model.n_layers)
    return ComponentResult(names, types, layers, cp, cd, cp - cd, r_pref, r_disp, model.reward_bias)


def attribute_single(model: RewardModel, prompt: str, response: str) -> ComponentResult:
    reward, cache = model.forward_with_cache(prompt, response)
    names, types, layers = _schema(model.n_layers)
    return ComponentResult(names, types, layers, contributions(model, cache), None, None,
                           reward, None, model.reward_bias)


def top_k(result: ComponentResult, k: int, by: str = "differential") -> list[str]:
    """Component names ranked by |value|, largest first; ties keep schema order."""
    vals = result._field(by)
    return [result.component_names[i] for i in topk_indices(np.abs(vals), k)]


def top_k_frequency(results: Sequence[ComponentResult], k: int) -> dict[str, int]:
    """How many results rank each component in their top-k by |differential|."""
    if not results:
        raise ValueError("need at least one result")
    names = results[0].component_names
    for r in results[1:]:
        if r.component_names != names:
            raise SchemaMismatchError("results come from models with different component schemas")
    counts = Counter()
    for r in results:
        counts.update(top_k(r, k, "differential"))
    return {n: counts.get(n, 0) for n in names}
