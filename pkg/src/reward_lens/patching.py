"""Activation patching over the 2L attention/MLP sublayers.

Modes (source -> target):

* ``noising``   dispreferred -> preferred
* ``denoising`` preferred -> dispreferred
* ``zero``      zeros -> preferred (out of distribution by construction)

The effect of a patch is ``r_target_clean - r_target_patched`` for every mode.

Splice rules decide how much of the source sequence replaces the target:
``shared_prefix`` (default) copies the source over the longest common token
prefix of the two sequences; ``truncate`` copies it over the first
``min(T_src, T_tgt)`` positions. In a causal model the activations on a common
token prefix are identical for both completions, so ``shared_prefix``
noising/denoising only moves activations that already agree. ``truncate`` is the
variant that actually transplants the diverging tokens.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attribution import ComponentResult
from .engine import PreferencePair, RewardModel, hook_name
from .errors import DegenerateInputError, SchemaMismatchError
from .lens import EPS0
from .numerics import spearman

MODES = ("noising", "denoising", "zero")
SPLICES = ("shared_prefix", "truncate")


@dataclass(frozen=True)
class PatchingResult:
    component_names: list[str]
    component_types: list[str]
    layer_indices: list[int]
    patch_effects: np.ndarray
    original_differential: float
    mode: str
    splice: str
    reward_target_clean: float
    normalized_effects: Optional[np.ndarray]

    @property
    def out_of_distribution(self) -> bool:
        return self.mode == "zero"

    def top_k(self, k: int) -> list[str]:
        order = np.argsort(-np.abs(self.patch_effects), kind="stable")[:k]
        return [self.component_names[i] for i in order]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "splice": self.splice,
            "component_names": list(self.component_names),
            "component_types": list(self.component_types),
            "layer_indices": list(self.layer_indices),
            "patch_effects": [float(x) for x in self.patch_effects],
            "normalized_effects": None if self.normalized_effects is None
            else [float(x) for x in self.normalized_effects],
            "original_differential": self.original_differential,
            "reward_target_clean": self.reward_target_clean,
            "out_of_distribution": self.out_of_distribution,
        }


def sublayer_schema(n_layers: int):
    names, types, layers = [], [], []
    for l in range(n_layers):
        for kind in ("attn", "mlp"):
            names.append(f"{kind}_L{l}")
            types.append(kind)
            layers.append(l)
    return names, types, layers


def splice_length(source_ids, target_ids, splice: str = "shared_prefix") -> int:
    if splice == "truncate":
        return min(len(source_ids), len(target_ids))
    if splice == "shared_prefix":
        n = 0
        for a, b in zip(source_ids, target_ids):
            if a != b:
                break
            n += 1
        return n
    raise ValueError(f"unknown splice rule {splice!r}; expected one of {SPLICES}")


class PatchContext:
    """Clean full-sequence caches for one (pair, mode), reused across components."""

    def __init__(self, model: RewardModel, pair: PreferencePair, mode: str = "noising",
                 splice: str = "shared_prefix"):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if splice not in SPLICES:
            raise ValueError(f"unknown splice rule {splice!r}; expected one of {SPLICES}")
        self.model, self.pair, self.mode, self.splice = model, pair, mode, splice
        target, source = {
            "noising": (pair.preferred, pair.dispreferred),
            "denoising": (pair.dispreferred, pair.preferred),
            "zero": (pair.preferred, None),
        }[mode]
        self.target_ids = model.tokenize(pair.prompt, target)
        self.target = model.run(self.target_ids, cache_full_sequences=True)
        if source is None:
            self.source_ids, self.source = None, None
            self.t_shared = len(self.target_ids)
        else:
            self.source_ids = model.tokenize(pair.prompt, source)
            self.source = model.run(self.source_ids, cache_full_sequences=True)
            self.t_shared = splice_length(self.source_ids, self.target_ids, splice)
        if mode == "noising":
            self.original_differential = self.target.reward - self.source.reward
        elif mode == "denoising":
            self.original_differential = self.source.reward - self.target.reward
        else:
            self.original_differential = model.score(pair.prompt, pair.dispreferred)
            self.original_differential = self.target.reward - self.original_differential

    def _full(self, cache, layer: int, component: str) -> np.ndarray:
        return (cache.full_attn_out if component == "attn" else cache.full_mlp_out)[layer]

    def replacement(self, layer: int, component: str) -> np.ndarray:
        """The spliced (T_target, d) tensor that replaces the sublayer output."""
        _check_component(self.model, layer, component)
        tgt = self._full(self.target, layer, component)
        if self.source is None:
            return np.zeros_like(tgt)
        out = np.array(tgt)
        out[:self.t_shared] = self._full(self.source, layer, component)[:self.t_shared]
        return out

    def run_patched(self, layer: int, component: str, tensor: np.ndarray) -> float:
        """Reward of the target with the sublayer output replaced by ``tensor``."""
        hooks = {hook_name(component, layer): lambda _x: tensor}
        return self.model.run(self.target_ids, hooks=hooks).reward

    def effect(self, layer: int, component: str) -> float:
        return self.target.reward - self.run_patched(layer, component, self.replacement(layer, component))


def _check_component(model: RewardModel, layer: int, component: str) -> None:
    if component not in ("attn", "mlp"):
        raise ValueError(f"component must be 'attn' or 'mlp', got {component!r}")
    if not 0 <= layer < model.n_layers:
        raise ValueError(f"layer {layer} outside 0..{model.n_layers - 1}")


def patch_single_component(model: RewardModel, pair: PreferencePair, layer: int, component: str,
                           mode: str = "noising", splice: str = "shared_prefix",
                           normalize: bool = False, eps0: float = EPS0) -> float:
    _check_component(model, layer, component)
    ctx = PatchContext(model, pair, mode, splice)
    effect = ctx.effect(layer, component)
    if normalize:
        if abs(ctx.original_differential) < eps0:
            raise DegenerateInputError(
                f"original differential {ctx.original_differential:.3g} is below eps0; cannot normalise")
        return effect / ctx.original_differential
    return effect


def normalise_effects(effects: np.ndarray, original_differential: float,
                      eps0: float = EPS0) -> Optional[np.ndarray]:
    if abs(original_differential) < eps0:
        return None
    return np.asarray(effects) / original_differential


def patch_all_components(model: RewardModel, pair: PreferencePair, mode: str = "noising",
                         splice: str = "shared_prefix", eps0: float = EPS0) -> PatchingResult:
    ctx = PatchContext(model, pair, mode, splice)
    names, types, layers = sublayer_schema(model.n_layers)
    effects = np.array([ctx.effect(l, t) for l, t in zip(layers, types)])
    return PatchingResult(
        component_names=names,
        component_types=types,
        layer_indices=layers,
        patch_effects=effects,
        original_differential=ctx.original_differential,
        mode=mode,
        splice=splice,
        reward_target_clean=ctx.target.reward,
        normalized_effects=normalise_effects(effects, ctx.original_differential, eps0),
    )


def faithfulness(attr: ComponentResult, patch: PatchingResult) -> tuple[float, float]:
    """Spearman rho (and two-sided p) between |attribution| and |patch effect| over the 2L sublayers."""
    if attr.differential_contributions is None:
        raise ValueError("faithfulness needs a pair attribution, not a single-response one")
    if list(attr.component_names[1:]) != list(patch.component_names):
        raise SchemaMismatchError("attribution and patching results use different component schemas")
    return spearman(np.abs(attr.differential_contributions[1:]), np.abs(patch.patch_effects))
