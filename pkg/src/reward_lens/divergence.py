"""Divergence-aware patching.

A Gaussian is fitted per sublayer to the final-token outputs seen on clean
inputs. Every patched activation is scored by its Mahalanobis distance to that
Gaussian; a patch that lands off-distribution is harmless when it barely moves
the reward and pernicious otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import PreferencePair, RewardModel
from .errors import CorpusTooSmallError, DataFormatError
from .lens import EPS0
from .numerics import GaussianEstimate, fit_gaussian, mahalanobis
from .patching import PatchContext, PatchingResult, normalise_effects, sublayer_schema
from .tensorfile import read_tensors, write_tensors

DEFAULT_THRESHOLD = 2.0
HARMLESS_FRACTION = 0.1
LOW_RELIABILITY = 0.7


@dataclass(frozen=True)
class DistributionEstimator:
    estimates: dict[str, GaussianEstimate]
    d_model: int

    def __contains__(self, component: str) -> bool:
        return component in self.estimates

    def score(self, component: str, activation) -> float:
        if component not in self.estimates:
            raise KeyError(f"no fitted distribution for component {component!r}")
        return mahalanobis(activation, self.estimates[component])

    def save(self, path) -> None:
        tensors = {}
        for name, g in self.estimates.items():
            tensors[f"{name}.mean"] = g.mean
            tensors[f"{name}.covariance"] = g.covariance
            tensors[f"{name}.regularisation"] = np.array(g.regularisation)
            tensors[f"{name}.sample_count"] = np.array(float(g.sample_count))
        write_tensors(path, tensors)

    @classmethod
    def load(cls, path) -> "DistributionEstimator":
        """Read an estimator; values come back float32-rounded."""
        tensors = read_tensors(path)
        names = sorted({k.rsplit(".", 1)[0] for k in tensors})
        estimates = {}
        try:
            for n in names:
                estimates[n] = GaussianEstimate(
                    mean=tensors[f"{n}.mean"],
                    covariance=tensors[f"{n}.covariance"],
                    regularisation=float(tensors[f"{n}.regularisation"]),
                    sample_count=int(tensors[f"{n}.sample_count"]),
                )
        except KeyError as exc:
            raise DataFormatError(f"estimator file is missing tensor {exc}") from None
        dims = {g.dim for g in estimates.values()}
        if len(dims) != 1:
            raise DataFormatError("estimator components disagree on dimension")
        return cls(estimates, dims.pop())


@dataclass(frozen=True)
class DivergenceInfo:
    component: str
    divergence_score: float
    is_divergent: bool
    divergence_type: str            # "harmless" | "pernicious" | "none"
    confidence: float
    absolute_cutoff: bool = False   # original differential was degenerate

    def to_dict(self) -> dict:
        return {
            "component": self.component,
            "divergence_score": self.divergence_score,
            "is_divergent": self.is_divergent,
            "divergence_type": self.divergence_type,
            "confidence": self.confidence,
            "absolute_cutoff": self.absolute_cutoff,
        }


@dataclass(frozen=True)
class DivergenceAwarePatchingResult:
    patching: PatchingResult
    divergence_info: list[DivergenceInfo]
    threshold: float
    constrained_components: list[str] = field(default_factory=list)

    @property
    def divergent_components(self) -> list[str]:
        return [i.component for i in self.divergence_info if i.is_divergent]

    @property
    def n_pernicious(self) -> int:
        return sum(i.divergence_type == "pernicious" for i in self.divergence_info)

    @property
    def has_pernicious_divergence(self) -> bool:
        return self.n_pernicious > 0

    @property
    def reliability_score(self) -> float:
        return reliability_score(self.n_pernicious, len(self.divergence_info))

    @property
    def flagged_low_reliability(self) -> bool:
        return self.reliability_score < LOW_RELIABILITY

    # PatchingResult passthroughs
    @property
    def component_names(self):
        return self.patching.component_names

    @property
    def patch_effects(self):
        return self.patching.patch_effects

    @property
    def original_differential(self):
        return self.patching.original_differential

    def to_dict(self) -> dict:
        out = self.patching.to_dict()
        out.update({
            "threshold": self.threshold,
            "divergence_info": [i.to_dict() for i in self.divergence_info],
            "divergent_components": self.divergent_components,
            "has_pernicious_divergence": self.has_pernicious_divergence,
            "reliability_score": self.reliability_score,
            "flagged_low_reliability": self.flagged_low_reliability,
            "constrained_components": list(self.constrained_components),
        })
        return out


def minimum_corpus_size(d_model: int) -> int:
    return max(2, int(np.ceil(d_model / 4)))


def collect_component_activations(model: RewardModel, corpus: Iterable[tuple[str, str]]) -> dict[str, np.ndarray]:
    """Final-token attn/mlp outputs for every (prompt, response), keyed by component name."""
    names, types, layers = sublayer_schema(model.n_layers)
    rows = {n: [] for n in names}
    for prompt, response in corpus:
        _, cache = model.forward_with_cache(prompt, response)
        for n, t, l in zip(names, types, layers):
            rows[n].append((cache.attn_out if t == "attn" else cache.mlp_out)[l])
    return {n: np.array(r).reshape(len(r), model.d_model) for n, r in rows.items()}


def fit_distribution(model: RewardModel, corpus: Sequence[tuple[str, str]]) -> DistributionEstimator:
    corpus = list(corpus)
    need = minimum_corpus_size(model.d_model)
    if len(corpus) < need:
        raise CorpusTooSmallError(f"corpus has {len(corpus)} items; need at least {need} for d={model.d_model}")
    acts = collect_component_activations(model, corpus)
    return DistributionEstimator({n: fit_gaussian(a) for n, a in acts.items()}, model.d_model)


def confidence(score: float, threshold: float) -> float:
    """Heuristic: grows with the score past the threshold, shrinks toward it below."""
    if score > threshold:
        return min(1.0, score / (2.0 * threshold))
    return 1.0 - score / threshold


def classify_divergence(component: str, score: float, effect: float, original_differential: float,
                        threshold: float = DEFAULT_THRESHOLD, eps0: float = EPS0) -> DivergenceInfo:
    """Label one patched component from its divergence score and patch effect.

    Divergent patches are harmless when ``|effect| < 0.1 * |original_differential|``.
    If the original differential is below ``eps0`` the cutoff becomes the
    absolute value ``0.1 * eps0`` and the result is flagged.
    """
    divergent = bool(score > threshold)
    degenerate = abs(original_differential) < eps0
    cutoff = HARMLESS_FRACTION * (eps0 if degenerate else abs(original_differential))
    if not divergent:
        kind = "none"
    else:
        kind = "harmless" if abs(effect) < cutoff else "pernicious"
    return DivergenceInfo(component, float(score), divergent, kind, confidence(score, threshold),
                          absolute_cutoff=degenerate)


def reliability_score(n_pernicious: int, n_components: int) -> float:
    if n_components <= 0:
        raise ValueError("need at least one component")
    if not 0 <= n_pernicious <= n_components:
        raise ValueError("n_pernicious must lie in [0, n_components]")
    return 1.0 - n_pernicious / n_components


def shrink_to_threshold(activation, g: GaussianEstimate, threshold: float) -> tuple[np.ndarray, bool]:
    """Move ``activation`` along the line to the mean until its score equals ``threshold``."""
    a = np.asarray(activation, dtype=np.float64)
    score = mahalanobis(a, g)
    if score <= threshold:
        return a, False
    return g.mean + (a - g.mean) * (threshold / score), True


def _run(model: RewardModel, pair: PreferencePair, estimator: DistributionEstimator, mode: str,
         threshold: float, splice: str, constrain: bool, eps0: float) -> DivergenceAwarePatchingResult:
    if estimator.d_model != model.d_model:
        raise DataFormatError(f"estimator fitted for d={estimator.d_model}, model has d={model.d_model}")
    names, types, layers = sublayer_schema(model.n_layers)
    missing = [n for n in names if n not in estimator]
    if missing:
        raise KeyError(f"no fitted distribution for components {missing}")
    ctx = PatchContext(model, pair, mode, splice)
    final = ctx.target.final_token_position
    effects, scores, constrained = [], [], []
    for n, t, l in zip(names, types, layers):
        tensor = ctx.replacement(l, t)
        score = estimator.score(n, tensor[final])
        if constrain:
            shrunk, moved = shrink_to_threshold(tensor[final], estimator.estimates[n], threshold)
            if moved:
                tensor = tensor.copy()
                tensor[final] = shrunk
                constrained.append(n)
        effects.append(ctx.target.reward - ctx.run_patched(l, t, tensor))
        scores.append(score)
    effects = np.array(effects)
    patching = PatchingResult(
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
    info = [classify_divergence(n, s, e, ctx.original_differential, threshold, eps0)
            for n, s, e in zip(names, scores, effects)]
    return DivergenceAwarePatchingResult(patching, info, threshold, constrained)


def patch_with_divergence_check(model: RewardModel, pair: PreferencePair, estimator: DistributionEstimator,
                                mode: str = "noising", threshold: float = DEFAULT_THRESHOLD,
                                splice: str = "shared_prefix", eps0: float = EPS0) -> DivergenceAwarePatchingResult:
    """Patch every sublayer and score the spliced final-token activation.

    Scores are the pre-constraint distances; effects are unchanged from plain
    patching.
    """
    return _run(model, pair, estimator, mode, threshold, splice, False, eps0)


def constrained_patch(model: RewardModel, pair: PreferencePair, estimator: DistributionEstimator,
                      mode: str = "noising", threshold: float = DEFAULT_THRESHOLD,
                      splice: str = "shared_prefix", eps0: float = EPS0) -> DivergenceAwarePatchingResult:
    """Like ``patch_with_divergence_check`` but divergent final-token activations are
    pulled radially toward the fitted mean onto the threshold shell before the
    forward pass continues. Reported scores are the pre-shrink ones."""
    return _run(model, pair, estimator, mode, threshold, splice, True, eps0)


def summarise(infos: Sequence[DivergenceInfo]) -> dict:
    n_pern = sum(i.divergence_type == "pernicious" for i in infos)
    rel = reliability_score(n_pern, len(infos))
    return {
        "n_components": len(infos),
        "n_divergent": sum(i.is_divergent for i in infos),
        "n_pernicious": n_pern,
        "reliability_score": rel,
        "flagged_low_reliability": rel < LOW_RELIABILITY,
    }
