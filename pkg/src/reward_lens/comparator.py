"""Cross-model comparison on a shared fractional-depth grid."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Optional, Sequence

import numpy as np

from .attribution import ComponentResult, attribute, top_k_frequency
from .engine import PreferencePair, RewardModel
from .errors import DataFormatError, DegenerateStatisticError
from .lens import RewardLensResult, trace
from .numerics import pearson

GRID_POINTS = 101


def depth_grid(n: int = GRID_POINTS) -> np.ndarray:
    """``n`` uniform points on (0, 1]."""
    return np.linspace(0.0, 1.0, n + 1)[1:]


def on_grid(result: RewardLensResult, grid: Optional[np.ndarray] = None) -> np.ndarray:
    """Differential interpolated linearly onto the grid (held constant beyond the last depth)."""
    grid = depth_grid() if grid is None else grid
    if result.differential is None:
        raise DataFormatError("comparison needs pair lens results")
    return np.interp(grid, result.depths, result.differential)


@dataclass(frozen=True)
class ComparisonResult:
    model_names: list[str]
    lens_results: list[RewardLensResult]
    attribution_results: Optional[list[ComponentResult]]
    crystallization_layers: list[Optional[float]]
    grid: np.ndarray
    curves: np.ndarray                  # (n_models, grid) interpolated differentials
    formation_correlations: np.ndarray  # nan where degenerate
    degenerate_models: list[str]

    def to_dict(self) -> dict:
        return {
            "model_names": list(self.model_names),
            "crystallization_layers": list(self.crystallization_layers),
            "grid": [float(x) for x in self.grid],
            "curves": self.curves.tolist(),
            "formation_correlations": [[None if np.isnan(x) else float(x) for x in row]
                                       for row in self.formation_correlations],
            "degenerate_models": list(self.degenerate_models),
            "lens_results": [r.to_dict() for r in self.lens_results],
        }


def compare_results(names: Sequence[str], results: Sequence[RewardLensResult],
                    attributions: Optional[Sequence[ComponentResult]] = None) -> ComparisonResult:
    if len(results) < 2:
        raise DataFormatError("comparison needs at least two models")
    grid = depth_grid()
    curves = np.array([on_grid(r, grid) for r in results])
    n = len(results)
    corr = np.eye(n)
    degenerate = [i for i in range(n) if np.all(curves[i] == curves[i][0])]
    for i in degenerate:
        corr[i, i] = np.nan
    for i, j in combinations(range(n), 2):
        try:
            corr[i, j] = corr[j, i] = pearson(curves[i], curves[j])
        except DegenerateStatisticError:
            corr[i, j] = corr[j, i] = np.nan
    return ComparisonResult(
        model_names=list(names),
        lens_results=list(results),
        attribution_results=None if attributions is None else list(attributions),
        crystallization_layers=[r.crystallisation_depth for r in results],
        grid=grid,
        curves=curves,
        formation_correlations=corr,
        degenerate_models=[names[i] for i in degenerate],
    )


def compare(models: Sequence[RewardModel], pair: PreferencePair, with_attribution: bool = False) -> ComparisonResult:
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    results = [trace(m, pair) for m in models]
    attrs = [attribute(m, pair) for m in models] if with_attribution else None
    return compare_results(names, results, attrs)


def top_k_set(results: Sequence[ComponentResult], k: int = 10) -> set[str]:
    """The k components most often in per-pair top-k lists; ties keep schema order."""
    names = results[0].component_names
    if not 1 <= k <= len(names):
        raise ValueError(f"k must be in [1, {len(names)}], got {k}")
    freq = top_k_frequency(results, k)
    counts = np.array([freq[n] for n in names])
    order = np.argsort(-counts, kind="stable")[:k]
    return {names[i] for i in order}


def jaccard(a: set, b: set) -> float:
    union = a | b
    return 1.0 if not union else len(a & b) / len(union)


def circuit_overlap(results: Mapping[str, Sequence[ComponentResult]], k: int = 10) -> tuple[list[str], np.ndarray]:
    dims = list(results)
    if len(dims) < 2:
        raise DataFormatError("circuit overlap needs at least two dimensions")
    sets = [top_k_set(results[d], k) for d in dims]
    n = len(dims)
    mat = np.eye(n)
    for i, j in combinations(range(n), 2):
        mat[i, j] = mat[j, i] = jaccard(sets[i], sets[j])
    return dims, mat
