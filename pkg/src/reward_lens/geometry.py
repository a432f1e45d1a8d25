"""Direction geometry: conflicts between reward terms, concept vectors, dose response."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from itertools import combinations
from typing import Mapping, Optional, Sequence

import numpy as np

from .engine import PreferencePair, RewardModel, hook_name
from .errors import DataFormatError, DegenerateInputError
from .numerics import cosine, regression_slope

RELATIONSHIPS = ("aligned", "orthogonal", "in_conflict", "weakly_aligned", "weakly_opposed")
DEFAULT_ALPHAS = (-2.0, -1.0, -0.5, 0.5, 1.0, 2.0)
ALIGNMENT_THRESHOLD = 0.2
DEFAULT_HACKABLE = frozenset({"verbosity", "agreement"})

_SEVERITY = {"aligned": "none", "orthogonal": "none", "weakly_aligned": "low",
             "weakly_opposed": "medium", "in_conflict": "high"}
_ADVICE = {
    "aligned": "terms reinforce each other",
    "orthogonal": "terms are independent; optimising one leaves the other unconstrained",
    "weakly_aligned": "mostly compatible",
    "weakly_opposed": "mild trade-off; monitor both terms",
    "in_conflict": "optimising one term degrades the other; monitor separately",
}


def classify_pair(cos: float) -> str:
    if cos > 0.5:
        return "aligned"
    if abs(cos) < 0.2:
        return "orthogonal"
    if cos < -0.3:
        return "in_conflict"
    return "weakly_aligned" if cos >= 0.2 else "weakly_opposed"


def final_residuals(model: RewardModel, prompt: str, response: str) -> dict[int, np.ndarray]:
    _, cache = model.forward_with_cache(prompt, response)
    return dict(cache.residual)


def _check_layer(model: RewardModel, layer: Optional[int]) -> int:
    layer = model.n_layers - 1 if layer is None else int(layer)
    if not -1 <= layer < model.n_layers:
        raise ValueError(f"layer {layer} outside -1..{model.n_layers - 1}")
    return layer


def _deltas(model: RewardModel, pairs: Sequence[PreferencePair], layer: int):
    pos, neg = [], []
    for p in pairs:
        pos.append(final_residuals(model, p.prompt, p.preferred)[layer])
        neg.append(final_residuals(model, p.prompt, p.dispreferred)[layer])
    return np.array(pos), np.array(neg)


def _unit_mean_delta(name: str, pos: np.ndarray, neg: np.ndarray):
    mean_delta = (pos - neg).mean(axis=0)
    norm = float(np.linalg.norm(mean_delta))
    if norm == 0.0:
        raise DegenerateInputError(f"{name!r}: mean activation delta is zero; direction undefined")
    return mean_delta / norm, norm


def learn_term_directions(model: RewardModel, term_pairs: Mapping[str, Sequence[PreferencePair]],
                          layer: Optional[int] = None) -> dict[str, np.ndarray]:
    """Unit mean of (preferred - dispreferred) final-token residuals per term."""
    layer = _check_layer(model, layer)
    out = {}
    for term, pairs in term_pairs.items():
        if not pairs:
            raise DataFormatError(f"term {term!r} has no pairs")
        out[term] = _unit_mean_delta(term, *_deltas(model, pairs, layer))[0]
    return out


@dataclass(frozen=True)
class ConflictReport:
    term_names: list[str]
    term_directions: np.ndarray
    similarity_matrix: np.ndarray
    relationship_matrix: list[list[str]]
    pairwise_analysis: list[dict]
    in_conflict_pairs: list[tuple[str, str]]
    overall_conflict_score: float
    monitorability_risk: str

    def to_dict(self) -> dict:
        return {
            "term_names": list(self.term_names),
            "similarity_matrix": self.similarity_matrix.tolist(),
            "relationship_matrix": [list(r) for r in self.relationship_matrix],
            "pairwise_analysis": list(self.pairwise_analysis),
            "in_conflict_pairs": [list(p) for p in self.in_conflict_pairs],
            "overall_conflict_score": self.overall_conflict_score,
            "monitorability_risk": self.monitorability_risk,
        }


def analyze_conflicts(directions, names: Optional[Sequence[str]] = None) -> ConflictReport:
    """Pairwise cosine classification of term directions.

    ``directions`` is a name -> vector mapping, a (K, d) matrix, or a
    multi-objective model (its per-objective head rows). The conflict score is
    the fraction of term pairs in conflict; monitorability risk is "high" when
    any pair is in conflict.
    """
    if isinstance(directions, RewardModel):
        mat = directions.per_objective_directions()
        names = list(names) if names is not None else [f"objective_{i}" for i in range(len(mat))]
    elif isinstance(directions, Mapping):
        names = list(directions)
        mat = np.array([np.asarray(directions[n], dtype=np.float64) for n in names])
    else:
        mat = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        names = list(names) if names is not None else [f"term_{i}" for i in range(len(mat))]
    if len(mat) < 2:
        raise DataFormatError("conflict analysis needs at least two terms")
    if len(names) != len(mat):
        raise DataFormatError(f"{len(names)} names for {len(mat)} directions")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("a term direction has zero norm")
    unit = mat / norms[:, None]

    K = len(names)
    sim = np.eye(K)
    rel = [["aligned"] * K for _ in range(K)]
    analysis, conflicts = [], []
    for i, j in combinations(range(K), 2):
        c = cosine(mat[i], mat[j])
        sim[i, j] = sim[j, i] = c
        r = classify_pair(c)
        rel[i][j] = rel[j][i] = r
        analysis.append({"term_a": names[i], "term_b": names[j], "cosine": c, "relationship": r,
                         "severity": _SEVERITY[r], "recommendation": _ADVICE[r]})
        if r == "in_conflict":
            conflicts.append((names[i], names[j]))
    score = len(conflicts) / len(analysis)
    return ConflictReport(names, unit, sim, rel, analysis, conflicts, score,
                          "high" if conflicts else "low")


# -- concepts --------------------------------------------------------------

def load_concepts(path=None) -> dict[str, list[PreferencePair]]:
    """Concept contrast pairs (positive as preferred) grouped by concept."""
    if path is None:
        lines = resources.files("reward_lens").joinpath("data", "concepts.jsonl").read_text("utf-8").splitlines()
        source = "concepts.jsonl"
    else:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        source = str(path)
    out: dict[str, list[PreferencePair]] = {}
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pair = PreferencePair(rec["prompt"], rec["positive"], rec["negative"], rec["concept"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataFormatError(f"{source}:{n}: bad concept record ({exc})") from None
        out.setdefault(pair.dimension, []).append(pair)
    return out


@dataclass(frozen=True)
class ConceptInfo:
    name: str
    direction: np.ndarray
    reward_alignment: float
    mean_activation_positive: np.ndarray
    mean_activation_negative: np.ndarray
    separability: float
    is_reward_aligned: bool
    hacking_risk: str
    layer: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layer": self.layer,
            "direction": [float(x) for x in self.direction],
            "reward_alignment": self.reward_alignment,
            "separability": self.separability,
            "is_reward_aligned": self.is_reward_aligned,
            "hacking_risk": self.hacking_risk,
        }


def hacking_risk(is_reward_aligned: bool, hackable: bool) -> str:
    if is_reward_aligned and hackable:
        return "high"
    if is_reward_aligned or hackable:
        return "medium"
    return "low"


def extract_concepts(model: RewardModel, concept_pairs: Optional[Mapping[str, Sequence[PreferencePair]]] = None,
                     layer: Optional[int] = None, alignment_threshold: float = ALIGNMENT_THRESHOLD,
                     hackable: Sequence[str] = DEFAULT_HACKABLE) -> list[ConceptInfo]:
    concept_pairs = load_concepts() if concept_pairs is None else concept_pairs
    layer = _check_layer(model, layer)
    w = model.reward_direction
    w_unit = w / np.linalg.norm(w)
    hackable = set(hackable)
    out = []
    for name, pairs in concept_pairs.items():
        if not pairs:
            raise DataFormatError(f"concept {name!r} has no pairs")
        pos, neg = _deltas(model, pairs, layer)
        v, sep = _unit_mean_delta(name, pos, neg)
        align = float(np.clip(v @ w_unit, -1.0, 1.0))
        aligned = abs(align) > alignment_threshold
        out.append(ConceptInfo(name, v, align, pos.mean(axis=0), neg.mean(axis=0), sep, aligned,
                               hacking_risk(aligned, name in hackable), layer))
    return out


# -- interventions ---------------------------------------------------------

def _intervened_cache(model: RewardModel, prompt: str, response: str, v, strength: float, layer: int):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.d_model,):
        raise DataFormatError(f"concept vector must have length {model.d_model}")
    ids = model.tokenize(prompt, response)
    final = len(ids) - 1

    def add(x):
        x[final] += strength * v
        return x

    return model.run(ids, hooks={hook_name("resid", layer): add})


def intervene_on_concept(model: RewardModel, prompt: str, response: str, v, strength: float,
                         layer: Optional[int] = None, readout: str = "scored") -> float:
    """Reward after adding ``strength * v`` to the final-token residual after ``layer``.

    ``readout="scored"`` passes the stream through the final norm as the model
    does; ``readout="lens"`` reads ``w_r . h + b_r`` directly.
    """
    layer = _check_layer(model, layer)
    cache = _intervened_cache(model, prompt, response, v, strength, layer)
    if readout == "scored":
        return cache.reward
    if readout == "lens":
        return model.project_onto_reward(cache.final_residual)
    raise ValueError(f"readout must be 'scored' or 'lens', got {readout!r}")


@dataclass(frozen=True)
class DoseResponse:
    concept: str
    layer: int
    alphas: np.ndarray
    rewards: np.ndarray
    deltas: np.ndarray
    causal_slope: float
    linearity_residual: float
    lens_rewards: np.ndarray
    lens_deltas: np.ndarray
    lens_slope: float
    lens_linearity_residual: float

    def to_dict(self) -> dict:
        def lst(a):
            return [float(x) for x in a]

        return {
            "concept": self.concept,
            "layer": self.layer,
            "alphas": lst(self.alphas),
            "rewards": lst(self.rewards),
            "deltas": lst(self.deltas),
            "causal_slope": self.causal_slope,
            "linearity_residual": self.linearity_residual,
            "lens_rewards": lst(self.lens_rewards),
            "lens_deltas": lst(self.lens_deltas),
            "lens_slope": self.lens_slope,
            "lens_linearity_residual": self.lens_linearity_residual,
        }


def dose_response(model: RewardModel, prompt: str, response: str, concept, layer: Optional[int] = None,
                  alphas: Sequence[float] = DEFAULT_ALPHAS, name: Optional[str] = None) -> DoseResponse:
    """Reward deltas for ``h <- h + alpha * v`` over an alpha grid, scored and lens readouts."""
    if isinstance(concept, ConceptInfo):
        name, v = name or concept.name, concept.direction
    else:
        v = np.asarray(concept, dtype=np.float64)
        name = name or "concept"
    layer = _check_layer(model, layer)
    alphas = np.asarray(alphas, dtype=np.float64)
    base = _intervened_cache(model, prompt, response, v, 0.0, layer)
    base_scored, base_lens = base.reward, model.project_onto_reward(base.final_residual)
    scored, lens = [], []
    for a in alphas:
        c = _intervened_cache(model, prompt, response, v, float(a), layer)
        scored.append(c.reward)
        lens.append(model.project_onto_reward(c.final_residual))
    scored, lens = np.array(scored), np.array(lens)
    d_s, d_l = scored - base_scored, lens - base_lens
    s_slope, l_slope = regression_slope(alphas, d_s), regression_slope(alphas, d_l)
    return DoseResponse(
        concept=name, layer=layer, alphas=alphas,
        rewards=scored, deltas=d_s, causal_slope=s_slope,
        linearity_residual=float(np.max(np.abs(d_s - s_slope * alphas))),
        lens_rewards=lens, lens_deltas=d_l, lens_slope=l_slope,
        lens_linearity_residual=float(np.max(np.abs(d_l - l_slope * alphas))),
    )
