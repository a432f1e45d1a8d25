"""Interpretability primitives for transformer reward models.

The main entry points are re-exported here; see the submodules for details.
"""
from .attribution import ComponentResult, attribute, attribute_single, top_k, top_k_frequency
from .comparator import ComparisonResult, circuit_overlap, compare
from .divergence import (
    DistributionEstimator,
    DivergenceAwarePatchingResult,
    DivergenceInfo,
    constrained_patch,
    fit_distribution,
    patch_with_divergence_check,
)
from .engine import (
    PreferencePair,
    RewardModel,
    RewardModelBundle,
    TransformerConfig,
    build_length_model,
    build_planted_model,
    build_seeded_model,
    load_model,
    save_model,
)
from .errors import DataFormatError, NumericDegeneracyError, RewardLensError
from .geometry import (
    ConceptInfo,
    ConflictReport,
    DoseResponse,
    analyze_conflicts,
    classify_pair,
    dose_response,
    extract_concepts,
    intervene_on_concept,
    learn_term_directions,
)
from .lens import RewardLensResult, crystallisation_depth, trace, trace_single
from .patching import PatchingResult, faithfulness, patch_all_components, patch_single_component
from .probes import (
    CascadeReport,
    DistortionReport,
    HackingReport,
    agentic_amplification,
    cascade_detect,
    cross_validate_with_hacking,
    distortion_index,
    hacking_scan,
)

__version__ = "0.1.0"
