"""Bayesian optimization of multimodal fusion architectures with a graph-induced kernel."""

from .bo import (
    BOConfig,
    TrialLog,
    expected_improvement,
    iterations_to_threshold,
    propose_candidates,
    run_bo,
    run_random_search,
)
from .gp import GPModel, KernelParams, fit, kernel_eval, tune_lambda
from .metric import DistanceCache, EdgeWeights, brute_force_distance, geodesic_distance
from .objective import ExternalEvaluator, SyntheticObjective, external_eval, synthetic_eval
from .space import (
    Fusion,
    Leaf,
    Move,
    MoveKind,
    Net,
    SpaceConfig,
    apply_move,
    canonicalize,
    enumerate_space,
    inverse_move,
    neighbors,
    random_net,
    validate,
)

__all__ = [
    "apply_move",
    "BOConfig",
    "brute_force_distance",
    "canonicalize",
    "DistanceCache",
    "EdgeWeights",
    "enumerate_space",
    "expected_improvement",
    "external_eval",
    "ExternalEvaluator",
    "fit",
    "Fusion",
    "geodesic_distance",
    "GPModel",
    "inverse_move",
    "iterations_to_threshold",
    "kernel_eval",
    "KernelParams",
    "Leaf",
    "Move",
    "MoveKind",
    "neighbors",
    "Net",
    "propose_candidates",
    "random_net",
    "run_bo",
    "run_random_search",
    "SpaceConfig",
    "synthetic_eval",
    "SyntheticObjective",
    "TrialLog",
    "tune_lambda",
    "validate",
]

__version__ = "0.1.0"
