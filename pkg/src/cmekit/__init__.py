"""Numerical solution of the chemical master equation.

Three routes are provided: direct integration on a dynamically truncated
state space (:mod:`cmekit.direct`), closed moment equations of any order
(:mod:`cmekit.closure`) and maximum-entropy reconstruction of marginal
distributions from moments (:mod:`cmekit.maxent`). :mod:`cmekit.harness`
combines them into benchmark runs and :mod:`cmekit.cli` exposes everything
on the command line.
"""
from __future__ import annotations

__version__ = "0.1.0"

from .closure import (  # noqa: E402
    MomentODESystem,
    MomentVector,
    close_system,
    enumerate_moment_indices,
    init_moments_from_state,
    integrate_moments,
)
from .direct import SparseDistribution, TruncationConfig, integrate, marginal, point_mass  # noqa: E402
from .harness import ExperimentConfig, chebyshev_distance, relative_moment_error, run_experiment  # noqa: E402
from .maxent import MaxEntOptions, MomentConstraints, discretize, reconstruct, solve_dual  # noqa: E402
from .network import ReactionNetwork, builtin_model, parse_network  # noqa: E402

__all__ = [
    "__version__",
    "ReactionNetwork",
    "builtin_model",
    "parse_network",
    "SparseDistribution",
    "TruncationConfig",
    "integrate",
    "marginal",
    "point_mass",
    "MomentODESystem",
    "MomentVector",
    "close_system",
    "enumerate_moment_indices",
    "init_moments_from_state",
    "integrate_moments",
    "MaxEntOptions",
    "MomentConstraints",
    "discretize",
    "reconstruct",
    "solve_dual",
    "ExperimentConfig",
    "chebyshev_distance",
    "relative_moment_error",
    "run_experiment",
]
