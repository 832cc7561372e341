"""Graphical identification and closed-form estimation of total effects in
linear structural equation models with latent variables and interval
selection."""

from .exceptions import DegenerateError, MisspecificationError, ModelError, NotIdentifiableError
from .gaussian import (Interval, LabeledCov, Selected, beta, conditional_cov, read_cov_csv,
                       selected_cov, truncated_moments)
from .graph import Dag, Kind, Mode, ZeroPattern, back_door_admissible, d_separated, load_graph, zero_pattern
from .identification import (Certificate, Roles, Sign, adjusted_effect, check_latent_criterion,
                             check_selection_criterion, estimate_latent, estimate_selected,
                             latent_selection_pipeline, peel_factors, search_certificates,
                             solve_single_factor)
from .sem import LinearSem, implied_cov, random_sem, true_total_effect

__version__ = "0.1.0"

__all__ = [
    "Certificate", "Dag", "DegenerateError", "Interval", "Kind", "LabeledCov", "LinearSem",
    "MisspecificationError", "Mode", "ModelError", "NotIdentifiableError", "Roles", "Selected",
    "Sign", "ZeroPattern", "adjusted_effect", "back_door_admissible", "beta",
    "check_latent_criterion", "check_selection_criterion", "conditional_cov", "d_separated",
    "estimate_latent", "estimate_selected", "implied_cov", "latent_selection_pipeline",
    "load_graph", "peel_factors", "random_sem", "read_cov_csv", "search_certificates",
    "selected_cov", "solve_single_factor", "true_total_effect", "truncated_moments",
    "zero_pattern",
]
