"""Mimicking counterfactual outcomes for structural nested models."""

__version__ = "0.1.0"

from .errors import (
    DegenerateVarianceError,
    DomainError,
    IdentificationError,
    MimicryError,
    ModelValidityError,
    ModelValidityWarning,
    PositivityError,
    RegularityError,
    SolverError,
)
from .paths import SamplePath, discretize, dyadic_grid
from .shift_models import RegularityBudget, ShiftModel, closed_form_mimic, gronwall_constant
from .mimic_ode import PathTable, SolverOptions, Trajectory, gronwall_gap_bound, solve_backward
from .gcomp import TreatmentTree, figure1_tree, g_compute
from .simulate import Dataset, Scenario, simulate_counterfactual, simulate_observed
from .inference import ScoreSpec, estimate_psi, score_statistic, test_no_effect
from .validate import mimicry_check

__all__ = [
    "__version__",
    "DegenerateVarianceError",
    "DomainError",
    "IdentificationError",
    "MimicryError",
    "ModelValidityError",
    "ModelValidityWarning",
    "PositivityError",
    "RegularityError",
    "SolverError",
    "SamplePath",
    "discretize",
    "dyadic_grid",
    "RegularityBudget",
    "ShiftModel",
    "closed_form_mimic",
    "gronwall_constant",
    "PathTable",
    "SolverOptions",
    "Trajectory",
    "gronwall_gap_bound",
    "solve_backward",
    "TreatmentTree",
    "figure1_tree",
    "g_compute",
    "Dataset",
    "Scenario",
    "simulate_counterfactual",
    "simulate_observed",
    "ScoreSpec",
    "estimate_psi",
    "score_statistic",
    "test_no_effect",
    "mimicry_check",
]
