"""Multi-objective Bayesian optimisation: advisors, Pareto fronts and hypervolume."""
from pipeforge.mobo.advisor import Advisor, DomainExhausted, DuplicateAssignment, Suggestion, n_bo_slots
from pipeforge.mobo.pareto import (
    ParetoFront,
    RefPointViolation,
    ehvi,
    expected_improvement,
    hypervolume,
    hypervolume_2d,
    hypervolume_improvement,
    hypervolume_mc,
    pareto_filter,
    pareto_mask,
    weighted_scalar_loss,
)

__all__ = [
    "Advisor", "DomainExhausted", "DuplicateAssignment", "Suggestion", "n_bo_slots", "ParetoFront", "RefPointViolation", "ehvi",
    "expected_improvement", "hypervolume", "hypervolume_2d", "hypervolume_improvement", "hypervolume_mc",
    "pareto_filter", "pareto_mask", "weighted_scalar_loss",
]
