"""Composite search objective: scaled relative uplift minus quadratic penalties."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigurationError, DegenerateBaselineError, InvalidInputError

# Reward scaling for the uplift term. Single source of truth; nothing else in
# the package may restate this constant.
REWARD_COEFFICIENT = 10.0

LAMBDA_MIN = 1000.0
LAMBDA_MAX = 80000.0

ParameterVector = dict[str, float]


def validate_parameter_vector(
    vector: ParameterVector, bounds: dict[str, tuple[float, float]]
) -> ParameterVector:
    """Check a candidate vector against the active configuration.

    The vector must carry exactly the configured names, every value finite and
    inside its search bounds.
    """
    if set(vector) != set(bounds):
        raise InvalidInputError(
            f"parameter names {sorted(vector)} do not match configured {sorted(bounds)}"
        )
    for name, value in vector.items():
        low, high = bounds[name]
        if not math.isfinite(value):
            raise InvalidInputError(f"non-finite value for parameter {name!r}")
        if not low <= value <= high:
            raise InvalidInputError(
                f"parameter {name!r}={value} outside bounds [{low}, {high}]"
            )
    return vector


@dataclass
class ConstraintSpec:
    """One constrained metric.

    ``bound`` is the static offline bound. When ``online_bound`` is set and a
    calibrated transfer relation exists for ``metric_name``, the pipeline
    derives the effective offline bound from it instead (falling back to
    ``bound`` if the relation is degenerate). ``value_kind`` selects whether
    the constraint reads the metric's relative uplift or its raw value.
    """

    constraint_id: str
    metric_name: str
    direction: str  # "floor" | "ceiling"
    bound: float
    violation_threshold: float
    penalty_weight: float = 20000.0
    online_bound: float | None = None
    value_kind: str = "uplift"  # "uplift" | "raw"

    def __post_init__(self) -> None:
        if self.direction not in ("floor", "ceiling"):
            raise ConfigurationError(f"bad constraint direction {self.direction!r}")
        if self.violation_threshold <= 0:
            raise ConfigurationError("violation_threshold must be positive")
        if not LAMBDA_MIN <= self.penalty_weight <= LAMBDA_MAX:
            raise ConfigurationError(
                f"penalty weight {self.penalty_weight} outside "
                f"[{LAMBDA_MIN}, {LAMBDA_MAX}]"
            )


@dataclass
class ObjectiveResult:
    value: float
    uplift_term: float
    violations: dict[str, float] = field(default_factory=dict)
    penalties: dict[str, float] = field(default_factory=dict)


def relative_uplift(value: float, base: float) -> float:
    """(value - base) / |base|; undefined for a zero baseline."""
    if base == 0.0:
        raise DegenerateBaselineError("baseline metric is zero")
    if not (math.isfinite(value) and math.isfinite(base)):
        raise InvalidInputError("non-finite uplift inputs")
    return (value - base) / abs(base)


def constraint_violation(metric_value: float, spec: ConstraintSpec, bound: float | None = None) -> float:
    """Violation magnitude, >= 0, zero when the constraint is satisfied.

    ``bound`` overrides the spec's static bound (used with calibrated target
    ranges).
    """
    b = spec.bound if bound is None else bound
    if spec.direction == "floor":
        return max(0.0, b - metric_value)
    return max(0.0, metric_value - b)


def composite_objective(
    uplift: float,
    violations: dict[str, float],
    specs: dict[str, ConstraintSpec],
) -> ObjectiveResult:
    """J = REWARD_COEFFICIENT * uplift - sum of lambda_j * v_j**2."""
    if not math.isfinite(uplift):
        raise InvalidInputError("non-finite uplift")
    penalties: dict[str, float] = {}
    total_penalty = 0.0
    for constraint_id, v in violations.items():
        if not math.isfinite(v) or v < 0:
            raise InvalidInputError(f"bad violation {v} for {constraint_id!r}")
        spec = specs[constraint_id]
        penalty = spec.penalty_weight * v * v
        penalties[constraint_id] = penalty
        total_penalty += penalty
    value = REWARD_COEFFICIENT * uplift - total_penalty
    return ObjectiveResult(
        value=value,
        uplift_term=uplift,
        violations=dict(violations),
        penalties=penalties,
    )
