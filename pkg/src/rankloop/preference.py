"""Constraint penalty-weight adaptation.

Observed violations are normalized into pressure, pressure picks an asymmetric
log-space step (tightening is roughly 3x faster than relaxing), and weights
move multiplicatively inside a global clamp. A large same-round belief update
freezes this channel for a round so the next observation stays attributable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .objective import LAMBDA_MAX, LAMBDA_MIN

STEP_UP = 0.25
STEP_DOWN = 0.08
DEFAULT_FREEZE_THRESHOLD = 0.05


@dataclass
class PenaltyState:
    weights: dict[str, float]
    last_pressure: dict[str, float] = field(default_factory=dict)
    frozen_rounds_remaining: int = 0


@dataclass(frozen=True)
class WeightUpdate:
    constraint_id: str
    pressure: float
    step: float
    old_weight: float
    new_weight: float


def violation_pressure(violation: float, threshold: float) -> float:
    """Violation magnitude in units of its acceptable threshold."""
    if threshold <= 0:
        raise ConfigurationError(f"violation threshold must be positive, got {threshold}")
    return violation / threshold


def penalty_step(pressure: float) -> float:
    """Log-space step: tighten on any positive pressure, relax otherwise."""
    return STEP_UP if pressure > 0 else -STEP_DOWN


def update_weight(
    weight: float,
    step: float,
    lambda_min: float = LAMBDA_MIN,
    lambda_max: float = LAMBDA_MAX,
) -> float:
    return min(lambda_max, max(lambda_min, weight * math.exp(step)))


def apply_round(
    state: PenaltyState,
    violations: dict[str, float],
    thresholds: dict[str, float],
    belief_update_magnitude: float,
    freeze_threshold: float = DEFAULT_FREEZE_THRESHOLD,
    lambda_min: float = LAMBDA_MIN,
    lambda_max: float = LAMBDA_MAX,
) -> tuple[PenaltyState, list[WeightUpdate]]:
    """One calibration round over all constraints.

    A round that is frozen (either a pending freeze from a previous round or a
    belief update at or above the freeze threshold this round) changes no
    weight and emits no update records.
    """
    if state.frozen_rounds_remaining > 0:
        return (
            PenaltyState(
                weights=dict(state.weights),
                last_pressure=dict(state.last_pressure),
                frozen_rounds_remaining=state.frozen_rounds_remaining - 1,
            ),
            [],
        )
    if belief_update_magnitude >= freeze_threshold:
        return (
            PenaltyState(
                weights=dict(state.weights),
                last_pressure=dict(state.last_pressure),
                frozen_rounds_remaining=1,
            ),
            [],
        )
    weights = dict(state.weights)
    pressures = dict(state.last_pressure)
    updates: list[WeightUpdate] = []
    for constraint_id, violation in violations.items():
        pressure = violation_pressure(violation, thresholds[constraint_id])
        step = penalty_step(pressure)
        old = weights[constraint_id]
        new = update_weight(old, step, lambda_min, lambda_max)
        weights[constraint_id] = new
        pressures[constraint_id] = pressure
        updates.append(WeightUpdate(constraint_id, pressure, step, old, new))
    return (
        PenaltyState(weights=weights, last_pressure=pressures, frozen_rounds_remaining=0),
        updates,
    )
