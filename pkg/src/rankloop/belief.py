"""Linear offline-to-online transfer models and their calibration.

Each relation maps an offline metric uplift to a predicted online uplift via
``slope * u + intercept``. Routine drift is absorbed by per-round LMS updates;
structural breaks are handled by bounded intercept jumps proposed externally.
The slope is never touched by any jump path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ConfigurationError, DegenerateRelationError, InvalidInputError

DEFAULT_ETA = 0.2
INTERCEPT_JUMP_LIMIT = 0.1
DEFAULT_ALPHA_MIN = 1e-6


@dataclass(frozen=True)
class TransferRelation:
    relation_key: str
    slope: float = 1.0
    intercept: float = 0.0
    eta: float = DEFAULT_ETA

    def __post_init__(self) -> None:
        if not 0.0 < self.eta < 1.0:
            raise ConfigurationError(f"eta must be in (0, 1), got {self.eta}")


@dataclass(frozen=True)
class TransferObservation:
    relation_key: str
    episode_key: str
    offline_uplift: float
    online_uplift: float
    beta_at_observation: float


@dataclass(frozen=True)
class TargetRange:
    metric_name: str
    offline_low: float
    offline_high: float

    def __post_init__(self) -> None:
        if self.offline_low > self.offline_high:
            raise InvalidInputError(
                f"target range inverted: [{self.offline_low}, {self.offline_high}]"
            )


def predict_online(relation: TransferRelation, u_off: float) -> float:
    return relation.slope * u_off + relation.intercept


def lms_update(
    relation: TransferRelation, u_off: float, u_on: float
) -> tuple[TransferRelation, float]:
    """One least-mean-squares step; returns the updated relation and the error.

    The prediction error is computed from the pre-update state and drives both
    the slope and the intercept.
    """
    if not (math.isfinite(u_off) and math.isfinite(u_on)):
        raise InvalidInputError("non-finite observation")
    error = u_on - predict_online(relation, u_off)
    updated = replace(
        relation,
        slope=relation.slope + relation.eta * error * u_off,
        intercept=relation.intercept + relation.eta * error,
    )
    return updated, error


def apply_intercept_jump(relation: TransferRelation, delta: float) -> TransferRelation:
    """Shift the intercept by ``delta`` clamped to the jump limit; slope untouched."""
    clamped = max(-INTERCEPT_JUMP_LIMIT, min(INTERCEPT_JUMP_LIMIT, delta))
    return replace(relation, intercept=relation.intercept + clamped)


def derive_target_range(
    relation: TransferRelation,
    direction: str,
    online_bound: float,
    metric_name: str | None = None,
    alpha_min: float = DEFAULT_ALPHA_MIN,
) -> TargetRange:
    """Invert the transfer model: the offline interval mapping to an acceptable
    online outcome.

    For an online floor ``b`` with positive slope the acceptable region is
    ``u >= (b - intercept) / slope``; the boundary flips side when the slope is
    negative or the bound is a ceiling.
    """
    if direction not in ("floor", "ceiling"):
        raise ConfigurationError(f"bad bound direction {direction!r}")
    if abs(relation.slope) < alpha_min:
        raise DegenerateRelationError(
            f"slope {relation.slope} of {relation.relation_key!r} below {alpha_min}"
        )
    boundary = (online_bound - relation.intercept) / relation.slope
    lower_side = (direction == "floor") == (relation.slope > 0)
    name = metric_name if metric_name is not None else relation.relation_key
    if lower_side:
        return TargetRange(name, offline_low=boundary, offline_high=math.inf)
    return TargetRange(name, offline_low=-math.inf, offline_high=boundary)
