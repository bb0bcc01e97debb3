from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rankloop.errors import (
    ConfigurationError,
    DegenerateBaselineError,
    InvalidInputError,
)
from rankloop.objective import (
    REWARD_COEFFICIENT,
    ConstraintSpec,
    composite_objective,
    constraint_violation,
    relative_uplift,
    validate_parameter_vector,
)


def floor_spec(bound=-0.05, weight=20000.0, threshold=0.05):
    return ConstraintSpec(
        constraint_id="c",
        metric_name="m",
        direction="floor",
        bound=bound,
        violation_threshold=threshold,
        penalty_weight=weight,
    )


class TestRelativeUplift:
    def test_hand_values(self):
        assert relative_uplift(0.22, 0.20) == pytest.approx(0.10)
        assert relative_uplift(0.18, 0.20) == pytest.approx(-0.10)

    def test_identity_is_zero(self):
        assert relative_uplift(0.37, 0.37) == 0.0

    def test_negative_baseline_uses_magnitude(self):
        assert relative_uplift(-0.1, -0.2) == pytest.approx(0.5)

    def test_zero_baseline_rejected(self):
        with pytest.raises(DegenerateBaselineError):
            relative_uplift(0.1, 0.0)


class TestConstraintViolation:
    def test_floor_violated(self):
        assert constraint_violation(-0.06, floor_spec(bound=-0.05)) == pytest.approx(0.01)

    def test_floor_boundary_is_zero(self):
        assert constraint_violation(-0.05, floor_spec(bound=-0.05)) == 0.0

    def test_ceiling_satisfied(self):
        spec = ConstraintSpec("c", "m", "ceiling", 0.10, 0.05)
        assert constraint_violation(0.02, spec) == 0.0

    def test_ceiling_violated(self):
        spec = ConstraintSpec("c", "m", "ceiling", 0.10, 0.05)
        assert constraint_violation(0.13, spec) == pytest.approx(0.03)

    def test_bound_override(self):
        assert constraint_violation(-0.06, floor_spec(bound=-0.05), bound=-0.07) == 0.0

    def test_bad_direction_rejected(self):
        with pytest.raises(ConfigurationError):
            ConstraintSpec("c", "m", "sideways", 0.0, 0.05)

    def test_bad_threshold_rejected(self):
        with pytest.raises(ConfigurationError):
            ConstraintSpec("c", "m", "floor", 0.0, 0.0)

    def test_weight_outside_clamp_rejected(self):
        with pytest.raises(ConfigurationError):
            floor_spec(weight=500.0)


class TestCompositeObjective:
    def test_uplift_only(self):
        result = composite_objective(0.1, {}, {})
        assert result.value == pytest.approx(1.0)
        assert result.penalties == {}

    def test_quadratic_penalty_ratio_is_100(self):
        spec = floor_spec(weight=20000.0)
        big = composite_objective(0.0, {"c": 0.10}, {"c": spec}).penalties["c"]
        small = composite_objective(0.0, {"c": 0.01}, {"c": spec}).penalties["c"]
        assert big / small == pytest.approx(100.0, rel=1e-9)

    def test_hand_evaluated_round(self):
        spec = floor_spec(weight=15000.0)
        result = composite_objective(0.1, {"c": 0.02}, {"c": spec})
        assert result.penalties["c"] == pytest.approx(6.0)
        assert result.value == pytest.approx(-5.0)

    def test_value_identity(self):
        spec = floor_spec(weight=20000.0)
        result = composite_objective(0.07, {"c": 0.03}, {"c": spec})
        assert result.value == pytest.approx(
            REWARD_COEFFICIENT * result.uplift_term - sum(result.penalties.values()),
            abs=1e-9,
        )

    def test_satisfied_constraint_contributes_zero(self):
        spec = floor_spec()
        result = composite_objective(0.1, {"c": 0.0}, {"c": spec})
        assert result.penalties["c"] == 0.0
        assert result.value == pytest.approx(1.0)

    @given(st.floats(0.0, 0.5), st.floats(0.001, 0.5))
    def test_monotone_penalty(self, v, bump):
        spec = floor_spec()
        lower = composite_objective(0.1, {"c": v}, {"c": spec}).value
        higher = composite_objective(0.1, {"c": v + bump}, {"c": spec}).value
        assert higher < lower

    @given(st.floats(1e-4, 0.3), st.floats(0.1, 10.0))
    def test_quadratic_scaling(self, v, c):
        spec = floor_spec()
        base = composite_objective(0.0, {"c": v}, {"c": spec}).penalties["c"]
        scaled = composite_objective(0.0, {"c": c * v}, {"c": spec}).penalties["c"]
        assert scaled / base == pytest.approx(c * c, rel=1e-9)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            composite_objective(float("nan"), {}, {})
        with pytest.raises(InvalidInputError):
            composite_objective(0.0, {"c": float("inf")}, {"c": floor_spec()})


class TestParameterVector:
    BOUNDS = {"w1": (0.0, 5.0), "w2": (0.1, 2.0)}

    def test_valid_vector_passes(self):
        vec = {"w1": 1.0, "w2": 0.5}
        assert validate_parameter_vector(vec, self.BOUNDS) is vec

    def test_wrong_names_rejected(self):
        with pytest.raises(InvalidInputError):
            validate_parameter_vector({"w1": 1.0}, self.BOUNDS)
        with pytest.raises(InvalidInputError):
            validate_parameter_vector({"w1": 1.0, "w2": 0.5, "w3": 1.0}, self.BOUNDS)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(InvalidInputError):
            validate_parameter_vector({"w1": 9.0, "w2": 0.5}, self.BOUNDS)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            validate_parameter_vector({"w1": float("nan"), "w2": 0.5}, self.BOUNDS)
