from __future__ import annotations

import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rankloop.errors import ConfigurationError
from rankloop.objective import LAMBDA_MAX, LAMBDA_MIN
from rankloop.preference import (
    STEP_DOWN,
    STEP_UP,
    PenaltyState,
    apply_round,
    penalty_step,
    update_weight,
    violation_pressure,
)


class TestViolationPressure:
    def test_hand_value(self):
        assert violation_pressure(0.02, 0.05) == pytest.approx(0.4)

    def test_zero_violation(self):
        assert violation_pressure(0.0, 0.05) == 0.0

    def test_threshold_is_unit_pressure(self):
        assert violation_pressure(0.05, 0.05) == pytest.approx(1.0)

    def test_bad_threshold_rejected(self):
        with pytest.raises(ConfigurationError):
            violation_pressure(0.1, 0.0)


class TestPenaltyStep:
    def test_positive_pressure_tightens(self):
        assert penalty_step(0.4) == STEP_UP

    def test_zero_pressure_relaxes(self):
        assert penalty_step(0.0) == -STEP_DOWN

    def test_negative_pressure_relaxes(self):
        assert penalty_step(-0.3) == -STEP_DOWN


class TestUpdateWeight:
    def test_hand_value(self):
        assert update_weight(20000.0, 0.25) == pytest.approx(20000.0 * math.exp(0.25))

    def test_ceiling_clamp(self):
        assert update_weight(75000.0, 0.25) == LAMBDA_MAX

    def test_floor_clamp(self):
        assert update_weight(1000.0, -0.08) == LAMBDA_MIN

    def test_scale_invariance(self):
        # Equal steps produce equal multiplicative factors at any magnitude.
        small = update_weight(2000.0, 0.25) / 2000.0
        large = update_weight(50000.0, 0.25) / 50000.0
        assert small == pytest.approx(large, rel=1e-12)

    @given(st.floats(LAMBDA_MIN, LAMBDA_MAX), st.floats(-5, 5, allow_nan=False))
    def test_clamp_always_holds(self, weight, step):
        assert LAMBDA_MIN <= update_weight(weight, step) <= LAMBDA_MAX

    def test_asymmetry_net_sign_flips_at_four_satisfactions(self):
        # One violation then k satisfactions: net log change 0.25 - 0.08k,
        # first non-positive at k = 4.
        for k in range(0, 7):
            net = STEP_UP - STEP_DOWN * k
            assert (net <= 0) == (k >= 4)
        weight = 20000.0
        weight = update_weight(weight, penalty_step(1.0))
        for _ in range(4):
            weight = update_weight(weight, penalty_step(0.0))
        assert weight == pytest.approx(20000.0 * math.exp(0.25 - 0.08 * 4), rel=1e-12)
        assert weight < 20000.0


def fresh_state(weights=None):
    return PenaltyState(weights=dict(weights or {"a": 20000.0, "b": 20000.0}))


class TestApplyRound:
    THRESHOLDS = {"a": 0.05, "b": 0.05}

    def test_normal_round_mixed_constraints(self):
        state, updates = apply_round(
            fresh_state(), {"a": 0.02, "b": 0.0}, self.THRESHOLDS, belief_update_magnitude=0.0
        )
        assert state.weights["a"] == pytest.approx(20000.0 * math.exp(STEP_UP))
        assert state.weights["b"] == pytest.approx(20000.0 * math.exp(-STEP_DOWN))
        assert len(updates) == 2
        by_id = {u.constraint_id: u for u in updates}
        assert by_id["a"].pressure == pytest.approx(0.4)
        assert by_id["a"].step == STEP_UP
        assert by_id["b"].step == -STEP_DOWN

    def test_frozen_round_decrements_and_changes_nothing(self):
        state = fresh_state()
        state.frozen_rounds_remaining = 1
        after, updates = apply_round(
            state, {"a": 0.02, "b": 0.0}, self.THRESHOLDS, belief_update_magnitude=0.0
        )
        assert after.weights == state.weights
        assert after.frozen_rounds_remaining == 0
        assert updates == []

    def test_large_belief_update_engages_freeze(self):
        after, updates = apply_round(
            fresh_state(), {"a": 0.02, "b": 0.0}, self.THRESHOLDS, belief_update_magnitude=0.08
        )
        assert after.frozen_rounds_remaining == 1
        assert after.weights == {"a": 20000.0, "b": 20000.0}
        assert updates == []

    def test_threshold_boundary_freezes(self):
        after, updates = apply_round(
            fresh_state(), {"a": 0.0, "b": 0.0}, self.THRESHOLDS, belief_update_magnitude=0.05
        )
        assert after.frozen_rounds_remaining == 1
        assert updates == []

    def test_freeze_exclusivity_no_update_rows(self):
        state = fresh_state()
        _, trigger_round = apply_round(state, {"a": 0.04}, self.THRESHOLDS, 0.2)
        assert trigger_round == []

    def test_pressure_recorded(self):
        state, _ = apply_round(fresh_state(), {"a": 0.05, "b": 0.0}, self.THRESHOLDS, 0.0)
        assert state.last_pressure == {"a": 1.0, "b": 0.0}

    def test_clamp_under_random_sequences(self):
        rng = random.Random(5)
        state = fresh_state({"a": 20000.0})
        for _ in range(2000):
            violation = max(0.0, rng.uniform(-0.05, 0.1))
            state, _ = apply_round(state, {"a": violation}, {"a": 0.05}, 0.0)
            assert LAMBDA_MIN <= state.weights["a"] <= LAMBDA_MAX
