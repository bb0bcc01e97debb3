from __future__ import annotations

import sqlite3

import pytest

from rankloop.belief import TransferRelation
from rankloop.config import RelationSpec
from rankloop.errors import (
    IdempotencyError,
    MemoryIntegrityError,
    MigrationRequiredError,
    MissingEpisodeError,
)
from rankloop.memory import SCHEMA_VERSION, TABLES, MemoryDb, init_schema

RELATIONS = [
    RelationSpec("gmv~I_gmv", "gmv", "I_gmv"),
    RelationSpec("orders~I_order", "orders", "I_order"),
]


@pytest.fixture
def db(tmp_path):
    handle = init_schema(tmp_path / "memory.db", RELATIONS)
    yield handle
    handle.close()


def offline_payload(j=1.2):
    return {
        "objective": j,
        "params": {"w": 1.0},
        "metrics": {"I_gmv": 0.4, "I_order": 0.3},
        "uplifts": {"I_gmv": 0.2, "I_order": 0.1},
    }


def candidates():
    return [{"params": {"w": float(r)}, "metrics": {"value": 1.0 - r / 10}} for r in range(5)]


class TestInitSchema:
    def test_fresh_store_has_seven_empty_tables(self, db):
        counts = db.table_counts()
        assert set(counts) == set(TABLES)
        assert all(count == 0 for count in counts.values())

    def test_reopen_preserves_rows(self, tmp_path):
        path = tmp_path / "memory.db"
        with init_schema(path, RELATIONS) as handle:
            handle.record_offline("ep1", offline_payload(), candidates())
        with init_schema(path, RELATIONS) as handle:
            assert handle.table_counts()["episodes"] == 1

    def test_version_mismatch_raises(self, tmp_path):
        path = tmp_path / "memory.db"
        init_schema(path, RELATIONS).close()
        conn = sqlite3.connect(path)
        conn.execute(f"PRAGMA user_version = {SCHEMA_VERSION + 1}")
        conn.commit()
        conn.close()
        with pytest.raises(MigrationRequiredError):
            init_schema(path, RELATIONS)

    def test_corrupt_file_raises_integrity_error(self, tmp_path):
        path = tmp_path / "memory.db"
        path.write_bytes(b"this is not a database at all" * 40)
        with pytest.raises(MemoryIntegrityError):
            init_schema(path, RELATIONS)


class TestRecordOffline:
    def test_writes_episode_and_five_candidates(self, db):
        db.record_offline("ep1", offline_payload(), candidates())
        counts = db.table_counts()
        assert counts["episodes"] == 1
        assert counts["offline_candidates"] == 5
        assert db.episode("ep1")["status"] == "offline_recorded"

    def test_repeat_identical_call_is_noop(self, db):
        db.record_offline("ep1", offline_payload(), candidates())
        before = db.logical_snapshot()
        db.record_offline("ep1", offline_payload(), candidates())
        assert db.logical_snapshot() == before

    def test_conflicting_payload_raises(self, db):
        db.record_offline("ep1", offline_payload(1.2), candidates())
        with pytest.raises(IdempotencyError):
            db.record_offline("ep1", offline_payload(9.9), candidates())


class TestRecordOnline:
    UPLIFTS = {"gmv": 0.05, "orders": 0.02}

    def test_status_and_observations(self, db):
        db.record_offline("ep1", offline_payload(), candidates())
        db.record_online("ep1", self.UPLIFTS)
        episode = db.episode("ep1")
        assert episode["status"] == "online_recorded"
        assert episode["online_uplifts"] == self.UPLIFTS
        assert db.table_counts()["prior_observations"] == 2
        obs = db.observation("gmv~I_gmv", "ep1")
        assert obs["offline_uplift"] == 0.2
        assert obs["online_uplift"] == 0.05

    def test_repeat_identical_call_adds_nothing(self, db):
        db.record_offline("ep1", offline_payload(), candidates())
        db.record_online("ep1", self.UPLIFTS)
        before = db.logical_snapshot()
        db.record_online("ep1", self.UPLIFTS)
        assert db.logical_snapshot() == before

    def test_conflicting_uplifts_raise(self, db):
        db.record_offline("ep1", offline_payload(), candidates())
        db.record_online("ep1", self.UPLIFTS)
        with pytest.raises(IdempotencyError):
            db.record_online("ep1", {"gmv": 0.9})

    def test_unknown_episode_raises(self, db):
        with pytest.raises(MissingEpisodeError):
            db.record_online("nope", self.UPLIFTS)

    def test_beta_at_observation_snapshots_current_intercept(self, db):
        rel = TransferRelation("gmv~I_gmv", 1.0, 0.0)
        jumped = TransferRelation("gmv~I_gmv", 1.0, 0.04)
        db.record_relation_update(rel, jumped, "lms_regression", "k1")
        db.record_offline("ep1", offline_payload(), candidates())
        db.record_online("ep1", self.UPLIFTS)
        assert db.observation("gmv~I_gmv", "ep1")["beta_at_observation"] == 0.04


class TestStatusChain:
    def test_deploy_is_monotone(self, db):
        db.record_offline("ep1", offline_payload(), candidates())
        db.mark_deployed("ep1")
        assert db.episode("ep1")["status"] == "deployed"
        db.record_online("ep1", {"gmv": 0.01})
        db.mark_deployed("ep1")  # must not regress
        assert db.episode("ep1")["status"] == "online_recorded"


class TestObservations:
    def test_duplicate_insert_is_silent_noop(self, db):
        db.append_observation("gmv~I_gmv", "ep1", 0.1, 0.05, 0.0)
        db.append_observation("gmv~I_gmv", "ep1", 0.9, 0.9, 0.9)
        assert db.table_counts()["prior_observations"] == 1
        assert db.observation("gmv~I_gmv", "ep1")["offline_uplift"] == 0.1

    def test_two_relations_same_episode(self, db):
        db.append_observation("gmv~I_gmv", "ep1", 0.1, 0.05, 0.0)
        db.append_observation("orders~I_order", "ep1", 0.2, 0.08, 0.0)
        assert db.table_counts()["prior_observations"] == 2


class TestRelationState:
    def test_defaults_are_identity_priors(self, db):
        relations = db.current_relations()
        assert set(relations) == {"gmv~I_gmv", "orders~I_order"}
        assert all(r.slope == 1.0 and r.intercept == 0.0 for r in relations.values())

    def test_update_persists_and_audits(self, db):
        old = db.current_relations()["gmv~I_gmv"]
        new = TransferRelation("gmv~I_gmv", 0.9, -0.01)
        assert db.record_relation_update(old, new, "lms_regression", "lms:ep1:gmv", error=-0.05)
        assert db.current_relations()["gmv~I_gmv"].slope == 0.9
        assert db.table_counts()["prior_update_history"] == 1

    def test_replayed_update_skipped(self, db):
        old = db.current_relations()["gmv~I_gmv"]
        new = TransferRelation("gmv~I_gmv", 0.9, -0.01)
        db.record_relation_update(old, new, "lms_regression", "dup-key")
        newer = TransferRelation("gmv~I_gmv", 0.5, 0.5)
        assert not db.record_relation_update(new, newer, "lms_regression", "dup-key")
        assert db.current_relations()["gmv~I_gmv"].slope == 0.9
        assert db.table_counts()["prior_update_history"] == 1

    def test_every_state_change_has_exactly_one_history_row(self, db):
        rel = db.current_relations()["gmv~I_gmv"]
        for k in range(6):
            new = TransferRelation("gmv~I_gmv", rel.slope, rel.intercept + 0.01)
            db.record_relation_update(rel, new, "lms_regression", f"k{k}")
            rel = new
        assert db.table_counts()["prior_update_history"] == 6


class TestPenaltyHistory:
    def test_current_weights_follow_history(self, db):
        seeds = {"order_guard": 20000.0}
        assert db.current_penalty_weights(seeds) == seeds
        db.record_penalty_update("order_guard", 0.4, 0.25, 20000.0, 25680.5, "p1")
        db.record_penalty_update("order_guard", 0.0, -0.08, 25680.5, 23706.0, "p2")
        assert db.current_penalty_weights(seeds) == {"order_guard": 23706.0}

    def test_replay_is_noop(self, db):
        assert db.record_penalty_update("order_guard", 0.4, 0.25, 1.0, 2.0, "p1")
        assert not db.record_penalty_update("order_guard", 0.4, 0.25, 2.0, 4.0, "p1")
        assert db.table_counts()["penalty_weight_update_history"] == 1


class TestEvents:
    def test_append_and_dedup(self, db):
        assert db.append_event("publish", "round1:publish", {"params": {"w": 1.0}})
        assert not db.append_event("publish", "round1:publish", {"params": {"w": 2.0}})
        assert db.table_counts()["memory_events"] == 1


class TestQueryRecent:
    def fill_episodes(self, db, n):
        for k in range(n):
            db.record_offline(f"2026_{k:04d}", offline_payload(j=float(k)), [])

    def test_caps_respected(self, db):
        self.fill_episodes(db, 25)
        episodes, _ = db.query_recent(20, 30)
        assert len(episodes) == 20
        assert episodes[0]["episode_key"] == "2026_0024"  # newest first

    def test_under_cap_returns_all(self, db):
        self.fill_episodes(db, 3)
        episodes, updates = db.query_recent(20, 30)
        assert len(episodes) == 3
        assert updates == []

    def test_empty_store(self, db):
        assert db.query_recent() == ([], [])

    def test_update_history_newest_first(self, db):
        rel = db.current_relations()["gmv~I_gmv"]
        for k in range(4):
            new = TransferRelation("gmv~I_gmv", 1.0, 0.01 * k)
            db.record_relation_update(rel, new, "lms_regression", f"u{k}")
            rel = new
        _, updates = db.query_recent()
        assert [u["new_intercept"] for u in updates] == [0.03, 0.02, 0.01, 0.0]


class TestStorageGrowth:
    def test_growth_per_round_is_bounded(self, tmp_path):
        path = tmp_path / "memory.db"
        db = init_schema(path, RELATIONS)
        db.checkpoint()
        base = path.stat().st_size
        rounds = 20
        for k in range(rounds):
            key = f"ep{k:03d}"
            db.record_offline(key, offline_payload(float(k)), candidates())
            db.record_online(key, {"gmv": 0.01 * k, "orders": 0.0})
            rel = db.current_relations()["gmv~I_gmv"]
            db.record_relation_update(
                rel, TransferRelation("gmv~I_gmv", 1.0, 0.001 * k), "lms_regression", f"lms{k}"
            )
            db.record_penalty_update("order_guard", 0.0, -0.08, 20000.0, 19000.0, f"pen{k}")
            db.append_event("round_completed", f"round{k}", {"round": k})
        db.checkpoint()
        db.close()
        per_round = (path.stat().st_size - base) / rounds
        assert per_round < 10_000
