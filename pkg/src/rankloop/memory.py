"""Persistent round memory: a single-file relational store with 7 tables.

Write discipline: every mutation is either an idempotent upsert keyed by its
natural identity or an append gated on a unique idempotency key, so replaying
a completed round's write sequence is a no-op. History tables and the event
log are never updated or deleted.
"""

from __future__ import annotations

import json
import sqlite3
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

from .belief import TransferRelation
from .config import RelationSpec
from .errors import (
    IdempotencyError,
    MemoryIntegrityError,
    MigrationRequiredError,
    MissingEpisodeError,
)

SCHEMA_VERSION = 1

STATUS_OFFLINE = "offline_recorded"
STATUS_DEPLOYED = "deployed"
STATUS_ONLINE = "online_recorded"
_STATUS_ORDER = {STATUS_OFFLINE: 0, STATUS_DEPLOYED: 1, STATUS_ONLINE: 2}

TABLES = (
    "episodes",
    "offline_candidates",
    "prior_relations",
    "prior_observations",
    "prior_update_history",
    "penalty_weight_update_history",
    "memory_events",
)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS episodes (
    episode_key     TEXT PRIMARY KEY,
    offline_metrics TEXT NOT NULL,
    online_uplifts  TEXT,
    status          TEXT NOT NULL,
    created_at      TEXT NOT NULL,
    updated_at      TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS offline_candidates (
    episode_key TEXT NOT NULL,
    rank        INTEGER NOT NULL,
    params      TEXT NOT NULL,
    metrics     TEXT NOT NULL,
    PRIMARY KEY (episode_key, rank)
);
CREATE TABLE IF NOT EXISTS prior_relations (
    relation_key TEXT PRIMARY KEY,
    slope        REAL NOT NULL,
    intercept    REAL NOT NULL,
    eta          REAL NOT NULL,
    updated_at   TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS prior_observations (
    relation_key        TEXT NOT NULL,
    episode_key         TEXT NOT NULL,
    offline_uplift      REAL NOT NULL,
    online_uplift       REAL NOT NULL,
    beta_at_observation REAL NOT NULL,
    created_at          TEXT NOT NULL,
    PRIMARY KEY (relation_key, episode_key)
);
CREATE TABLE IF NOT EXISTS prior_update_history (
    id              INTEGER PRIMARY KEY AUTOINCREMENT,
    relation_key    TEXT NOT NULL,
    method          TEXT NOT NULL,
    old_slope       REAL NOT NULL,
    new_slope       REAL NOT NULL,
    old_intercept   REAL NOT NULL,
    new_intercept   REAL NOT NULL,
    error           REAL,
    episode_key     TEXT,
    idempotency_key TEXT NOT NULL UNIQUE,
    created_at      TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS penalty_weight_update_history (
    id                INTEGER PRIMARY KEY AUTOINCREMENT,
    constraint_metric TEXT NOT NULL,
    pressure          REAL NOT NULL,
    step              REAL NOT NULL,
    old_weight        REAL NOT NULL,
    new_weight        REAL NOT NULL,
    idempotency_key   TEXT NOT NULL UNIQUE,
    created_at        TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS memory_events (
    event_id        INTEGER PRIMARY KEY AUTOINCREMENT,
    event_type      TEXT NOT NULL,
    idempotency_key TEXT NOT NULL UNIQUE,
    metadata        TEXT NOT NULL,
    created_at      TEXT NOT NULL
);
"""


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class MemoryDb:
    """Single-writer handle over the round memory file."""

    def __init__(self, path: str | Path, relations: Iterable[RelationSpec] = ()):
        self.path = Path(path)
        self.relations = list(relations)
        existed = self.path.exists() and self.path.stat().st_size > 0
        self._conn = sqlite3.connect(self.path)
        self._conn.row_factory = sqlite3.Row
        try:
            if existed:
                check = self._conn.execute("PRAGMA quick_check").fetchone()[0]
                if check != "ok":
                    raise MemoryIntegrityError(f"{self.path}: {check}")
            version = self._conn.execute("PRAGMA user_version").fetchone()[0]
            if existed and version != SCHEMA_VERSION:
                raise MigrationRequiredError(
                    f"{self.path} has schema version {version}, expected {SCHEMA_VERSION}"
                )
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.executescript(_SCHEMA)
            self._conn.execute(f"PRAGMA user_version = {SCHEMA_VERSION}")
            self._conn.commit()
        except sqlite3.DatabaseError as exc:
            self._conn.close()
            raise MemoryIntegrityError(f"{self.path}: {exc}") from exc

    def close(self) -> None:
        self._conn.close()

    def __enter__(self) -> "MemoryDb":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    # -- episodes ---------------------------------------------------------

    def record_offline(
        self, episode_key: str, offline_metrics: dict, candidates: list[dict]
    ) -> None:
        """Create the episode row plus its ranked candidate rows.

        Calling again with the same payload is a no-op; a different payload
        for an existing key is a replay conflict.
        """
        payload = _canonical(offline_metrics)
        row = self._conn.execute(
            "SELECT offline_metrics FROM episodes WHERE episode_key = ?", (episode_key,)
        ).fetchone()
        if row is not None:
            if row["offline_metrics"] != payload:
                raise IdempotencyError(
                    f"episode {episode_key!r} already recorded with different payload"
                )
            return
        now = _now()
        with self._conn:
            self._conn.execute(
                "INSERT INTO episodes VALUES (?, ?, NULL, ?, ?, ?)",
                (episode_key, payload, STATUS_OFFLINE, now, now),
            )
            for rank, candidate in enumerate(candidates[:5], start=1):
                self._conn.execute(
                    "INSERT OR IGNORE INTO offline_candidates VALUES (?, ?, ?, ?)",
                    (
                        episode_key,
                        rank,
                        _canonical(candidate.get("params", {})),
                        _canonical(candidate.get("metrics", {})),
                    ),
                )

    def mark_deployed(self, episode_key: str) -> None:
        row = self._episode_row(episode_key)
        if _STATUS_ORDER[row["status"]] >= _STATUS_ORDER[STATUS_DEPLOYED]:
            return
        with self._conn:
            self._conn.execute(
                "UPDATE episodes SET status = ?, updated_at = ? WHERE episode_key = ?",
                (STATUS_DEPLOYED, _now(), episode_key),
            )

    def record_online(self, episode_key: str, uplifts: dict[str, float]) -> None:
        """Store online uplifts, advance status, and append one observation per
        configured relation (keyed, so replays add nothing)."""
        row = self._episode_row(episode_key)
        payload = _canonical(uplifts)
        if row["status"] == STATUS_ONLINE:
            if row["online_uplifts"] != payload:
                raise IdempotencyError(
                    f"episode {episode_key!r} already online-recorded with different uplifts"
                )
        else:
            with self._conn:
                self._conn.execute(
                    "UPDATE episodes SET online_uplifts = ?, status = ?, updated_at = ? "
                    "WHERE episode_key = ?",
                    (payload, STATUS_ONLINE, _now(), episode_key),
                )
        offline = json.loads(row["offline_metrics"])
        offline_uplifts = offline.get("uplifts", {})
        betas = {r.relation_key: r.intercept for r in self.current_relations().values()}
        for rel in self.relations:
            u_off = offline_uplifts.get(rel.offline_metric)
            u_on = uplifts.get(rel.online_metric)
            if u_off is None or u_on is None:
                continue
            self.append_observation(
                rel.relation_key, episode_key, u_off, u_on, betas.get(rel.relation_key, 0.0)
            )

    def _episode_row(self, episode_key: str) -> sqlite3.Row:
        row = self._conn.execute(
            "SELECT * FROM episodes WHERE episode_key = ?", (episode_key,)
        ).fetchone()
        if row is None:
            raise MissingEpisodeError(episode_key)
        return row

    def episode(self, episode_key: str) -> dict:
        row = self._episode_row(episode_key)
        return {
            "episode_key": row["episode_key"],
            "offline_metrics": json.loads(row["offline_metrics"]),
            "online_uplifts": json.loads(row["online_uplifts"]) if row["online_uplifts"] else None,
            "status": row["status"],
            "created_at": row["created_at"],
        }

    def latest_online_episode(self) -> dict | None:
        row = self._conn.execute(
            "SELECT episode_key FROM episodes WHERE status = ? "
            "ORDER BY created_at DESC, episode_key DESC LIMIT 1",
            (STATUS_ONLINE,),
        ).fetchone()
        return self.episode(row["episode_key"]) if row else None

    # -- observations and relation state ----------------------------------

    def append_observation(
        self, relation_key: str, episode_key: str, u_off: float, u_on: float, beta: float
    ) -> None:
        with self._conn:
            self._conn.execute(
                "INSERT OR IGNORE INTO prior_observations VALUES (?, ?, ?, ?, ?, ?)",
                (relation_key, episode_key, u_off, u_on, beta, _now()),
            )

    def observation(self, relation_key: str, episode_key: str) -> dict | None:
        row = self._conn.execute(
            "SELECT * FROM prior_observations WHERE relation_key = ? AND episode_key = ?",
            (relation_key, episode_key),
        ).fetchone()
        return dict(row) if row else None

    def current_relations(self) -> dict[str, TransferRelation]:
        """Stored relation state, falling back to the identity prior per
        configured relation."""
        stored = {
            row["relation_key"]: TransferRelation(
                row["relation_key"], row["slope"], row["intercept"], row["eta"]
            )
            for row in self._conn.execute("SELECT * FROM prior_relations")
        }
        for rel in self.relations:
            if rel.relation_key not in stored:
                stored[rel.relation_key] = TransferRelation(rel.relation_key, eta=rel.eta)
        return stored

    def record_relation_update(
        self,
        old: TransferRelation,
        new: TransferRelation,
        method: str,
        idempotency_key: str,
        error: float | None = None,
        episode_key: str | None = None,
    ) -> bool:
        """Upsert relation state together with exactly one audit row.

        Returns False (and changes nothing) when the idempotency key has been
        seen before, which is how replayed rounds skip double-applying.
        """
        now = _now()
        with self._conn:
            cursor = self._conn.execute(
                "INSERT OR IGNORE INTO prior_update_history "
                "(relation_key, method, old_slope, new_slope, old_intercept, "
                " new_intercept, error, episode_key, idempotency_key, created_at) "
                "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    new.relation_key, method, old.slope, new.slope, old.intercept,
                    new.intercept, error, episode_key, idempotency_key, now,
                ),
            )
            if cursor.rowcount == 0:
                return False
            self._conn.execute(
                "INSERT INTO prior_relations VALUES (?, ?, ?, ?, ?) "
                "ON CONFLICT(relation_key) DO UPDATE SET "
                "slope = excluded.slope, intercept = excluded.intercept, "
                "eta = excluded.eta, updated_at = excluded.updated_at",
                (new.relation_key, new.slope, new.intercept, new.eta, now),
            )
        return True

    def has_relation_update(self, idempotency_key: str) -> bool:
        row = self._conn.execute(
            "SELECT 1 FROM prior_update_history WHERE idempotency_key = ?",
            (idempotency_key,),
        ).fetchone()
        return row is not None

    # -- penalty weights ---------------------------------------------------

    def record_penalty_update(
        self,
        constraint_metric: str,
        pressure: float,
        step: float,
        old_weight: float,
        new_weight: float,
        idempotency_key: str,
    ) -> bool:
        with self._conn:
            cursor = self._conn.execute(
                "INSERT OR IGNORE INTO penalty_weight_update_history "
                "(constraint_metric, pressure, step, old_weight, new_weight, "
                " idempotency_key, created_at) VALUES (?, ?, ?, ?, ?, ?, ?)",
                (constraint_metric, pressure, step, old_weight, new_weight,
                 idempotency_key, _now()),
            )
            return cursor.rowcount > 0

    def current_penalty_weights(self, seeds: dict[str, float]) -> dict[str, float]:
        """Latest recorded weight per constraint; the seed where none exists."""
        weights = dict(seeds)
        rows = self._conn.execute(
            "SELECT constraint_metric, new_weight FROM penalty_weight_update_history "
            "ORDER BY id"
        )
        for row in rows:
            if row["constraint_metric"] in weights:
                weights[row["constraint_metric"]] = row["new_weight"]
        return weights

    # -- events and context slices ----------------------------------------

    def append_event(self, event_type: str, idempotency_key: str, metadata: dict) -> bool:
        with self._conn:
            cursor = self._conn.execute(
                "INSERT OR IGNORE INTO memory_events "
                "(event_type, idempotency_key, metadata, created_at) VALUES (?, ?, ?, ?)",
                (event_type, idempotency_key, _canonical(metadata), _now()),
            )
            return cursor.rowcount > 0

    def latest_event(self, event_type: str) -> dict | None:
        row = self._conn.execute(
            "SELECT metadata FROM memory_events WHERE event_type = ? "
            "ORDER BY event_id DESC LIMIT 1",
            (event_type,),
        ).fetchone()
        return json.loads(row["metadata"]) if row else None

    def query_recent(self, n_episodes: int = 20, n_updates: int = 30) -> tuple[list, list]:
        """Newest-first context slices of episodes and prior update history."""
        episodes = [
            self.episode(row["episode_key"])
            for row in self._conn.execute(
                "SELECT episode_key FROM episodes "
                "ORDER BY created_at DESC, episode_key DESC LIMIT ?",
                (n_episodes,),
            )
        ]
        updates = [
            dict(row)
            for row in self._conn.execute(
                "SELECT relation_key, method, old_slope, new_slope, old_intercept, "
                "new_intercept, error, episode_key, created_at "
                "FROM prior_update_history ORDER BY id DESC LIMIT ?",
                (n_updates,),
            )
        ]
        return episodes, updates

    # -- inspection --------------------------------------------------------

    def table_counts(self) -> dict[str, int]:
        return {
            table: self._conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()[0]
            for table in TABLES
        }

    def logical_snapshot(self) -> dict[str, list[tuple]]:
        """Row multisets per table, projected onto logical columns (ids and
        timestamps excluded) for replay comparisons."""
        projections = {
            "episodes": "episode_key, offline_metrics, online_uplifts, status",
            "offline_candidates": "episode_key, rank, params, metrics",
            "prior_relations": "relation_key, slope, intercept, eta",
            "prior_observations":
                "relation_key, episode_key, offline_uplift, online_uplift, beta_at_observation",
            "prior_update_history":
                "relation_key, method, old_slope, new_slope, old_intercept, "
                "new_intercept, error, episode_key, idempotency_key",
            "penalty_weight_update_history":
                "constraint_metric, pressure, step, old_weight, new_weight, idempotency_key",
            "memory_events": "event_type, idempotency_key, metadata",
        }
        snapshot = {}
        for table, columns in projections.items():
            rows = self._conn.execute(f"SELECT {columns} FROM {table}").fetchall()
            snapshot[table] = sorted(tuple(row) for row in rows)
        return snapshot

    def checkpoint(self) -> None:
        self._conn.execute("PRAGMA wal_checkpoint(TRUNCATE)")


def init_schema(path: str | Path, relations: Iterable[RelationSpec] = ()) -> MemoryDb:
    """Create or open the store, verifying integrity and schema version."""
    return MemoryDb(path, relations)
