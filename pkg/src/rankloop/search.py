"""Budgeted parallel parameter search with a Parzen-estimator sampler.

Observed trials are split at a quantile of their objective values; a kernel
density is fitted per dimension to each side and candidates are scored by the
good/bad density ratio. Pending trials are imputed with a pessimistic value
(the worst completed objective) so parallel workers do not pile onto the same
region. Suggestions are a pure function of the study seed and trial history.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, SearchFailedError

DEFAULT_GAMMA = 0.25
DEFAULT_STARTUP_TRIALS = 20
DEFAULT_CANDIDATE_POOL = 24
DEFAULT_LIAR_FLOOR = -1e9
# Every Nth guided suggestion is a plain uniform draw. Density-ratio sampling
# alone can pin itself to the first basin it refines; a fixed exploration
# cadence keeps the sampler globally convergent without hurting refinement.
EXPLORATION_CADENCE = 8
GOOD_SET_CAP = 25
# Bandwidth floors as a fraction of each dimension's span. The good density
# stays wide so per-dimension sampling keeps drifting toward better regions;
# the bad density stays sharp so piles of rejected trials actively repel
# candidates. Narrowing the good floor stalls drift; widening the bad floor
# lets the sampler sit on a crowded pile.
GOOD_BANDWIDTH_FLOOR = 0.08
BAD_BANDWIDTH_FLOOR = 0.01

PENDING = "pending"
COMPLETE = "complete"
FAILED = "failed"


@dataclass
class Trial:
    trial_id: int
    params: dict[str, float]
    state: str = PENDING
    value: float | None = None


@dataclass
class SearchStudy:
    """Append-only trial record plus sampler configuration.

    Mutation goes through :meth:`suggest`, :meth:`complete` and :meth:`fail`,
    all serialized on an internal lock so many workers can share one study.
    """

    bounds: dict[str, tuple[float, float]]
    seed: int = 0
    gamma: float = DEFAULT_GAMMA
    startup_trials: int = DEFAULT_STARTUP_TRIALS
    candidate_pool: int = DEFAULT_CANDIDATE_POOL
    worker_count: int = 1
    budget: int = 0
    liar_floor: float = DEFAULT_LIAR_FLOOR
    trials: list[Trial] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.bounds:
            raise ConfigurationError("search bounds are empty")
        for name, (low, high) in self.bounds.items():
            if not (math.isfinite(low) and math.isfinite(high) and low < high):
                raise ConfigurationError(f"bad bounds for {name!r}: ({low}, {high})")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must be in (0, 1), got {self.gamma}")
        self._lock = threading.Lock()

    def suggest(self) -> Trial:
        with self._lock:
            params = tpe_suggest(self)
            trial = Trial(trial_id=len(self.trials), params=params)
            self.trials.append(trial)
            return trial

    def complete(self, trial_id: int, value: float) -> None:
        with self._lock:
            trial = self.trials[trial_id]
            trial.state = COMPLETE
            trial.value = float(value)

    def fail(self, trial_id: int) -> None:
        with self._lock:
            self.trials[trial_id].state = FAILED

    def completed(self) -> list[Trial]:
        return [t for t in self.trials if t.state == COMPLETE]

    def top(self, n: int) -> list[Trial]:
        done = sorted(self.completed(), key=lambda t: (-t.value, t.trial_id))
        return done[:n]

    def state_seed(self) -> int:
        """Deterministic RNG seed derived from the seed and full trial history."""
        digest = hashlib.blake2b(digest_size=8)
        digest.update(str(self.seed).encode())
        for t in self.trials:
            digest.update(f"{t.trial_id}:{t.state}:{t.value!r};".encode())
        return int.from_bytes(digest.digest(), "big")

    def export_trials_csv(self, path: str | Path) -> None:
        names = sorted(self.bounds)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["trial_id", *names, "value", "state"])
            for t in self.trials:
                writer.writerow(
                    [t.trial_id]
                    + [repr(t.params[n]) for n in names]
                    + ["" if t.value is None else repr(t.value), t.state]
                )

    def export_best_json(self, path: str | Path) -> None:
        best = self.top(1)
        payload = {
            "best": None
            if not best
            else {"trial_id": best[0].trial_id, "params": best[0].params, "value": best[0].value},
            "completed": len(self.completed()),
            "budget": self.budget,
        }
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2)


def constant_liar_impute(study: SearchStudy) -> dict[int, float]:
    """Pessimistic stand-in values for pending trials, keyed by trial id.

    The imputed value is the minimum completed objective (or the configured
    floor when nothing has completed). Purely transient: nothing is stored on
    the trials themselves.
    """
    completed = [t.value for t in study.trials if t.state == COMPLETE]
    liar = min(completed) if completed else study.liar_floor
    return {t.trial_id: liar for t in study.trials if t.state == PENDING}


def _observations(study: SearchStudy) -> tuple[list[dict[str, float]], list[float]]:
    imputed = constant_liar_impute(study)
    xs: list[dict[str, float]] = []
    ys: list[float] = []
    for t in study.trials:
        if t.state == COMPLETE:
            xs.append(t.params)
            ys.append(t.value)
        elif t.state == PENDING:
            xs.append(t.params)
            ys.append(imputed[t.trial_id])
    return xs, ys


def _mixture(
    points: np.ndarray, low: float, high: float, floor: float
) -> tuple[np.ndarray, np.ndarray]:
    """Kernel centers with per-point bandwidths, plus one wide prior kernel.

    Each point's bandwidth is its larger gap to a neighbor (domain edges act
    as neighbors), so dense clusters get sharp kernels while stragglers keep
    wide ones; the prior kernel keeps the density positive everywhere. The
    floor bounds how sharp a kernel may get, as a fraction of the span.
    """
    span = high - low
    order = np.argsort(points)
    srt = points[order]
    ext = np.concatenate(([low], srt, [high]))
    widths = np.clip(np.maximum(srt - ext[:-2], ext[2:] - srt), floor * span, span)
    centers = np.concatenate((srt, [0.5 * (low + high)]))
    bands = np.concatenate((widths, [span]))
    return centers, bands


def _log_density(centers: np.ndarray, bands: np.ndarray, at: np.ndarray) -> np.ndarray:
    z = (at[:, None] - centers[None, :]) / bands[None, :]
    log_kernels = -0.5 * z * z - np.log(bands)[None, :] - 0.5 * math.log(2.0 * math.pi)
    peak = log_kernels.max(axis=1)
    return peak + np.log(np.exp(log_kernels - peak[:, None]).mean(axis=1))


def tpe_suggest(study: SearchStudy) -> dict[str, float]:
    """Next candidate vector for the study's current state.

    Below the startup threshold this is a uniform draw within bounds. Past it,
    observations split at the gamma quantile (best fraction by value) into a
    good and a bad set; a fixed-size pool of candidates is sampled around good
    points and the one maximizing the good/bad log-density ratio wins.
    """
    if not study.bounds:
        raise ConfigurationError("search bounds are empty")
    rng = np.random.default_rng(study.state_seed())
    names = sorted(study.bounds)
    xs, ys = _observations(study)
    uniform_turn = (len(xs) - study.startup_trials) % EXPLORATION_CADENCE == EXPLORATION_CADENCE - 1
    if len(xs) < study.startup_trials or uniform_turn:
        return {
            name: float(rng.uniform(*study.bounds[name])) for name in names
        }

    order = np.argsort(np.asarray(ys), kind="stable")[::-1]
    # Quantile split, capped so the good set stays concentrated on long runs.
    n_good = max(1, min(math.ceil(study.gamma * len(xs)), GOOD_SET_CAP))
    good_idx, bad_idx = order[:n_good], order[n_good:]
    if len(bad_idx) == 0:
        bad_idx = order

    # The density model factorizes over dimensions, so the pool is sampled and
    # the ratio maximized independently per dimension.
    result: dict[str, float] = {}
    for name in names:
        low, high = study.bounds[name]
        col = np.asarray([x[name] for x in xs])
        good_centers, good_bands = _mixture(col[good_idx], low, high, GOOD_BANDWIDTH_FLOOR)
        bad_centers, bad_bands = _mixture(col[bad_idx], low, high, BAD_BANDWIDTH_FLOOR)
        picks = rng.integers(0, len(good_centers), study.candidate_pool)
        noise = rng.normal(0.0, 1.0, study.candidate_pool)
        cands = np.clip(good_centers[picks] + noise * good_bands[picks], low, high)
        scores = _log_density(good_centers, good_bands, cands) - _log_density(
            bad_centers, bad_bands, cands
        )
        result[name] = float(cands[int(np.argmax(scores))])
    return result


def run_search(
    objective_fn: Callable[[dict[str, float]], float],
    study: SearchStudy,
) -> tuple[Trial, list[Trial]]:
    """Drive the study to its budget and return (best trial, top-5 trials).

    Each budget slot is one suggested trial; an objective exception is retried
    once on the same parameters, and a second failure marks the trial failed
    (still consuming the slot, keeping total runtime bounded).
    """
    if study.budget < 1:
        raise ConfigurationError(f"budget must be >= 1, got {study.budget}")

    def run_slot() -> None:
        trial = study.suggest()
        for _ in range(2):
            try:
                value = objective_fn(dict(trial.params))
            except Exception:
                continue
            study.complete(trial.trial_id, value)
            return
        study.fail(trial.trial_id)

    if study.worker_count <= 1:
        for _ in range(study.budget):
            run_slot()
    else:
        with ThreadPoolExecutor(max_workers=study.worker_count) as pool:
            futures = [pool.submit(run_slot) for _ in range(study.budget)]
            for future in futures:
                future.result()

    top5 = study.top(5)
    if not top5:
        raise SearchFailedError("objective failed on every trial")
    return top5[0], top5
