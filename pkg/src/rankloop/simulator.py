"""Synthetic marketplace: seeded datasets and a hidden transfer model.

The environment generates raw factor-score tables, scores them under a
candidate weight vector, measures influence metrics through the real metric
path, and converts the published candidate's offline uplifts into "online"
uplifts via a hidden linear ground truth with noise, drift and scheduled
structural breaks. It stands in for the production experimentation platform.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .config import Config, FactorSpec, SimulationSettings
from .errors import InvalidInputError, InvalidReportError
from .influence import FactorScoreTable, Item, Request, aggregate_influence, rank_items
from .objective import relative_uplift
from .publishers import KeyValuePublisher
from .reports import format_ab_report

ADS_PREFIX = "ad:"


@dataclass
class RelationTruth:
    true_slope: float
    true_intercept: float
    drift_per_round: float = 0.0
    breaks: list[tuple[int, float]] = field(default_factory=list)

    def intercept_at(self, round_no: int) -> float:
        value = self.true_intercept + self.drift_per_round * round_no
        value += sum(jump for at, jump in self.breaks if at <= round_no)
        return value


@dataclass
class GroundTruthTransfer:
    relations: dict[str, RelationTruth]
    noise_sigma: float = 0.0
    seed: int = 0

    @classmethod
    def from_settings(cls, settings: SimulationSettings) -> "GroundTruthTransfer":
        relations = {
            key: RelationTruth(
                true_slope=float(spec["slope"]),
                true_intercept=float(spec["intercept"]),
                drift_per_round=float(spec.get("drift", 0.0)),
                breaks=[(int(r), float(j)) for r, j in spec.get("breaks", [])],
            )
            for key, spec in settings.truth.items()
        }
        return cls(relations=relations, noise_sigma=settings.noise_sigma, seed=settings.seed)


def generate_dataset(
    seed,
    n_requests: int,
    n_items: int,
    factors: list[FactorSpec],
    ads_fraction: float = 0.35,
) -> FactorScoreTable:
    """Raw (unweighted) factor scores, deterministic per seed.

    Ads-only factors are zero on organic items and vice versa; the raw values
    are what a weight vector later scales, so moving a weight genuinely moves
    the influence decomposition.
    """
    if n_requests < 1 or n_items < 1:
        raise InvalidInputError("dataset sizes must be >= 1")
    rng = np.random.default_rng(seed)
    requests = []
    for q in range(n_requests):
        items = []
        for n in range(n_items):
            is_ad = rng.random() < ads_fraction
            prefix = ADS_PREFIX if is_ad else "org:"
            scores = {}
            for factor in factors:
                raw = float(rng.lognormal(mean=0.0, sigma=0.5)) * factor.scale
                if factor.applies_to == "ads" and not is_ad:
                    raw = 0.0
                elif factor.applies_to == "organic" and is_ad:
                    raw = 0.0
                scores[factor.name] = raw
            items.append(Item(f"{prefix}{n:03d}", scores))
        requests.append(Request(f"q{q:04d}", items))
    return FactorScoreTable(requests)


def apply_params(
    raw: FactorScoreTable, params: dict[str, float], factors: list[FactorSpec]
) -> FactorScoreTable:
    """Score the raw table under a weight vector: score = raw * weight."""
    weight_of = {f.name: params[f.weight_param] for f in factors}
    requests = [
        Request(
            req.request_id,
            [
                Item(it.item_id, {f: s * weight_of[f] for f, s in it.scores.items()})
                for it in req.items
            ],
        )
        for req in raw.requests
    ]
    return FactorScoreTable(requests)


def ads_top_rate(scored: FactorScoreTable, top_positions: int = 10) -> float:
    """Mean fraction of ad items within the top positions across requests."""
    rates = []
    for req in scored.requests:
        ranked = rank_items(req)
        depth = min(top_positions, len(ranked.permutation))
        ads = sum(1 for iid in ranked.permutation[:depth] if iid.startswith(ADS_PREFIX))
        rates.append(ads / depth)
    return float(np.mean(rates))


def offline_metrics(
    raw: FactorScoreTable,
    params: dict[str, float],
    factors: list[FactorSpec],
    tau: float = 10.0,
    top_k: int = 10,
    top_l: int = 10,
    strategy: str = "exhaustive",
    ads_top_positions: int = 10,
) -> dict[str, float]:
    """Influence shares (``I_<factor>``) plus the ads exposure rate for one
    candidate vector, measured through the real metric path."""
    scored = apply_params(raw, params, factors)
    report = aggregate_influence(scored, tau=tau, k=top_k, l=top_l, strategy=strategy)
    metrics = {f"I_{factor}": share for factor, share in report.influence.items()}
    metrics["ads_top10_rate"] = ads_top_rate(scored, ads_top_positions)
    return metrics


def simulate_online(
    offline_uplifts: dict[str, float],
    truth: GroundTruthTransfer,
    round_no: int,
) -> dict[str, float]:
    """Hidden transfer applied per relation, with per-(relation, round) noise."""
    online: dict[str, float] = {}
    for relation_key, u_off in offline_uplifts.items():
        spec = truth.relations[relation_key]
        rng = np.random.default_rng(
            [truth.seed, round_no, zlib.crc32(relation_key.encode())]
        )
        noise = float(rng.normal(0.0, truth.noise_sigma)) if truth.noise_sigma > 0 else 0.0
        online[relation_key] = (
            spec.true_slope * u_off + spec.intercept_at(round_no) + noise
        )
    return online


def emit_ab_report(
    uplifts_percent: dict[str, float],
    window: tuple[datetime, datetime],
    path: str | Path,
) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(".tmp")
    tmp.write_text(format_ab_report(uplifts_percent, window), encoding="utf-8")
    os.replace(tmp, target)
    return target


class SimulatorEnvironment:
    """Closed-loop stand-in for the platform: datasets in, uplift reports out.

    The report for a window measures whatever vector is currently published,
    using the same per-round dataset the searcher saw, so recorded offline
    uplifts and the hidden transfer's inputs agree exactly.
    """

    def __init__(
        self,
        config: Config,
        publisher: KeyValuePublisher,
        reports_dir: str | Path,
    ):
        self.config = config
        self.publisher = publisher
        self.reports_dir = Path(reports_dir)
        self.truth = GroundTruthTransfer.from_settings(config.simulation)
        self._datasets: dict[int, FactorScoreTable] = {}
        self._baselines: dict[int, dict[str, float]] = {}

    def dataset(self, round_no: int) -> FactorScoreTable:
        if round_no not in self._datasets:
            sim = self.config.simulation
            self._datasets[round_no] = generate_dataset(
                seed=[sim.seed, round_no],
                n_requests=sim.n_requests,
                n_items=sim.n_items,
                factors=self.config.factors,
                ads_fraction=sim.ads_fraction,
            )
        return self._datasets[round_no]

    def metrics(self, round_no: int, params: dict[str, float]) -> dict[str, float]:
        influence = self.config.influence
        return offline_metrics(
            self.dataset(round_no),
            params,
            self.config.factors,
            tau=influence.tau,
            top_k=influence.top_k,
            top_l=influence.top_l,
            strategy=influence.strategy,
            ads_top_positions=min(10, max(2, self.config.simulation.n_items // 2)),
        )

    def baseline_metrics(self, round_no: int) -> dict[str, float]:
        if round_no not in self._baselines:
            self._baselines[round_no] = self.metrics(round_no, self.config.bootstrap_params)
        return self._baselines[round_no]

    def offline_uplifts(self, round_no: int, params: dict[str, float]) -> dict[str, float]:
        """Per offline metric: relative uplift of the candidate vs bootstrap."""
        candidate = self.metrics(round_no, params)
        base = self.baseline_metrics(round_no)
        return {
            metric: relative_uplift(candidate[metric], base[metric])
            for metric in candidate
            if base.get(metric, 0.0) != 0.0
        }

    def fetch(self, window: tuple[datetime, datetime], round_no: int) -> Path:
        """Write and return the report measuring the currently published vector
        over the previous round's dataset.

        An already-written report for the window is returned as-is, mirroring
        the immutability of platform history across restarts."""
        path = self.reports_dir / f"ab_{window[1].strftime('%Y%m%d_%H%M%S')}.md"
        if path.exists():
            return path
        published = self.publisher.get(self.config.loop.publish_key)
        if published is None:
            raise InvalidReportError("nothing published yet; no report to generate")
        params = json.loads(published)
        observed_round = max(1, round_no - 1)
        uplift_by_metric = self.offline_uplifts(observed_round, params)
        per_relation = {
            rel.relation_key: uplift_by_metric[rel.offline_metric]
            for rel in self.config.relations
            if rel.offline_metric in uplift_by_metric
        }
        online = simulate_online(per_relation, self.truth, observed_round)
        percent = {
            rel.online_metric: online[rel.relation_key] * 100.0
            for rel in self.config.relations
            if rel.relation_key in online
        }
        return emit_ab_report(percent, window, path)
