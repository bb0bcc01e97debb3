"""Market configuration: parameters, factors, relations, constraints, runtime knobs.

Everything the loop needs to run in a new market lives in one JSON document;
the defaults below describe the synthetic desk-scale market used by the test
suite and the ``simulate`` command.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .objective import LAMBDA_MAX, LAMBDA_MIN, ConstraintSpec, validate_parameter_vector


@dataclass
class FactorSpec:
    """One scoring factor: raw per-item signal scaled by a named weight parameter."""

    name: str
    weight_param: str
    scale: float = 1.0
    applies_to: str = "all"  # "all" | "ads" | "organic"


@dataclass
class RelationSpec:
    """One offline metric paired with the online metric it should predict."""

    relation_key: str
    online_metric: str
    offline_metric: str
    eta: float = 0.2


@dataclass
class SearchSettings:
    budget: int = 5000
    workers: int = 25
    gamma: float = 0.25
    startup_trials: int = 20
    candidate_pool: int = 24
    liar_floor: float = -1e9
    seed: int = 0


@dataclass
class InfluenceSettings:
    tau: float = 10.0
    top_k: int = 10
    top_l: int = 10
    strategy: str = "exhaustive"


@dataclass
class AdvisorSettings:
    # None selects the built-in scripted advisor subprocess.
    command: list[str] | None = None
    timeout_seconds: float = 300.0
    extra_args: list[str] = field(default_factory=list)


@dataclass
class LoopSettings:
    accumulation_seconds: int = 12600  # 3.5 h observation window
    snap_minutes: int = 15
    fetch_attempts: int = 5
    retry_interval_seconds: float = 300.0
    freeze_threshold: float = 0.05
    publish_key: str = "ranking:params"
    updates_dir: str = "updates"


@dataclass
class SimulationSettings:
    n_requests: int = 15
    n_items: int = 8
    ads_fraction: float = 0.35
    noise_sigma: float = 0.01
    seed: int = 0
    # Per-relation ground truth: slope, initial intercept, drift per round and
    # scheduled intercept breaks [(round, jump), ...].
    truth: dict[str, dict] = field(default_factory=dict)


@dataclass
class Config:
    market: str
    parameters: dict[str, tuple[float, float]]
    bootstrap_params: dict[str, float]
    factors: list[FactorSpec]
    relations: list[RelationSpec]
    constraints: list[ConstraintSpec]
    objective_metric: str = "I_gmv"
    search: SearchSettings = field(default_factory=SearchSettings)
    influence: InfluenceSettings = field(default_factory=InfluenceSettings)
    advisor: AdvisorSettings = field(default_factory=AdvisorSettings)
    loop: LoopSettings = field(default_factory=LoopSettings)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    lambda_min: float = LAMBDA_MIN
    lambda_max: float = LAMBDA_MAX

    def __post_init__(self) -> None:
        self.parameters = {k: tuple(v) for k, v in self.parameters.items()}
        validate_parameter_vector(self.bootstrap_params, self.parameters)
        keys = [r.relation_key for r in self.relations]
        if len(keys) != len(set(keys)):
            raise ConfigurationError("duplicate relation keys")

    def relation_map(self) -> dict[str, RelationSpec]:
        return {r.relation_key: r for r in self.relations}

    def constraint_map(self) -> dict[str, ConstraintSpec]:
        return {c.constraint_id: c for c in self.constraints}

    def penalty_seeds(self) -> dict[str, float]:
        return {c.constraint_id: c.penalty_weight for c in self.constraints}

    def relation_for_metric(self, offline_metric: str) -> RelationSpec | None:
        for rel in self.relations:
            if rel.offline_metric == offline_metric:
                return rel
        return None


def default_config(market: str = "sim-desk") -> Config:
    """Desk-scale synthetic market: 7 weights, 7 factors, 6 relations."""
    params = {
        "ps_ads_wo": (0.1, 10.0),
        "ps_ads_wg": (0.1, 10.0),
        "ps_org_wo": (0.1, 10.0),
        "ps_org_wg": (0.1, 10.0),
        "ps_porg_w": (0.1, 10.0),
        "ps_price_pow": (0.1, 10.0),
        "ps_w2": (0.1, 10.0),
    }
    factors = [
        FactorSpec("gmv", "ps_org_wg"),
        FactorSpec("order", "ps_org_wo"),
        FactorSpec("ecpm_term", "ps_ads_wo", applies_to="ads"),
        FactorSpec("gmv_ads", "ps_ads_wg", applies_to="ads"),
        FactorSpec("organic", "ps_porg_w", applies_to="organic"),
        FactorSpec("ads_ctr", "ps_w2", applies_to="ads"),
        FactorSpec("price", "ps_price_pow", scale=0.5),
    ]
    relations = [
        RelationSpec("gmv~I_gmv", "gmv", "I_gmv"),
        RelationSpec("orders~I_order", "orders", "I_order"),
        RelationSpec("ads_revenue~I_ecpm_term", "ads_revenue", "I_ecpm_term"),
        RelationSpec("advertiser_value~I_gmv_ads", "advertiser_value", "I_gmv_ads"),
        RelationSpec("organic_clicks~I_organic", "organic_clicks", "I_organic"),
        RelationSpec("ads_ctr~I_ads_ctr", "ads_ctr", "I_ads_ctr"),
    ]
    constraints = [
        ConstraintSpec(
            "order_guard", "I_order", "floor", bound=-0.05,
            violation_threshold=0.05, online_bound=-0.05,
        ),
        ConstraintSpec(
            "ecpm_guard", "I_ecpm_term", "floor", bound=-0.05,
            violation_threshold=0.05, online_bound=-0.05,
        ),
        ConstraintSpec(
            "gmv_ads_guard", "I_gmv_ads", "floor", bound=-0.10,
            violation_threshold=0.05, online_bound=-0.10,
        ),
        ConstraintSpec(
            "ads_top10_guard", "ads_top10_rate", "floor", bound=0.15,
            violation_threshold=0.05, value_kind="raw",
        ),
    ]
    truth = {
        "gmv~I_gmv": {"slope": 1.0, "intercept": -0.03, "drift": 0.0, "breaks": []},
        "orders~I_order": {"slope": 0.95, "intercept": 0.02, "drift": 0.0, "breaks": []},
        "ads_revenue~I_ecpm_term": {"slope": 1.05, "intercept": -0.01, "drift": 0.0, "breaks": []},
        "advertiser_value~I_gmv_ads": {"slope": 1.0, "intercept": 0.01, "drift": 0.0, "breaks": []},
        "organic_clicks~I_organic": {"slope": 0.9, "intercept": 0.0, "drift": 0.0, "breaks": []},
        "ads_ctr~I_ads_ctr": {"slope": 1.0, "intercept": -0.02, "drift": 0.0, "breaks": []},
    }
    return Config(
        market=market,
        parameters=params,
        bootstrap_params={name: 1.0 for name in params},
        factors=factors,
        relations=relations,
        constraints=constraints,
        search=SearchSettings(budget=200, workers=1, seed=0),
        simulation=SimulationSettings(truth=truth),
    )


def load_config(path: str | Path) -> Config:
    with open(path, encoding="utf-8") as handle:
        raw = json.load(handle)
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> Config:
    try:
        return Config(
            market=raw["market"],
            parameters={k: (float(v[0]), float(v[1])) for k, v in raw["parameters"].items()},
            bootstrap_params={k: float(v) for k, v in raw["bootstrap_params"].items()},
            factors=[FactorSpec(**f) for f in raw["factors"]],
            relations=[RelationSpec(**r) for r in raw["relations"]],
            constraints=[ConstraintSpec(**c) for c in raw["constraints"]],
            objective_metric=raw.get("objective_metric", "I_gmv"),
            search=SearchSettings(**raw.get("search", {})),
            influence=InfluenceSettings(**raw.get("influence", {})),
            advisor=AdvisorSettings(**raw.get("advisor", {})),
            loop=LoopSettings(**raw.get("loop", {})),
            simulation=SimulationSettings(**raw.get("simulation", {})),
            lambda_min=float(raw.get("lambda_min", LAMBDA_MIN)),
            lambda_max=float(raw.get("lambda_max", LAMBDA_MAX)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"bad config document: {exc}") from exc


def dump_config(config: Config, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(asdict(config), handle, indent=2)
