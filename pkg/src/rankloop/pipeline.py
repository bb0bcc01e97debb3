"""Round orchestration: the one-shot step sequence and the continuous loop.

A round runs a fixed step order: fetch the observation report, open the
store, pair the previous round's offline record with its online outcome, run
the slow calibration, consult the advisor under its guards, derive target
ranges and penalty weights, then search and publish. Every persisted write is
keyed so that re-running a round (after a crash or deliberately) leaves the
store exactly as an uninterrupted run would have.

The continuous loop chains rounds forever: wait out the accumulation window,
run a round, persist the handoff state, log, repeat. Report-fetch failures
retry and then skip the window; anything else exits immediately with the
state file intact for the operator.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Protocol

from . import advisor as advisor_mod
from . import belief, preference
from .clock import Clock, snap_to_boundary
from .config import Config
from .errors import (
    DataUnavailableError,
    InvalidReportError,
    PipelineFatalError,
    PublishError,
    RankloopError,
)
from .memory import MemoryDb
from .objective import (
    ConstraintSpec,
    composite_objective,
    constraint_violation,
    relative_uplift,
    validate_parameter_vector,
)
from .preference import PenaltyState
from .publishers import KeyValuePublisher
from .reports import AbReport, read_ab_report
from .search import SearchStudy, run_search

STATE_FILE = "yolo-state.env"
HANDOFF_FILE = "one-shot-latest.env"
EVENT_LOG_FILE = "yolo-event-log.md"

PHASE_COLDSTART = "coldstart"
PHASE_INITIAL = "initial"
PHASE_YOLO = "yolo"

STEPS = (
    "fetch_report",
    "init_db",
    "record_offline",
    "record_online",
    "lms_update",
    "export_context",
    "invoke_advisor",
    "apply_proposal",
    "derive_target_ranges",
    "derive_penalty_weights",
    "search",
    "publish",
    "write_handoff",
)


class ReportSource(Protocol):
    def fetch(self, window: tuple[datetime, datetime], round_no: int) -> Path: ...


class OfflineEvaluator(Protocol):
    def metrics(self, round_no: int, params: dict[str, float]) -> dict[str, float]: ...

    def baseline_metrics(self, round_no: int) -> dict[str, float]: ...

    def offline_uplifts(self, round_no: int, params: dict[str, float]) -> dict[str, float]: ...


@dataclass
class YoloState:
    round_no: int
    last_push_time: datetime
    window_from: datetime
    window_to: datetime
    prev_params: dict[str, float] | None = None
    prev_report_path: str | None = None

    def save(self, path: str | Path) -> None:
        lines = [
            f"YOLO_ROUND={self.round_no}",
            f"LAST_PUSH_TIME={self.last_push_time.isoformat()}",
            f"LAST_ONLINE_FROM={self.window_from.isoformat()}",
            f"LAST_ONLINE_TO={self.window_to.isoformat()}",
            f"PREV_PARAMS_JSON={json.dumps(self.prev_params) if self.prev_params else ''}",
            f"PREV_AB_REPORT_PATH={self.prev_report_path or ''}",
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def recover_state(path: str | Path) -> YoloState | None:
    """Parse the loop state file; absent means a fresh coldstart.

    A malformed file is a fatal error and is left untouched for forensics.
    """
    target = Path(path)
    if not target.exists():
        return None
    values: dict[str, str] = {}
    try:
        for line in target.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        return YoloState(
            round_no=int(values["YOLO_ROUND"]),
            last_push_time=datetime.fromisoformat(values["LAST_PUSH_TIME"]),
            window_from=datetime.fromisoformat(values["LAST_ONLINE_FROM"]),
            window_to=datetime.fromisoformat(values["LAST_ONLINE_TO"]),
            prev_params=json.loads(values["PREV_PARAMS_JSON"])
            if values.get("PREV_PARAMS_JSON")
            else None,
            prev_report_path=values.get("PREV_AB_REPORT_PATH") or None,
        )
    except (KeyError, ValueError) as exc:
        raise PipelineFatalError(
            f"malformed state file {target} (preserved for forensics): {exc}"
        ) from exc


@dataclass
class Handoff:
    run_tag: str
    config_path: str
    best_so_far: str

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            f"LATEST_RUN_TAG={self.run_tag}\n"
            f"CONFIG_PATH={self.config_path}\n"
            f"BEST_SO_FAR={self.best_so_far}\n",
            encoding="utf-8",
        )


def load_handoff(path: str | Path) -> Handoff | None:
    target = Path(path)
    if not target.exists():
        return None
    values: dict[str, str] = {}
    for line in target.read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    try:
        return Handoff(
            run_tag=values["LATEST_RUN_TAG"],
            config_path=values.get("CONFIG_PATH", ""),
            best_so_far=values["BEST_SO_FAR"],
        )
    except KeyError as exc:
        raise PipelineFatalError(f"malformed handoff file {target}: {exc}") from exc


@dataclass
class PipelineEnv:
    """Everything a round needs, wired once per process."""

    config: Config
    db: MemoryDb
    publisher: KeyValuePublisher
    report_source: ReportSource
    evaluator: OfflineEvaluator
    clock: Clock
    updates_dir: Path
    advisor_command: list[str]
    config_path: str = ""
    step_hook: Callable[[str], None] | None = None

    def __post_init__(self) -> None:
        self.updates_dir = Path(self.updates_dir)
        self.updates_dir.mkdir(parents=True, exist_ok=True)


@dataclass
class RoundSummary:
    round_no: int
    run_tag: str
    phase: str
    window: tuple[datetime, datetime]
    report_path: str | None = None
    episode_key: str | None = None
    lms_updates: int = 0
    advisor_kind: str | None = None
    advisor_entries: int = 0
    frozen: bool = False
    target_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    penalty_weights: dict[str, float] = field(default_factory=dict)
    best_value: float | None = None
    published_params: dict[str, float] | None = None
    prev_params: dict[str, float] | None = None


def fetch_ab_report(
    source: ReportSource,
    window: tuple[datetime, datetime],
    round_no: int,
    clock: Clock,
    attempts: int = 5,
    retry_interval: float = 300.0,
) -> tuple[AbReport, str]:
    """First valid report wins; a full strike-out aborts the round."""
    failures: list[str] = []
    for attempt in range(1, attempts + 1):
        try:
            path = source.fetch(window, round_no)
            return read_ab_report(path), str(path)
        except InvalidReportError as exc:
            failures.append(str(exc))
            if attempt < attempts:
                clock.sleep(retry_interval)
    raise DataUnavailableError(
        f"no valid report after {attempts} attempts: {failures[-1]}"
    )


def publish_params(
    vector: dict[str, float], publisher: KeyValuePublisher, config: Config
) -> None:
    """One atomic write of the whole validated vector."""
    validate_parameter_vector(vector, config.parameters)
    publisher.publish(config.loop.publish_key, json.dumps(vector, sort_keys=True))


def rollback_params(
    publisher: KeyValuePublisher, config: Config, state: YoloState
) -> None:
    """Re-publish the previous vector verbatim."""
    if state.prev_params is None:
        raise PublishError("no previous parameters recorded to roll back to")
    publisher.publish(config.loop.publish_key, json.dumps(state.prev_params, sort_keys=True))


def _search_seed(base_seed: int, run_tag: str) -> int:
    return zlib.crc32(f"{base_seed}:{run_tag}".encode())


def _effective_bounds(
    config: Config,
    relations: dict[str, belief.TransferRelation],
) -> tuple[dict[str, float], dict[str, tuple[float, float]]]:
    """Per-constraint offline bound: inverted through the calibrated relation
    where one exists, the static bound otherwise."""
    bounds: dict[str, float] = {}
    ranges: dict[str, tuple[float, float]] = {}
    for spec in config.constraints:
        bound = spec.bound
        if spec.online_bound is not None:
            rel_spec = config.relation_for_metric(spec.metric_name)
            if rel_spec is not None:
                try:
                    rng = belief.derive_target_range(
                        relations[rel_spec.relation_key],
                        spec.direction,
                        spec.online_bound,
                        metric_name=spec.metric_name,
                    )
                except belief.DegenerateRelationError:
                    pass
                else:
                    bound = (
                        rng.offline_low if spec.direction == "floor" else rng.offline_high
                    )
                    ranges[spec.constraint_id] = (rng.offline_low, rng.offline_high)
        bounds[spec.constraint_id] = bound
    return bounds, ranges


def _observed_violations(
    config: Config, episode: dict | None
) -> dict[str, float]:
    """Constraint violations measured on the most recent observed episode."""
    if episode is None:
        return {}
    online = episode.get("online_uplifts") or {}
    offline_metrics = (episode.get("offline_metrics") or {}).get("metrics", {})
    violations: dict[str, float] = {}
    for spec in config.constraints:
        if spec.online_bound is not None:
            rel = config.relation_for_metric(spec.metric_name)
            if rel is None or rel.online_metric not in online:
                continue
            value = online[rel.online_metric]
            violations[spec.constraint_id] = constraint_violation(
                value, spec, bound=spec.online_bound
            )
        elif spec.metric_name in offline_metrics:
            violations[spec.constraint_id] = constraint_violation(
                offline_metrics[spec.metric_name], spec
            )
    return violations


def run_one_shot(
    env: PipelineEnv,
    round_no: int,
    window: tuple[datetime, datetime],
    phase: str = PHASE_YOLO,
) -> RoundSummary:
    """Execute one full round; see module docstring for the step order."""
    config = env.config
    db = env.db
    run_tag = window[1].strftime("%Y%m%d_%H%M%S")
    run_dir = env.updates_dir / run_tag
    run_dir.mkdir(parents=True, exist_ok=True)
    summary = RoundSummary(round_no=round_no, run_tag=run_tag, phase=phase, window=window)
    coldstart = phase == PHASE_COLDSTART

    def step(name: str) -> None:
        if env.step_hook is not None:
            env.step_hook(name)

    if coldstart:
        publish_params(config.bootstrap_params, env.publisher, config)
        db.append_event("bootstrap_published", f"bootstrap:{run_tag}", {"round": round_no})

    # 1. observation report for the elapsed window
    report: AbReport | None = None
    if not coldstart:
        report, report_path = fetch_ab_report(
            env.report_source, window, round_no, env.clock,
            attempts=config.loop.fetch_attempts,
            retry_interval=config.loop.retry_interval_seconds,
        )
        summary.report_path = report_path
    step("fetch_report")

    # 2. store is opened by the caller; a fresh round just confirms liveness
    db.table_counts()
    step("init_db")

    # 3-4. pair the previous round's offline record with its online outcome
    handoff = load_handoff(env.updates_dir / HANDOFF_FILE)
    prev_payload: dict | None = None
    if handoff is not None:
        try:
            prev_payload = json.loads(Path(handoff.best_so_far).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise PipelineFatalError(f"handoff artifact unreadable: {exc}") from exc
        db.record_offline(
            handoff.run_tag,
            {
                "objective": prev_payload["value"],
                "params": prev_payload["params"],
                "metrics": prev_payload["metrics"],
                "uplifts": prev_payload["uplifts"],
            },
            prev_payload.get("top5", []),
        )
        db.mark_deployed(handoff.run_tag)
        summary.episode_key = handoff.run_tag
        summary.prev_params = prev_payload["params"]
    step("record_offline")

    if report is not None and handoff is not None:
        db.record_online(handoff.run_tag, report.uplift_fractions())
    step("record_online")

    # 5. slow calibration, one keyed update per relation observation
    relations = db.current_relations()
    if handoff is not None and not coldstart:
        for rel_spec in config.relations:
            key = f"lms:{handoff.run_tag}:{rel_spec.relation_key}"
            if db.has_relation_update(key):
                continue
            obs = db.observation(rel_spec.relation_key, handoff.run_tag)
            if obs is None:
                continue
            old = relations[rel_spec.relation_key]
            new, error = belief.lms_update(
                old, obs["offline_uplift"], obs["online_uplift"]
            )
            if db.record_relation_update(
                old, new, "lms_regression", key, error=error, episode_key=handoff.run_tag
            ):
                relations[rel_spec.relation_key] = new
                summary.lms_updates += 1
    step("lms_update")

    # 6-8. advisor consultation under the output guards
    weights = db.current_penalty_weights(config.penalty_seeds())
    carry = db.latest_event("penalty_channel") or {}
    penalty_state = PenaltyState(
        weights=weights,
        frozen_rounds_remaining=int(carry.get("frozen_rounds_remaining", 0)),
    )
    belief_magnitude = 0.0
    if not coldstart:
        context = advisor_mod.assemble_context(
            db, penalty_state.weights, out_path=run_dir / "llm_context.json"
        )
        step("export_context")
        prompt = advisor_mod.load_instructions() + "\n\n" + context.to_json()
        raw: str | None = None
        failure_reason: str | None = None
        try:
            raw = advisor_mod.invoke_advisor(
                env.advisor_command, prompt, timeout=config.advisor.timeout_seconds
            )
        except advisor_mod.AdvisorInvocationError as exc:
            failure_reason = str(exc)
        step("invoke_advisor")
        constraint_for_relation = {
            rel.relation_key: spec.constraint_id
            for spec in config.constraints
            for rel in [config.relation_for_metric(spec.metric_name)]
            if rel is not None
        }
        outcome = advisor_mod.process_advisor_output(
            raw, context, relations, penalty_state, db, run_tag,
            constraint_for_relation, config.lambda_min, config.lambda_max,
            failure_reason=failure_reason,
        )
        (run_dir / "llm_proposal.json").write_text(
            json.dumps(
                {
                    "kind": outcome.kind,
                    "rejection_reason": outcome.rejection_reason,
                    "entries": [
                        {
                            "relation_key": e.relation_key,
                            "delta_intercept": e.delta_intercept,
                            "penalty_multiplier": e.penalty_multiplier,
                            "reason": e.reason,
                            "evidence_episode_keys": e.evidence_episode_keys,
                        }
                        for e in outcome.applied_entries
                    ],
                    "raw": raw,
                },
                indent=2,
            ),
            encoding="utf-8",
        )
        summary.advisor_kind = outcome.kind
        summary.advisor_entries = len(outcome.applied_entries)
        belief_magnitude = outcome.belief_update_magnitude
        step("apply_proposal")
    else:
        step("export_context")
        step("invoke_advisor")
        step("apply_proposal")

    # 9. calibrated target ranges replace static bounds where possible
    effective_bounds, target_ranges = _effective_bounds(config, relations)
    summary.target_ranges = target_ranges
    step("derive_target_ranges")

    # 10. penalty weights from the most recent observed episode
    if not coldstart:
        episode = db.latest_online_episode()
        violations = _observed_violations(config, episode)
        thresholds = {c.constraint_id: c.violation_threshold for c in config.constraints}
        new_state, updates = preference.apply_round(
            penalty_state,
            violations,
            thresholds,
            belief_magnitude,
            freeze_threshold=config.loop.freeze_threshold,
            lambda_min=config.lambda_min,
            lambda_max=config.lambda_max,
        )
        summary.frozen = not updates and (
            penalty_state.frozen_rounds_remaining > 0
            or belief_magnitude >= config.loop.freeze_threshold
        )
        for update in updates:
            db.record_penalty_update(
                update.constraint_id,
                update.pressure,
                update.step,
                update.old_weight,
                update.new_weight,
                idempotency_key=f"pref:{run_tag}:{update.constraint_id}",
            )
        if summary.frozen and violations:
            db.append_event("penalty_freeze", f"freeze:{run_tag}", {"round": round_no})
        db.append_event(
            "penalty_channel",
            f"penalty_channel:{run_tag}",
            {"frozen_rounds_remaining": new_state.frozen_rounds_remaining},
        )
        penalty_state = new_state
    weights = db.current_penalty_weights(config.penalty_seeds())
    summary.penalty_weights = dict(weights)
    step("derive_penalty_weights")

    # Final: search under the calibrated frame, then publish
    base = env.evaluator.baseline_metrics(round_no)
    specs: dict[str, ConstraintSpec] = {}
    for spec in config.constraints:
        specs[spec.constraint_id] = replace(spec, penalty_weight=weights[spec.constraint_id])

    def objective_fn(params: dict[str, float]) -> float:
        metrics = env.evaluator.metrics(round_no, params)
        uplift = relative_uplift(
            metrics[config.objective_metric], base[config.objective_metric]
        )
        violations = {}
        for cid, cspec in specs.items():
            if cspec.value_kind == "uplift":
                value = relative_uplift(metrics[cspec.metric_name], base[cspec.metric_name])
            else:
                value = metrics[cspec.metric_name]
            violations[cid] = constraint_violation(value, cspec, bound=effective_bounds[cid])
        return composite_objective(uplift, violations, specs).value

    study = SearchStudy(
        bounds=config.parameters,
        seed=_search_seed(config.search.seed, run_tag),
        gamma=config.search.gamma,
        startup_trials=config.search.startup_trials,
        candidate_pool=config.search.candidate_pool,
        worker_count=config.search.workers,
        budget=config.search.budget,
        liar_floor=config.search.liar_floor,
    )
    best, top5 = run_search(objective_fn, study)
    logs_dir = run_dir / "search-logs"
    artifacts_dir = run_dir / "search-artifacts"
    logs_dir.mkdir(exist_ok=True)
    artifacts_dir.mkdir(exist_ok=True)
    study.export_trials_csv(logs_dir / f"{run_tag}_trial_table.csv")
    best_payload = {
        "run_tag": run_tag,
        "params": best.params,
        "value": best.value,
        "metrics": env.evaluator.metrics(round_no, best.params),
        "uplifts": env.evaluator.offline_uplifts(round_no, best.params),
        "top5": [{"params": t.params, "metrics": {"value": t.value}} for t in top5],
    }
    best_path = artifacts_dir / f"{run_tag}_best_so_far.json"
    best_path.write_text(json.dumps(best_payload, indent=2), encoding="utf-8")
    summary.best_value = best.value
    step("search")

    publish_params(best.params, env.publisher, config)
    db.append_event(
        "params_published",
        f"publish:{run_tag}",
        {"round": round_no, "params": best.params, "value": best.value},
    )
    summary.published_params = best.params
    if summary.prev_params is None:
        summary.prev_params = dict(config.bootstrap_params)
    step("publish")

    Handoff(run_tag, env.config_path, str(best_path)).save(env.updates_dir / HANDOFF_FILE)
    db.append_event("round_completed", f"round:{run_tag}", {"round": round_no, "phase": phase})
    step("write_handoff")
    return summary


def _phase_for_round(round_no: int) -> str:
    if round_no <= 1:
        return PHASE_COLDSTART
    if round_no == 2:
        return PHASE_INITIAL
    return PHASE_YOLO


def _append_event_log(path: Path, summary: RoundSummary, note: str | None = None) -> None:
    lines = [
        f"## round {summary.round_no} — {summary.run_tag}",
        f"- phase: {summary.phase}",
        f"- window: {summary.window[0].isoformat()} → {summary.window[1].isoformat()}",
        f"- report: {summary.report_path or '(coldstart)'}",
        f"- episode: {summary.episode_key or '—'}",
        f"- lms updates: {summary.lms_updates}",
        f"- advisor: {summary.advisor_kind or '—'} ({summary.advisor_entries} entries)"
        + (" [frozen]" if summary.frozen else ""),
        f"- best objective: {summary.best_value}",
        f"- published: {json.dumps(summary.published_params, sort_keys=True)}",
    ]
    if note:
        lines.append(f"- note: {note}")
    with open(path, "a", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n\n")


def yolo_loop(
    env: PipelineEnv,
    max_rounds: int | None = None,
    reset: bool = False,
) -> list[RoundSummary]:
    """Chain rounds until stopped; returns the summaries of completed rounds.

    Runs forever when ``max_rounds`` is None (production), otherwise stops
    after that many completed rounds (tests, demos).
    """
    config = env.config
    state_path = env.updates_dir / STATE_FILE
    log_path = env.updates_dir / EVENT_LOG_FILE
    if reset and state_path.exists():
        state_path.unlink()
    state = recover_state(state_path)
    summaries: list[RoundSummary] = []
    while max_rounds is None or len(summaries) < max_rounds:
        if state is None:
            anchor = snap_to_boundary(env.clock.now(), config.loop.snap_minutes)
            round_no = 1
            window = (anchor, anchor)
        else:
            round_no = state.round_no + 1
            window_from = state.window_to
            window_to = window_from + timedelta(seconds=config.loop.accumulation_seconds)
            window = (window_from, window_to)
            wait = (window_to - env.clock.now()).total_seconds()
            if wait > 0:
                env.clock.sleep(wait)
        phase = _phase_for_round(round_no)
        try:
            summary = run_one_shot(env, round_no, window, phase)
        except DataUnavailableError as exc:
            # Round aborted; keep the round number and move to the next window.
            with open(log_path, "a", encoding="utf-8") as handle:
                handle.write(
                    f"## round {round_no} — ABORTED\n- window: "
                    f"{window[0].isoformat()} → {window[1].isoformat()}\n- error: {exc}\n\n"
                )
            if state is not None:
                state = replace(state, window_from=window[0], window_to=window[1])
                state.save(state_path)
            continue
        state = YoloState(
            round_no=summary.round_no,
            last_push_time=env.clock.now(),
            window_from=summary.window[0],
            window_to=summary.window[1],
            prev_params=summary.prev_params,
            prev_report_path=summary.report_path,
        )
        state.save(state_path)
        _append_event_log(log_path, summary)
        summaries.append(summary)
    return summaries
