"""Command-line entry points.

Subcommands: ``one-shot`` (single round), ``yolo`` (continuous loop),
``simulate`` (N rounds against the built-in environment under a virtual
clock), ``export-llm-context``, ``inspect`` and ``plot``.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path

from . import advisor as advisor_mod
from .clock import SystemClock, VirtualClock, snap_to_boundary
from .config import Config, default_config, dump_config, load_config
from .errors import RankloopError
from .memory import init_schema
from .pipeline import (
    HANDOFF_FILE,
    STATE_FILE,
    PipelineEnv,
    recover_state,
    run_one_shot,
    yolo_loop,
)
from .publishers import FilePublisher, InMemoryPublisher, TcpKeyValuePublisher
from .simulator import SimulatorEnvironment


def _load_config(args) -> Config:
    if args.config:
        return load_config(args.config)
    return default_config()


def _build_publisher(kind: str, workspace: Path):
    if kind == "memory":
        return InMemoryPublisher()
    if kind == "file":
        return FilePublisher(workspace / "published")
    if kind.startswith("tcp:"):
        _, host, port = kind.split(":")
        return TcpKeyValuePublisher(host, int(port))
    raise SystemExit(f"unknown publisher kind {kind!r}")


def _build_env(args, config: Config, clock) -> PipelineEnv:
    workspace = Path(args.workspace)
    updates_dir = workspace / config.loop.updates_dir
    updates_dir.mkdir(parents=True, exist_ok=True)
    publisher = _build_publisher(args.publisher, workspace)
    db = init_schema(updates_dir / "memory" / "agent_memory.db", config.relations)
    environment = SimulatorEnvironment(config, publisher, workspace / "reports")
    command = config.advisor.command or [
        sys.executable, "-m", "rankloop.scripted_advisor", *config.advisor.extra_args
    ]
    return PipelineEnv(
        config=config,
        db=db,
        publisher=publisher,
        report_source=environment,
        evaluator=environment,
        clock=clock,
        updates_dir=updates_dir,
        advisor_command=command,
        config_path=args.config or "",
    )


def cmd_one_shot(args) -> int:
    config = _load_config(args)
    clock = SystemClock()
    env = _build_env(args, config, clock)
    state = recover_state(env.updates_dir / STATE_FILE)
    round_no = 1 if state is None else state.round_no + 1
    phase = "coldstart" if state is None else "yolo"
    if state is None:
        anchor = snap_to_boundary(clock.now(), config.loop.snap_minutes)
        window = (anchor, anchor)
    else:
        window = (state.window_to, snap_to_boundary(clock.now(), config.loop.snap_minutes))
    summary = run_one_shot(env, round_no, window, phase)
    print(f"round {summary.round_no} ({summary.phase}) complete: "
          f"best={summary.best_value:.4f} run_tag={summary.run_tag}")
    return 0


def cmd_yolo(args) -> int:
    config = _load_config(args)
    env = _build_env(args, config, SystemClock())
    summaries = yolo_loop(env, max_rounds=args.rounds, reset=args.reset)
    print(f"completed {len(summaries)} rounds")
    return 0


def cmd_simulate(args) -> int:
    config = _load_config(args)
    clock = VirtualClock(datetime(2026, 3, 1, 8, 0, 0))
    env = _build_env(args, config, clock)
    summaries = yolo_loop(env, max_rounds=args.rounds, reset=args.reset)
    for summary in summaries:
        advisor = summary.advisor_kind or "—"
        print(
            f"round {summary.round_no:2d} [{summary.phase:9s}] "
            f"best={summary.best_value:+.4f} lms={summary.lms_updates} advisor={advisor}"
        )
    relations = env.db.current_relations()
    print("\nfinal transfer relations:")
    for key in sorted(relations):
        rel = relations[key]
        print(f"  {key:28s} slope={rel.slope:+.4f} intercept={rel.intercept:+.4f}")
    return 0


def cmd_export_context(args) -> int:
    config = _load_config(args)
    workspace = Path(args.workspace)
    db = init_schema(
        workspace / config.loop.updates_dir / "memory" / "agent_memory.db", config.relations
    )
    weights = db.current_penalty_weights(config.penalty_seeds())
    context = advisor_mod.assemble_context(db, weights, out_path=args.out)
    if args.out is None:
        print(context.to_json())
    else:
        print(f"context written to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    config = _load_config(args)
    workspace = Path(args.workspace)
    db = init_schema(
        workspace / config.loop.updates_dir / "memory" / "agent_memory.db", config.relations
    )
    counts = db.table_counts()
    print("table counts:")
    for table, count in counts.items():
        print(f"  {table:32s} {count}")
    episodes, _ = db.query_recent(5, 0)
    if episodes:
        print("\nmost recent episodes:")
        for episode in episodes:
            uplifts = episode.get("online_uplifts")
            gmv = f"{uplifts.get('gmv', float('nan')):+.4f}" if uplifts else "pending"
            print(f"  {episode['episode_key']}  status={episode['status']:16s} gmv={gmv}")
    relations = db.current_relations()
    print("\ntransfer relations:")
    for key in sorted(relations):
        rel = relations[key]
        print(f"  {key:28s} slope={rel.slope:+.4f} intercept={rel.intercept:+.4f}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    config = _load_config(args)
    workspace = Path(args.workspace)
    db = init_schema(
        workspace / config.loop.updates_dir / "memory" / "agent_memory.db", config.relations
    )
    episodes, _ = db.query_recent(n_episodes=1000, n_updates=0)
    observed = [e for e in reversed(episodes) if e.get("online_uplifts")]
    if not observed:
        print("no observed episodes to plot")
        return 1
    metrics = sorted({m for e in observed for m in e["online_uplifts"]})
    fig, ax = plt.subplots(figsize=(9, 5))
    xs = range(1, len(observed) + 1)
    for metric in metrics:
        ys = [e["online_uplifts"].get(metric) for e in observed]
        ax.plot(xs, [y * 100 if y is not None else None for y in ys], marker="o", label=metric)
    ax.axhline(0.0, color="grey", linewidth=0.8, linestyle="--")
    ax.set_xlabel("observed round")
    ax.set_ylabel("online uplift (%)")
    ax.set_title(f"{config.market}: online uplift per round")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"plot written to {args.out}")
    return 0


def cmd_init_config(args) -> int:
    dump_config(default_config(args.market), args.out)
    print(f"default config written to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="rankloop",
        description="Closed-loop ranking-weight optimization toolkit",
    )
    parser.add_argument("--config", help="config JSON path (built-in desk config if omitted)")
    parser.add_argument("--workspace", default=".", help="working directory for state and artifacts")
    parser.add_argument(
        "--publisher", default="memory",
        help="parameter publisher backend: memory | file | tcp:<host>:<port>",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    one_shot = sub.add_parser("one-shot", help="run a single optimization round")
    one_shot.set_defaults(fn=cmd_one_shot)

    yolo = sub.add_parser("yolo", help="run the continuous loop")
    yolo.add_argument("--reset", action="store_true", help="clear loop state and coldstart")
    yolo.add_argument("--rounds", type=int, default=None, help="stop after N rounds")
    yolo.set_defaults(fn=cmd_yolo)

    simulate = sub.add_parser("simulate", help="run N rounds on the simulator, virtual clock")
    simulate.add_argument("--rounds", type=int, default=5)
    simulate.add_argument("--reset", action="store_true")
    simulate.set_defaults(fn=cmd_simulate)

    export = sub.add_parser("export-llm-context", help="emit the advisor context JSON")
    export.add_argument("--out", default=None)
    export.set_defaults(fn=cmd_export_context)

    inspect = sub.add_parser("inspect", help="summarize the memory store")
    inspect.set_defaults(fn=cmd_inspect)

    plot = sub.add_parser("plot", help="emit a round-trend chart from recorded episodes")
    plot.add_argument("--out", default="rankloop-trends.png")
    plot.set_defaults(fn=cmd_plot)

    init_cfg = sub.add_parser("init-config", help="write the default config JSON")
    init_cfg.add_argument("--out", default="rankloop-config.json")
    init_cfg.add_argument("--market", default="sim-desk")
    init_cfg.set_defaults(fn=cmd_init_config)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except RankloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
