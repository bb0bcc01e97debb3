"""Built-in deterministic advisor.

Implements the structural-break heuristic on its own: recompute each
relation's residuals over the most recent observed episodes under the current
model, and when at least three consecutive residuals share a sign and clear a
magnitude floor, propose an intercept delta equal to the (clamped) mean of
that run. Anything less decisive yields an empty proposal.

Runs as a subprocess (``python -m rankloop.scripted_advisor``) reading the
prompt from stdin, so it exercises the same invocation path as any external
advisor command.
"""

from __future__ import annotations

import json
import sys

MAGNITUDE_FLOOR = 0.01
RUN_LENGTH = 3
DELTA_LIMIT = 0.1


def propose(context: dict, magnitude_floor: float = MAGNITUDE_FLOOR) -> dict:
    """Pure decision rule: context document in, proposal document out."""
    proposals = []
    episodes = context.get("episodes", [])
    for relation in context.get("prior_relations", []):
        key = relation["relation_key"]
        if "~" not in key:
            continue
        online_metric, offline_metric = key.split("~", 1)
        slope = float(relation["slope"])
        intercept = float(relation["intercept"])
        run: list[tuple[str, float]] = []
        for episode in episodes:  # newest first
            online = episode.get("online_uplifts") or {}
            offline = (episode.get("offline_metrics") or {}).get("uplifts", {})
            if online_metric not in online or offline_metric not in offline:
                continue
            u_on = float(online[online_metric])
            u_off = float(offline[offline_metric])
            residual = u_on - (slope * u_off + intercept)
            if abs(residual) < magnitude_floor:
                break
            if run and (residual > 0) != (run[-1][1] > 0):
                break
            run.append((episode["episode_key"], residual))
        if len(run) < RUN_LENGTH:
            continue
        mean_residual = sum(r for _, r in run) / len(run)
        delta = max(-DELTA_LIMIT, min(DELTA_LIMIT, mean_residual))
        proposals.append(
            {
                "relation_key": key,
                "delta_intercept": delta,
                "penalty_multiplier": 1.0,
                "reason": (
                    f"{len(run)} consecutive same-sign residuals on {key}; "
                    f"mean residual {mean_residual:.4f}"
                ),
                "evidence_episode_keys": [ek for ek, _ in run],
            }
        )
    return {"proposal_id": "scripted-residual-run", "proposals": proposals}


def context_from_prompt(text: str) -> dict:
    """Locate the context document inside the full prompt.

    The prompt is instructions followed by one JSON object; instructions may
    themselves contain JSON snippets, so take the last parseable top-level
    object that carries the expected fields.
    """
    candidates = _balanced_objects(text)
    for candidate in reversed(candidates):
        try:
            parsed = json.loads(candidate)
        except ValueError:
            continue
        if isinstance(parsed, dict) and "prior_relations" in parsed:
            return parsed
    raise ValueError("no context document found in prompt")


def _balanced_objects(text: str) -> list[str]:
    objects = []
    depth = 0
    start = None
    in_string = False
    escaped = False
    for index, char in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            if depth > 0:
                in_string = True
            continue
        if char == "{":
            if depth == 0:
                start = index
            depth += 1
        elif char == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                objects.append(text[start : index + 1])
    return objects


def main() -> int:
    prompt = sys.stdin.read()
    try:
        context = context_from_prompt(prompt)
    except ValueError as exc:
        print(f"scripted advisor: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(propose(context)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
