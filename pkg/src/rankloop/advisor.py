"""External-advisor channel: context assembly, invocation, and output guarding.

The advisor is any command that reads a prompt on stdin and prints a JSON
proposal on stdout. Whatever it prints passes through a layered guard --
extraction, schema coercion, key whitelist, evidence check, hard clamps,
global weight bounds -- before it can move any state, and every failure mode
degrades to an explicit no-op instead of aborting the round.
"""

from __future__ import annotations

import importlib.resources
import json
import math
import re
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import belief
from .belief import INTERCEPT_JUMP_LIMIT, TransferRelation
from .errors import (
    AdvisorInvocationError,
    ExtractionError,
    ProposalRejectedError,
)
from .memory import MemoryDb
from .preference import PenaltyState

EPISODE_CAP = 20
HISTORY_CAP = 30
MULTIPLIER_MIN = 0.5
MULTIPLIER_MAX = 2.0
DEFAULT_TIMEOUT_SECONDS = 300.0

_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def load_instructions() -> str:
    ref = importlib.resources.files("rankloop").joinpath("assets/advisor_instructions.md")
    return ref.read_text(encoding="utf-8")


@dataclass
class AdvisorContext:
    prior_relations: list[dict]
    episodes: list[dict]
    update_history: list[dict]
    penalty_state: dict[str, float]

    def relation_keys(self) -> set[str]:
        return {r["relation_key"] for r in self.prior_relations}

    def to_json(self) -> str:
        return json.dumps(
            {
                "prior_relations": self.prior_relations,
                "episodes": self.episodes,
                "update_history": self.update_history,
                "penalty_state": self.penalty_state,
            },
            indent=2,
        )


@dataclass
class ProposalEntry:
    relation_key: str
    delta_intercept: float
    penalty_multiplier: float
    reason: str
    evidence_episode_keys: list[str]


@dataclass
class AdvisorProposal:
    proposal_id: str
    entries: list[ProposalEntry]
    dropped: int = 0


@dataclass
class AdvisorOutcome:
    kind: str  # "applied" | "noop_fallback"
    applied_entries: list[ProposalEntry] = field(default_factory=list)
    rejection_reason: str | None = None
    belief_update_magnitude: float = 0.0


def assemble_context(
    db: MemoryDb,
    penalty_weights: dict[str, float],
    out_path: str | Path | None = None,
) -> AdvisorContext:
    """Deterministic snapshot of relations, recent episodes, update history and
    penalty weights; optionally written to a file for audit."""
    relations = [
        {
            "relation_key": rel.relation_key,
            "slope": rel.slope,
            "intercept": rel.intercept,
            "eta": rel.eta,
        }
        for rel in sorted(db.current_relations().values(), key=lambda r: r.relation_key)
    ]
    episodes, updates = db.query_recent(EPISODE_CAP, HISTORY_CAP)
    context = AdvisorContext(
        prior_relations=relations,
        episodes=episodes,
        update_history=updates,
        penalty_state=dict(penalty_weights),
    )
    if out_path is not None:
        Path(out_path).write_text(context.to_json(), encoding="utf-8")
    return context


def invoke_advisor(
    command: list[str], prompt: str, timeout: float = DEFAULT_TIMEOUT_SECONDS
) -> str:
    """Run the advisor command, prompt on stdin, response from stdout.

    Spawn failures, nonzero exits and timeouts (child killed) all surface as
    :class:`AdvisorInvocationError` for the caller to map to a no-op.
    """
    try:
        result = subprocess.run(
            command,
            input=prompt,
            capture_output=True,
            text=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired as exc:
        raise AdvisorInvocationError(f"advisor timed out after {timeout}s") from exc
    except OSError as exc:
        raise AdvisorInvocationError(f"advisor spawn failed: {exc}") from exc
    if result.returncode != 0:
        raise AdvisorInvocationError(
            f"advisor exited {result.returncode}: {result.stderr.strip()[:200]}"
        )
    return result.stdout


def extract_json(raw: str) -> dict:
    """Pull one JSON object out of possibly noisy text.

    Tries, in order: the whole text, each fenced code block, and the first
    brace-balanced substring (string- and escape-aware scan).
    """
    if not isinstance(raw, str) or not raw.strip():
        raise ExtractionError("empty advisor output")
    try:
        parsed = json.loads(raw)
        if isinstance(parsed, dict):
            return parsed
    except ValueError:
        pass
    for block in _FENCE_RE.findall(raw):
        try:
            parsed = json.loads(block)
            if isinstance(parsed, dict):
                return parsed
        except ValueError:
            continue
    candidate = _first_balanced_object(raw)
    if candidate is not None:
        try:
            parsed = json.loads(candidate)
            if isinstance(parsed, dict):
                return parsed
        except ValueError:
            pass
    raise ExtractionError("no JSON object found in advisor output")


def _first_balanced_object(text: str) -> str | None:
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
                return text[start : index + 1]
    return None


def _coerce_float(value, default: float) -> float | None:
    """float() with a default for absent values; None marks a dud entry."""
    if value is None:
        return default
    try:
        number = float(value)
    except (TypeError, ValueError):
        return None
    if math.isnan(number):
        return None
    return number


def validate_proposal(parsed: dict, context: AdvisorContext) -> AdvisorProposal:
    """Coerce, whitelist and clamp a parsed document into a safe proposal.

    Malformed entries and entries without evidence are dropped; an unknown
    relation key rejects the document outright. Surviving numbers are clamped
    to the intercept-jump and multiplier ranges.
    """
    if not isinstance(parsed, dict):
        raise ProposalRejectedError("proposal document is not an object")
    raw_entries = parsed.get("proposals")
    if not isinstance(raw_entries, list):
        raise ProposalRejectedError("missing proposals array")
    known = context.relation_keys()
    entries: list[ProposalEntry] = []
    dropped = 0
    for raw in raw_entries:
        if not isinstance(raw, dict):
            dropped += 1
            continue
        relation_key = raw.get("relation_key")
        if not isinstance(relation_key, str) or not relation_key:
            dropped += 1
            continue
        if relation_key not in known:
            raise ProposalRejectedError(f"unknown relation key {relation_key!r}")
        delta = _coerce_float(raw.get("delta_intercept"), default=0.0)
        multiplier = _coerce_float(raw.get("penalty_multiplier"), default=1.0)
        if delta is None or multiplier is None:
            dropped += 1
            continue
        evidence = raw.get("evidence_episode_keys")
        if not isinstance(evidence, list) or not evidence:
            dropped += 1
            continue
        entries.append(
            ProposalEntry(
                relation_key=relation_key,
                delta_intercept=max(-INTERCEPT_JUMP_LIMIT, min(INTERCEPT_JUMP_LIMIT, delta)),
                penalty_multiplier=max(MULTIPLIER_MIN, min(MULTIPLIER_MAX, multiplier)),
                reason=str(raw.get("reason", "")),
                evidence_episode_keys=[str(k) for k in evidence],
            )
        )
    return AdvisorProposal(
        proposal_id=str(parsed.get("proposal_id", "unidentified")),
        entries=entries,
        dropped=dropped,
    )


def apply_proposal(
    proposal: AdvisorProposal,
    relations: dict[str, TransferRelation],
    penalty_state: PenaltyState,
    db: MemoryDb,
    run_tag: str,
    constraint_for_relation: dict[str, str],
    lambda_min: float,
    lambda_max: float,
) -> AdvisorOutcome:
    """Apply a validated proposal: bounded intercept jumps plus multiplicative
    weight scaling inside the global clamp, every change audited.

    Mutates ``relations`` and ``penalty_state`` in place and returns the
    outcome (a no-op fallback when the proposal carries no entries).
    """
    if not proposal.entries:
        db.append_event(
            "advisor_noop",
            f"advisor:{run_tag}",
            {"reason": "empty proposal", "proposal_id": proposal.proposal_id},
        )
        return AdvisorOutcome(kind="noop_fallback", rejection_reason="empty proposal")

    applied: list[ProposalEntry] = []
    magnitude = 0.0
    for index, entry in enumerate(proposal.entries):
        old = relations[entry.relation_key]
        new = belief.apply_intercept_jump(old, entry.delta_intercept)
        # In-memory state follows the store: a replayed key means the change
        # already landed in a previous attempt of this round.
        if db.record_relation_update(
            old,
            new,
            method="llm_proposal",
            idempotency_key=f"llm:{run_tag}:{index}:{entry.relation_key}",
            episode_key=entry.evidence_episode_keys[0],
        ):
            relations[entry.relation_key] = new
        magnitude += abs(entry.delta_intercept)

        constraint_id = constraint_for_relation.get(entry.relation_key)
        if constraint_id is not None and entry.penalty_multiplier != 1.0:
            old_weight = penalty_state.weights[constraint_id]
            new_weight = min(lambda_max, max(lambda_min, old_weight * entry.penalty_multiplier))
            if db.record_penalty_update(
                constraint_id,
                pressure=0.0,
                step=math.log(entry.penalty_multiplier),
                old_weight=old_weight,
                new_weight=new_weight,
                idempotency_key=f"llm:{run_tag}:{index}:{constraint_id}",
            ):
                penalty_state.weights[constraint_id] = new_weight
        applied.append(entry)

    db.append_event(
        "advisor_applied",
        f"advisor:{run_tag}",
        {
            "proposal_id": proposal.proposal_id,
            "entries": len(applied),
            "dropped": proposal.dropped,
            "belief_magnitude": magnitude,
        },
    )
    return AdvisorOutcome(
        kind="applied", applied_entries=applied, belief_update_magnitude=magnitude
    )


def process_advisor_output(
    raw: str | None,
    context: AdvisorContext,
    relations: dict[str, TransferRelation],
    penalty_state: PenaltyState,
    db: MemoryDb,
    run_tag: str,
    constraint_for_relation: dict[str, str],
    lambda_min: float,
    lambda_max: float,
    failure_reason: str | None = None,
) -> AdvisorOutcome:
    """Guard and apply one raw advisor output; never raises on content.

    ``raw=None`` with a ``failure_reason`` covers invocation-level failures
    (spawn, exit code, timeout), which fall through to the same no-op path as
    unparseable or rejected content.
    """
    if raw is None:
        reason = failure_reason or "advisor invocation failed"
    else:
        try:
            proposal = validate_proposal(extract_json(raw), context)
        except (ExtractionError, ProposalRejectedError) as exc:
            reason = str(exc)
        else:
            return apply_proposal(
                proposal, relations, penalty_state, db, run_tag,
                constraint_for_relation, lambda_min, lambda_max,
            )
    db.append_event("advisor_noop", f"advisor:{run_tag}", {"reason": reason})
    return AdvisorOutcome(kind="noop_fallback", rejection_reason=reason)


def context_timestamp(now: datetime | None = None) -> str:
    stamp = now if now is not None else datetime.now(timezone.utc)
    return stamp.strftime("%Y%m%d_%H%M%S")
