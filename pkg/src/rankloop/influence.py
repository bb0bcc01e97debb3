"""Decomposable per-factor ranking influence.

A ranking over one request is a permutation induced by total scores. The only
event that can change it is a pairwise swap, and a swap is driven by the
pairwise margin. Attributing each factor's slice of that margin, normalized so
the slices sum to one, gives a per-factor influence share that can be traded
off quantitatively: pushing one factor's share up necessarily pushes the
others down by the same total.

Aggregation weights pairs by the better of the two ranks, so influence near
the top of the list counts for more.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import (
    ConfigurationError,
    InvalidInputError,
    NoSignalError,
    UnknownItemError,
)

DEFAULT_TAU = 10.0
DEFAULT_TOP_K = 10
DEFAULT_TOP_L = 10

PAIR_STRATEGIES = ("exhaustive", "adjacent")


@dataclass
class Item:
    item_id: str
    scores: dict[str, float]


@dataclass
class Request:
    request_id: str
    items: list[Item]

    def item(self, item_id: str) -> Item:
        for it in self.items:
            if it.item_id == item_id:
                return it
        raise UnknownItemError(f"item {item_id!r} not in request {self.request_id!r}")

    def factor_names(self) -> frozenset[str]:
        if not self.items:
            return frozenset()
        return frozenset(self.items[0].scores)


@dataclass
class FactorScoreTable:
    requests: list[Request] = field(default_factory=list)

    def validate(self) -> None:
        """Check the structural invariants: shared factor set and unique ids."""
        for req in self.requests:
            seen: set[str] = set()
            factors = req.factor_names()
            for it in req.items:
                if it.item_id in seen:
                    raise InvalidInputError(
                        f"duplicate item id {it.item_id!r} in request {req.request_id!r}"
                    )
                seen.add(it.item_id)
                if frozenset(it.scores) != factors:
                    raise InvalidInputError(
                        f"item {it.item_id!r} does not share the factor set of "
                        f"request {req.request_id!r}"
                    )


@dataclass
class RankedRequest:
    request_id: str
    permutation: list[str]
    rank_of: dict[str, int]


@dataclass
class PairShare:
    pair: tuple[str, str] | None
    budget: float
    shares: dict[str, float]
    informative: bool


@dataclass
class InfluenceReport:
    influence: dict[str, float]
    pair_count: int
    weight_total: float
    tau: float
    pair_selection: str


def rank_items(request: Request) -> RankedRequest:
    """Sort a request by descending total score, ties broken by ascending item id."""
    if not request.items:
        raise InvalidInputError(f"request {request.request_id!r} has no items")
    totals: dict[str, float] = {}
    for it in request.items:
        total = 0.0
        for factor, score in it.scores.items():
            if not math.isfinite(score):
                raise InvalidInputError(
                    f"non-finite score for item {it.item_id!r} factor {factor!r}"
                )
            total += score
        totals[it.item_id] = total
    permutation = sorted(totals, key=lambda iid: (-totals[iid], iid))
    rank_of = {iid: rank for rank, iid in enumerate(permutation, start=1)}
    return RankedRequest(request.request_id, permutation, rank_of)


def factor_margins(request: Request, i: str, j: str) -> dict[str, float]:
    """Per-factor score difference between items ``i`` and ``j``."""
    if i == j:
        raise InvalidInputError(f"margin requested for identical items {i!r}")
    a, b = request.item(i).scores, request.item(j).scores
    return {factor: a[factor] - b[factor] for factor in a}


def pairwise_share(
    margins: dict[str, float], pair: tuple[str, str] | None = None
) -> PairShare:
    """L1-normalize absolute margins into per-factor shares.

    A pair whose margins are all exactly zero carries no ranking signal and is
    flagged non-informative instead of producing shares.
    """
    budget = 0.0
    for factor, margin in margins.items():
        if not math.isfinite(margin):
            raise InvalidInputError(f"non-finite margin for factor {factor!r}")
        budget += abs(margin)
    if budget == 0.0:
        return PairShare(pair=pair, budget=0.0, shares={}, informative=False)
    shares = {factor: abs(margin) / budget for factor, margin in margins.items()}
    return PairShare(pair=pair, budget=budget, shares=shares, informative=True)


def pair_weight(rank_i: int, rank_j: int, tau: float) -> float:
    """Position weight exp(-min(rank_i, rank_j) / tau); ranks are 1-based."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if rank_i < 1 or rank_j < 1:
        raise InvalidInputError(f"ranks must be >= 1, got ({rank_i}, {rank_j})")
    return math.exp(-min(rank_i, rank_j) / tau)


def select_pairs(
    ranked: RankedRequest,
    k: int | None = DEFAULT_TOP_K,
    l: int | None = DEFAULT_TOP_L,
    strategy: str = "exhaustive",
) -> list[tuple[str, str]]:
    """Item pairs within the top-(k+l) region, ordered by (min rank, max rank).

    Passing ``k=None`` and ``l=None`` selects over the full request. A region
    larger than the request is silently truncated.
    """
    if strategy not in PAIR_STRATEGIES:
        raise ConfigurationError(f"unknown pair strategy {strategy!r}")
    if k is None and l is None:
        depth = len(ranked.permutation)
    else:
        depth = (k or 0) + (l or 0)
        if depth < 2:
            raise ConfigurationError(f"top region k+l must be >= 2, got {depth}")
    region = ranked.permutation[: min(depth, len(ranked.permutation))]
    if strategy == "adjacent":
        return list(zip(region, region[1:]))
    return list(itertools.combinations(region, 2))


def aggregate_influence(
    table: FactorScoreTable,
    tau: float = DEFAULT_TAU,
    k: int | None = DEFAULT_TOP_K,
    l: int | None = DEFAULT_TOP_L,
    strategy: str = "exhaustive",
) -> InfluenceReport:
    """Rank-weighted mean of pairwise shares across every informative pair.

    Non-informative pairs are excluded from both the numerator and the weight
    normalizer, so the reported shares always sum to one.
    """
    numerators: dict[str, float] = {}
    weight_total = 0.0
    pair_count = 0
    for request in table.requests:
        ranked = rank_items(request)
        for i, j in select_pairs(ranked, k, l, strategy):
            share = pairwise_share(factor_margins(request, i, j), pair=(i, j))
            if not share.informative:
                continue
            w = pair_weight(ranked.rank_of[i], ranked.rank_of[j], tau)
            for factor, s in share.shares.items():
                numerators[factor] = numerators.get(factor, 0.0) + w * s
            weight_total += w
            pair_count += 1
    if pair_count == 0:
        raise NoSignalError("no informative pairs in the dataset")
    influence = {factor: num / weight_total for factor, num in numerators.items()}
    return InfluenceReport(
        influence=influence,
        pair_count=pair_count,
        weight_total=weight_total,
        tau=tau,
        pair_selection=strategy,
    )


def load_table_rows(path: str | Path, delimiter: str = "\t") -> FactorScoreTable:
    """Read the columnar form: one ``request_id, item_id, factor, score`` row per line.

    The first line is a header and is skipped. Row order determines item order
    within a request.
    """
    requests: dict[str, Request] = {}
    items: dict[tuple[str, str], Item] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter=delimiter)
        next(reader, None)
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise InvalidInputError(f"expected 4 columns, got {row!r}")
            request_id, item_id, factor, score_text = row
            try:
                score = float(score_text)
            except ValueError as exc:
                raise InvalidInputError(f"bad score {score_text!r}") from exc
            req = requests.setdefault(request_id, Request(request_id, []))
            key = (request_id, item_id)
            if key not in items:
                items[key] = Item(item_id, {})
                req.items.append(items[key])
            items[key].scores[factor] = score
    table = FactorScoreTable(list(requests.values()))
    table.validate()
    return table


def dump_table_rows(table: FactorScoreTable, path: str | Path, delimiter: str = "\t") -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, delimiter=delimiter)
        writer.writerow(["request_id", "item_id", "factor", "score"])
        for req in table.requests:
            for it in req.items:
                for factor, score in it.scores.items():
                    writer.writerow([req.request_id, it.item_id, factor, repr(score)])


def load_table_json(source: str | Path | Iterable) -> FactorScoreTable:
    """Read the JSON form: an array of ``{request_id, items: [{item_id, scores}]}``."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as handle:
            raw = json.load(handle)
    else:
        raw = source
    requests = [
        Request(
            request_id=str(entry["request_id"]),
            items=[
                Item(str(item["item_id"]), {str(f): float(s) for f, s in item["scores"].items()})
                for item in entry["items"]
            ],
        )
        for entry in raw
    ]
    table = FactorScoreTable(requests)
    table.validate()
    return table


def dump_table_json(table: FactorScoreTable, path: str | Path) -> None:
    payload = [
        {
            "request_id": req.request_id,
            "items": [{"item_id": it.item_id, "scores": it.scores} for it in req.items],
        }
        for req in table.requests
    ]
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
