"""Wire format for observation-window uplift reports.

Format v1, line oriented:

    ab-report v1
    window <from-iso> <to-iso>
    <metric>\t<uplift-percent>%
    ...

A report is valid only when the file exists and holds at least three lines
(header, window, one metric). Uplift values are percentages on the wire;
consumers convert to fractions at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

from .errors import InvalidInputError, InvalidReportError

REPORT_HEADER = "ab-report v1"
MIN_VALID_LINES = 3


@dataclass
class AbReport:
    window_from: datetime
    window_to: datetime
    uplifts: dict[str, float]  # percent
    line_count: int

    def uplift_fractions(self) -> dict[str, float]:
        return {metric: value / 100.0 for metric, value in self.uplifts.items()}


def format_ab_report(
    uplifts_percent: dict[str, float], window: tuple[datetime, datetime]
) -> str:
    if not uplifts_percent:
        raise InvalidInputError("a report needs at least one metric")
    lines = [
        REPORT_HEADER,
        f"window {window[0].isoformat()} {window[1].isoformat()}",
    ]
    for metric, value in uplifts_percent.items():
        lines.append(f"{metric}\t{value!r}%")
    return "\n".join(lines) + "\n"


def parse_ab_report(text: str) -> AbReport:
    lines = [line for line in text.splitlines() if line.strip()]
    if len(lines) < MIN_VALID_LINES:
        raise InvalidReportError(f"report has {len(lines)} lines, need {MIN_VALID_LINES}")
    if lines[0].strip() != REPORT_HEADER:
        raise InvalidReportError(f"bad header {lines[0]!r}")
    window_parts = lines[1].split()
    if len(window_parts) != 3 or window_parts[0] != "window":
        raise InvalidReportError(f"bad window line {lines[1]!r}")
    try:
        window_from = datetime.fromisoformat(window_parts[1])
        window_to = datetime.fromisoformat(window_parts[2])
    except ValueError as exc:
        raise InvalidReportError(f"bad window timestamps: {exc}") from exc
    uplifts: dict[str, float] = {}
    for line in lines[2:]:
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].endswith("%"):
            raise InvalidReportError(f"bad metric line {line!r}")
        try:
            uplifts[parts[0]] = float(parts[1][:-1])
        except ValueError as exc:
            raise InvalidReportError(f"bad uplift value in {line!r}") from exc
    return AbReport(window_from, window_to, uplifts, line_count=len(lines))


def read_ab_report(path: str | Path) -> AbReport:
    """Parse a report file; missing or too-short files are retriable failures."""
    target = Path(path)
    if not target.exists():
        raise InvalidReportError(f"report file missing: {target}")
    return parse_ab_report(target.read_text(encoding="utf-8"))
