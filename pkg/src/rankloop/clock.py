"""Wall-clock abstraction so multi-hour waits compress to nothing in tests."""

from __future__ import annotations

import time
from datetime import datetime, timedelta
from typing import Protocol


class Clock(Protocol):
    def now(self) -> datetime: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> datetime:
        return datetime.now()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class VirtualClock:
    """Deterministic clock: sleeping advances time instantly."""

    def __init__(self, start: datetime):
        self._now = start

    def now(self) -> datetime:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._now += timedelta(seconds=seconds)

    def advance(self, seconds: float) -> None:
        self._now += timedelta(seconds=seconds)


def snap_to_boundary(stamp: datetime, minutes: int = 15) -> datetime:
    """Floor a timestamp to the enclosing boundary (minutes must divide 60)."""
    snapped_minute = (stamp.minute // minutes) * minutes
    return stamp.replace(minute=snapped_minute, second=0, microsecond=0)
