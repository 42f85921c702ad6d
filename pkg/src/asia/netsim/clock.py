"""Logical clock, event queue and the structured event log."""

from __future__ import annotations

import hashlib
import heapq
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional


class Timer:
    __slots__ = ("time", "fn", "args", "cancelled")

    def __init__(self, time: int, fn: Callable, args: tuple) -> None:
        self.time = time
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    """Single-threaded event loop. Ties at equal time run in insertion order."""

    def __init__(self) -> None:
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self.processed = 0

    def call_at(self, time: int, fn: Callable, *args) -> Timer:
        if time < self.now:
            raise ValueError(f"cannot schedule at {time}, clock is at {self.now}")
        timer = Timer(int(time), fn, args)
        heapq.heappush(self._queue, (timer.time, next(self._seq), timer))
        return timer

    def call_later(self, delay: int, fn: Callable, *args) -> Timer:
        return self.call_at(self.now + int(delay), fn, *args)

    def pending(self) -> int:
        return sum(1 for _, _, t in self._queue if not t.cancelled)

    def next_time(self) -> Optional[int]:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def advance(self, until: int) -> int:
        """Run every event with time <= ``until``; the clock ends at ``until``."""
        if until < self.now:
            raise ValueError("cannot move the clock backwards")
        count = 0
        queue = self._queue
        while queue and queue[0][0] <= until:
            time, _, timer = heapq.heappop(queue)
            if timer.cancelled:
                continue
            self.now = time
            timer.fn(*timer.args)
            count += 1
        self.now = until
        self.processed += count
        return count

    def run_until_idle(self, limit: int) -> int:
        """Advance until the queue drains or the clock would pass ``limit``."""
        count = 0
        while True:
            nxt = self.next_time()
            if nxt is None or nxt > limit:
                return count
            count += self.advance(nxt)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, bool):
        return "1" if value else "0"
    if hasattr(value, "name") and not isinstance(value, str):
        return value.name
    text = str(value)
    return text.replace(" ", "_") if text else "-"


@dataclass(frozen=True)
class Event:
    time: int
    kind: str
    fields: dict

    def get(self, key, default=None):
        return self.fields.get(key, default)


class EventLog:
    """One line per event: ``<time:012d> <kind> key=value ...``.

    Field order is whatever the emitter passed, so emitters keep it fixed.
    """

    def __init__(self, clock: Callable[[], int]) -> None:
        self._clock = clock
        self.lines: list[str] = []
        self._listeners: list[Callable[[Event], None]] = []

    def emit(self, kind: str, /, **fields) -> None:
        now = self._clock()
        parts = [f"{now:012d}", kind]
        parts.extend(f"{k}={_fmt(v)}" for k, v in fields.items())
        self.lines.append(" ".join(parts))
        if self._listeners:
            ev = Event(now, kind, {k: _fmt(v) for k, v in fields.items()})
            for fn in self._listeners:
                fn(ev)

    def subscribe(self, fn: Callable[[Event], None]) -> None:
        self._listeners.append(fn)

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines:
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def write(self, path) -> None:
        Path(path).write_text(self.text())

    def events(self, kind: Optional[str] = None) -> list[Event]:
        out = (parse_event(line) for line in self.lines)
        return [e for e in out if kind is None or e.kind == kind]


def parse_event(line: str) -> Event:
    parts = line.split()
    fields = {}
    for item in parts[2:]:
        key, _, value = item.partition("=")
        fields[key] = value
    return Event(int(parts[0]), parts[1], fields)


def parse_log(lines: Iterable[str]) -> list[Event]:
    return [parse_event(line) for line in lines if line.strip()]
