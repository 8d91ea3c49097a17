"""Deterministic discrete-event core: simulated clock, event queue, trace."""

from __future__ import annotations

import heapq
import json
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable


class EventScheduler:
    """Priority-queue event loop owning the simulated clock.

    Ties at the same timestamp fire in scheduling order (monotone sequence
    number), which is what makes runs reproducible: the trace of a run is a
    pure function of the scenario and seed.
    """

    def __init__(self) -> None:
        self.now: float = 0.0
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0

    def at(self, time: float, fn: Callable[[], None]) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past: {time} < {self.now}")
        heapq.heappush(self._heap, (time, self._seq, fn))
        self._seq += 1

    def after(self, delay: float, fn: Callable[[], None]) -> None:
        self.at(self.now + delay, fn)

    def idle(self) -> bool:
        return not self._heap

    def run(self, until: float | None = None) -> None:
        """Fire events until the queue drains (or the clock passes `until`)."""
        while self._heap:
            t, _, fn = self._heap[0]
            if until is not None and t > until:
                self.now = until
                return
            heapq.heappop(self._heap)
            self.now = t
            fn()


@dataclass(frozen=True)
class TraceEvent:
    time: float
    actor: str
    kind: str
    payload: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {"t": self.time, "actor": self.actor, "kind": self.kind}
        rec.update(self.payload)
        return json.dumps(rec, sort_keys=True)


class EventTrace:
    """Append-only timestamped record of everything the simulation did."""

    def __init__(self) -> None:
        self.events: list[TraceEvent] = []

    def emit(self, time: float, actor: str, kind: str, **payload: Any) -> None:
        if self.events and time < self.events[-1].time:
            raise ValueError("trace timestamps must be non-decreasing")
        self.events.append(TraceEvent(time, actor, kind, payload))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def filter(self, kind: str | None = None, actor: str | None = None) -> list[TraceEvent]:
        out = []
        for ev in self.events:
            if kind is not None and ev.kind != kind:
                continue
            if actor is not None and ev.actor != actor:
                continue
            out.append(ev)
        return out

    def to_jsonl(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self.events)


def stable_hash(*parts: Any) -> int:
    """Deterministic 63-bit fingerprint of the given parts.

    Used for simulated KV payloads: migration correctness is checked
    bit-exactly on these fingerprints instead of real tensor bytes. CRC
    pairs instead of a cryptographic hash: this runs once per appended
    token and only needs to be stable and well-spread, not secure.
    """
    text = "\x1f".join(str(p) for p in parts).encode()
    hi = zlib.crc32(text)
    lo = zlib.crc32(text, 0x9E3779B9)
    return ((hi << 32) | lo) >> 1
