"""Deterministic discrete-event kernel.

Virtual clock plus a heap of events ordered by (time, phase, seq). Phase 0 is
reserved for injected commands so that a command stamped at time t always
applies before same-time simulation events; seq preserves scheduling order
within a phase. Randomness comes only from named substreams derived from the
master seed, so consuming one stream never perturbs another.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

import numpy as np

from .errors import SchedulingError


class EventKind(Enum):
    PASSENGER_ARRIVAL = "PassengerArrival"
    TAXI_ARRIVED_AT_NODE = "TaxiArrivedAtNode"
    CHARGE_COMPLETE = "ChargeComplete"
    JAM_STATE_CHANGED = "JamStateChanged"
    DISPATCH_TICK = "DispatchTick"
    COMMAND_APPLIED = "CommandApplied"
    NEGOTIATION_TIMEOUT = "NegotiationTimeout"
    METRICS_SAMPLE = "MetricsSample"


_COMMAND_PHASE = 0
_EVENT_PHASE = 1


@dataclass(frozen=True)
class SimEvent:
    time: float
    seq: int
    kind: EventKind
    payload: dict = field(default_factory=dict)

    def sort_key(self):
        phase = _COMMAND_PHASE if self.kind is EventKind.COMMAND_APPLIED else _EVENT_PHASE
        return (self.time, phase, self.seq)


STREAM_NAMES = ("demand-timing", "demand-od", "service-noise", "tie-salt")


class RngStreams:
    """Independent named generators, each seeded from the master seed.

    Seeds come from sha256 over master_seed and the stream name, so they are
    stable across processes and immune to PYTHONHASHSEED.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._streams: dict[str, np.random.Generator] = {}
        for name in STREAM_NAMES:
            digest = hashlib.sha256(f"{self.master_seed}:{name}".encode()).digest()
            self._streams[name] = np.random.default_rng(
                int.from_bytes(digest[:8], "big")
            )

    def stream(self, name: str) -> np.random.Generator:
        try:
            return self._streams[name]
        except KeyError:
            raise KeyError(f"unknown rng stream {name!r}") from None


@dataclass(frozen=True)
class SimSnapshot:
    """Immutable, serializable view of a run at one instant.

    Two snapshots of the same seeded run at the same virtual time are equal
    and serialize to identical bytes.
    """

    time: float
    taxis: tuple
    stations: tuple
    roads: tuple
    requests: tuple
    metrics: dict

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "taxis": list(self.taxis),
            "stations": list(self.stations),
            "roads": list(self.roads),
            "requests": list(self.requests),
            "metrics": self.metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SimSnapshot":
        raw = json.loads(text)
        return cls(
            time=raw["time"],
            taxis=tuple(raw["taxis"]),
            stations=tuple(raw["stations"]),
            roads=tuple(raw["roads"]),
            requests=tuple(raw["requests"]),
            metrics=raw["metrics"],
        )


class Engine:
    """Event queue and clock. Strictly single-threaded."""

    def __init__(self, master_seed: int = 0):
        self.now = 0.0
        self.rng = RngStreams(master_seed)
        self._heap: list[tuple[tuple, SimEvent]] = []
        self._seq = 0
        self.handlers: dict[EventKind, Callable[[SimEvent], None]] = {}
        self.processed_count = 0

    def schedule(self, time: float, kind: EventKind, payload: Optional[dict] = None) -> SimEvent:
        if time < self.now:
            raise SchedulingError(f"event {kind.value} at {time} is before clock {self.now}")
        ev = SimEvent(float(time), self._seq, kind, payload or {})
        self._seq += 1
        heapq.heappush(self._heap, (ev.sort_key(), ev))
        return ev

    def on(self, kind: EventKind, handler: Callable[[SimEvent], None]) -> None:
        self.handlers[kind] = handler

    def peek_time(self) -> Optional[float]:
        return self._heap[0][1].time if self._heap else None

    def run_until(self, t_end: float) -> None:
        """Process every queued event with time <= t_end, then set now = t_end."""
        if t_end < self.now:
            raise SchedulingError(f"run_until({t_end}) is before clock {self.now}")
        while self._heap and self._heap[0][1].time <= t_end:
            ev = heapq.heappop(self._heap)[1]
            self.now = ev.time
            handler = self.handlers.get(ev.kind)
            if handler is not None:
                handler(ev)
            self.processed_count += 1
        self.now = t_end

    def step(self) -> Optional[SimEvent]:
        """Process exactly one event; returns it, or None when queue is empty."""
        if not self._heap:
            return None
        ev = heapq.heappop(self._heap)[1]
        self.now = ev.time
        handler = self.handlers.get(ev.kind)
        if handler is not None:
            handler(ev)
        self.processed_count += 1
        return ev


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))
