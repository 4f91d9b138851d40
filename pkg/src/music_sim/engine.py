"""Deterministic discrete-event core: clock, event heap, ledgers, rng streams.

Events fire in (timestamp, kind priority, insertion order) order, so equal
timestamps resolve the same way on every run: dropouts first, then finished
transmissions, then finished computations, then round boundaries. All time is
virtual; nothing here reads the wall clock.

Money trails are kept twice on purpose: an energy ledger mutated as events
dispatch, and per-event charge lists in the event log. Summing the log must
reproduce the ledger exactly, which makes silent double-charging detectable.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

import numpy as np

from .errors import TimestampInPast


class EventKind(IntEnum):
    """Tie-break priority at equal timestamps; lower fires first."""

    DROPOUT = 0
    TX_DONE = 1
    COMPUTE_DONE = 2
    ROUND_BOUNDARY = 3


@dataclass
class Event:
    time: float
    kind: EventKind
    seq: int
    node: str | None
    detail: str
    callback: Callable[[], None] = field(repr=False)
    cancelled: bool = False

    def cancel(self):
        self.cancelled = True


class RngStreams:
    """Named, order-independent random streams off one root seed.

    Each name maps to its own generator seeded from (root, sha256(name)), so
    drawing from one stream never perturbs another and adding a consumer
    leaves existing streams untouched.
    """

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            digest = hashlib.sha256(name.encode()).digest()
            tag = int.from_bytes(digest[:8], "big")
            gen = np.random.default_rng(np.random.SeedSequence([self.root_seed, tag]))
            self._streams[name] = gen
        return gen


@dataclass
class _Reservation:
    start: float
    end: float
    owner: str
    shared_tag: str | None


class BlockLedger:
    """Time reservations on uplink resource blocks.

    A block serves one owner at a time, except reservations carrying the same
    shared tag (a power-multiplexed cluster), which may overlap each other.
    """

    def __init__(self):
        self._held: dict[tuple[str, int], list[_Reservation]] = {}

    def reserve(self, ap_id: str, block_index: int, earliest: float, duration: float,
                owner: str, shared_tag: str | None = None) -> float:
        """Book the block for `duration` at the first free instant >= earliest;
        returns the granted start time."""
        slots = self._held.setdefault((ap_id, block_index), [])
        start = earliest
        moved = True
        while moved:
            moved = False
            for r in slots:
                if shared_tag is not None and r.shared_tag == shared_tag:
                    continue
                if r.start < start + duration and start < r.end:
                    start = r.end
                    moved = True
        slots.append(_Reservation(start, start + duration, owner, shared_tag))
        slots.sort(key=lambda r: (r.start, r.end, r.owner))
        return start

    def busy_until(self, ap_id: str, block_index: int) -> float:
        slots = self._held.get((ap_id, block_index), [])
        return max((r.end for r in slots), default=0.0)


class Engine:
    """Event loop plus batteries, energy ledger, block ledger and event log."""

    def __init__(self, seed: int):
        self.clock = 0.0
        self.rng = RngStreams(seed)
        self.blocks = BlockLedger()
        self.batteries: dict[str, float] = {}
        self.dropped: set[str] = set()
        self.energy_ledger: dict[str, dict[str, float]] = {}
        self.event_log: list[dict] = []
        self._heap: list[tuple[float, int, int, Event]] = []
        self._seq = itertools.count()
        self._active_record: dict | None = None

    # ---- scheduling ----

    def schedule(self, at: float, kind: EventKind, callback: Callable[[], None],
                 node: str | None = None, detail: str = "") -> Event:
        if at < self.clock:
            raise TimestampInPast(f"cannot schedule {detail!r} at {at} (clock is {self.clock})")
        event = Event(time=at, kind=kind, seq=next(self._seq), node=node,
                      detail=detail, callback=callback)
        heapq.heappush(self._heap, (at, int(kind), event.seq, event))
        return event

    def schedule_after(self, delay: float, kind: EventKind, callback: Callable[[], None],
                       node: str | None = None, detail: str = "") -> Event:
        return self.schedule(self.clock + delay, kind, callback, node=node, detail=detail)

    def run(self) -> None:
        """Dispatch events until the heap is empty."""
        while self._heap:
            _, _, _, event = heapq.heappop(self._heap)
            if event.cancelled:
                continue
            self.clock = event.time
            record = {"time": event.time, "kind": event.kind.name, "node": event.node,
                      "detail": event.detail, "charges": []}
            self.event_log.append(record)
            self._active_record = record
            try:
                event.callback()
            finally:
                self._active_record = None

    # ---- energy accounting ----

    def charge(self, node: str, category: str, joules: float) -> None:
        """Record energy spent by a node under a category (compute, uplink, ...).

        The charge lands both in the running ledger and in the event record
        being dispatched, so the log stays a complete replayable trail.
        """
        if joules < 0:
            raise ValueError(f"negative charge {joules} for {node}/{category}")
        bucket = self.energy_ledger.setdefault(node, {})
        bucket[category] = bucket.get(category, 0.0) + joules
        if self._active_record is None:
            record = {"time": self.clock, "kind": "CHARGE", "node": node,
                      "detail": f"out-of-band {category}", "charges": []}
            self.event_log.append(record)
            record["charges"].append([node, category, joules])
        else:
            self._active_record["charges"].append([node, category, joules])

    def ledger_total(self, node: str | None = None) -> float:
        if node is not None:
            return sum(self.energy_ledger.get(node, {}).values())
        return sum(sum(b.values()) for b in self.energy_ledger.values())

    def recount_from_log(self) -> dict[str, dict[str, float]]:
        """Rebuild the energy ledger purely from the event log."""
        rebuilt: dict[str, dict[str, float]] = {}
        for record in self.event_log:
            for node, category, joules in record["charges"]:
                bucket = rebuilt.setdefault(node, {})
                bucket[category] = bucket.get(category, 0.0) + joules
        return rebuilt

    # ---- batteries ----

    def battery_of(self, node: str) -> float:
        return self.batteries.get(node, float("inf"))

    def can_afford(self, node: str, joules: float) -> bool:
        return node not in self.dropped and self.battery_of(node) >= joules

    def debit_battery(self, node: str, joules: float,
                      on_dropout: Callable[[], None] | None = None) -> float:
        """Take energy out of a device battery, flooring at zero; returns the
        remaining charge.

        Crossing zero marks the node dropped and fires a dropout event at the
        current clock (before any later-kind event at the same instant). A
        zero debit never triggers anything.
        """
        if joules < 0:
            raise ValueError(f"debit must be >= 0, got {joules!r}")
        if node not in self.batteries:
            return float("inf")  # mains-powered
        if joules == 0.0:
            return self.batteries[node]
        remaining = self.batteries[node] - joules
        self.batteries[node] = max(0.0, remaining)
        if remaining <= 0.0 and node not in self.dropped:
            self.dropped.add(node)
            self.schedule(self.clock, EventKind.DROPOUT,
                          on_dropout if on_dropout is not None else (lambda: None),
                          node=node, detail="battery exhausted")
        return self.batteries[node]

    def mark_dropped(self, node: str, reason: str,
                     callback: Callable[[], None] | None = None) -> None:
        if node in self.dropped:
            return
        self.dropped.add(node)
        self.schedule(self.clock, EventKind.DROPOUT,
                      callback if callback is not None else (lambda: None),
                      node=node, detail=reason)

    # ---- log output ----

    def write_event_log(self, path, meta: dict | None = None) -> None:
        with open(path, "w") as fh:
            if meta is not None:
                fh.write(json.dumps({"kind": "META", "charges": [], **meta},
                                    sort_keys=True) + "\n")
            for record in self.event_log:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
