"""Event kernel and named random streams.

Time is kept in integer microseconds. Events at the same instant execute in
the order they were scheduled.
"""
from __future__ import annotations

import hashlib
import heapq
from typing import Callable, Optional, TextIO

import numpy as np

SECOND_US = 1_000_000

# event kinds
TX_START = "tx-start"
TX_END = "tx-end"
PACKET_ARRIVAL = "packet-arrival"
SLOT_EDGE = "slot-edge"
TIMER = "timer"
EVENT_KINDS = (TX_START, TX_END, PACKET_ARRIVAL, SLOT_EDGE, TIMER)


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


class SimEvent:
    __slots__ = ("fire_at", "seq", "kind", "device", "action", "cancelled")

    def __init__(self, fire_at: int, seq: int, kind: str, device: int,
                 action: Callable[[], Optional[str]]):
        self.fire_at = fire_at
        self.seq = seq
        self.kind = kind
        self.device = device
        self.action = action
        self.cancelled = False

    def __repr__(self):
        return f"SimEvent({self.fire_at}us #{self.seq} {self.kind} dev={self.device})"


class Simulator:
    """Heap-ordered event loop.

    Handlers return an optional detail string that is written to the trace
    sink (``time_us,seq,kind,device_id,detail``) when one is attached.
    """

    def __init__(self, trace: Optional[TextIO] = None):
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.trace = trace
        self.executed = 0

    def schedule(self, fire_at: int, kind: str, action, device: int = -1) -> SimEvent:
        if fire_at < self.now:
            raise SchedulingError(
                f"event {kind} for device {device} at {fire_at}us is before now={self.now}us")
        ev = SimEvent(int(fire_at), self._seq, kind, device, action)
        self._seq += 1
        heapq.heappush(self._heap, (ev.fire_at, ev.seq, ev))
        return ev

    def schedule_in(self, delay: int, kind: str, action, device: int = -1) -> SimEvent:
        return self.schedule(self.now + delay, kind, action, device)

    @staticmethod
    def cancel(ev: Optional[SimEvent]) -> bool:
        """Cancel a pending event. Returns False if it was already cancelled."""
        if ev is None or ev.cancelled:
            return False
        ev.cancelled = True
        return True

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)

    def run_until(self, t_end: int) -> int:
        if t_end < self.now:
            raise SchedulingError(f"run_until({t_end}) is before now={self.now}")
        heap = self._heap
        pop = heapq.heappop
        trace = self.trace
        count = 0
        while heap and heap[0][0] <= t_end:
            _, _, ev = pop(heap)
            if ev.cancelled:
                continue
            # mark fired so a late cancel() reports False
            ev.cancelled = True
            self.now = ev.fire_at
            detail = ev.action()
            count += 1
            if trace is not None:
                trace.write(f"{ev.fire_at},{ev.seq},{ev.kind},{ev.device},{detail or ''}\n")
        self.now = t_end
        self.executed += count
        return count


def _stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """Counter-based (Philox) random stream keyed by ``(seed, name)``.

    Draws are served from a block buffer so per-draw cost stays low inside
    event handlers.
    """

    BLOCK = 2048

    def __init__(self, seed: int, name: str):
        self.seed = int(seed)
        self.name = name
        self._gen = np.random.Generator(np.random.Philox(key=_stream_key(seed, name)))
        self._buf: list = []
        self._pos = 0

    def next_uniform(self) -> float:
        """Next draw in [0, 1)."""
        if self._pos >= len(self._buf):
            self._buf = self._gen.random(self.BLOCK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in the closed range [low, high]."""
        return low + int(self.next_uniform() * (high - low + 1))

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.next_uniform()

    def bernoulli(self, p: float) -> bool:
        return self.next_uniform() < p


class StreamFactory:
    """Hands out one RngStream per name for an episode seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict = {}

    def __call__(self, name: str) -> RngStream:
        s = self._streams.get(name)
        if s is None:
            s = self._streams[name] = RngStream(self.seed, name)
        return s
