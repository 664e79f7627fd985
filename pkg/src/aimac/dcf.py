"""CSMA/CA (DCF) state, backoff, retransmission and a success/failure driven
rate-adaptation baseline."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Iterable, List, Optional

SLOT_US = 9
SIFS_US = 16
DIFS_US = 34
ACK_TIMEOUT_SLACK_US = 9
CW_MIN = 15
CW_MAX = 1023
RETRY_LIMIT = 7
QUEUE_CAP = 256
# longest aggregated PPDU a burst may grow to (single frames are never split)
MAX_PPDU_US = 5484
RATE_UP_AFTER = 10
RATE_DOWN_AFTER = 2
RATE_START_MCS = 3
MAX_MCS = 11

SUCCESS = "success"
ACK_TIMEOUT = "ack_timeout"
DROP = "drop_after_retry"

DECREMENT, FREEZE, TRANSMIT = "decrement", "freeze", "transmit"


@dataclass
class Packet:
    id: int
    bytes: int
    created_at: int
    flow: str = "uplink"
    src: int = -1
    dst: int = -1
    kind: str = "data"
    dut: bool = False
    delivered_at: Optional[int] = None
    dropped: bool = False

    def __post_init__(self):
        if self.bytes <= 0:
            raise ValueError("packet size must be positive")

    def mark_delivered(self, t: int) -> bool:
        """Record first delivery; later duplicates are ignored."""
        if self.delivered_at is not None:
            return False
        if t < self.created_at:
            raise ValueError("delivery before creation")
        self.delivered_at = t
        return True


@dataclass
class TxOutcome:
    kind: str
    frames_attempted: int = 1
    frames_acked: int = 0

    def __post_init__(self):
        if self.frames_acked > self.frames_attempted:
            raise ValueError("more frames acked than attempted")


@dataclass
class DcfState:
    cw: int = CW_MIN
    backoff: int = 0
    retries: int = 0
    tx_queue: Deque[Packet] = field(default_factory=deque)
    pending_frame: Optional[object] = None
    cw_min: int = CW_MIN
    cw_max: int = CW_MAX
    retry_limit: int = RETRY_LIMIT
    queue_cap: int = QUEUE_CAP
    # attempts made for the packet(s) at the head of the queue
    attempts: int = 0

    def enqueue(self, pkt: Packet) -> bool:
        """Append to the FIFO; False means overflow (packet is lost)."""
        if len(self.tx_queue) >= self.queue_cap:
            return False
        self.tx_queue.append(pkt)
        return True


def backoff_draw(cw: int, stream) -> int:
    """Uniform slot count in [0, cw]."""
    if cw < 1:
        raise ValueError("contention window must be >= 1")
    return stream.randint(0, cw)


def dcf_on_slot_edge(state: DcfState, busy: bool) -> str:
    """One slot boundary of the classical countdown."""
    if busy:
        return FREEZE
    if state.backoff > 0:
        state.backoff -= 1
        return DECREMENT
    return TRANSMIT


def slots_elapsed(countdown_start: int, t: int, slot: int = SLOT_US) -> int:
    """Slot boundaries passed (inclusive of t) since the countdown started."""
    if t < countdown_start:
        return 0
    return (t - countdown_start) // slot


def next_grid_edge(idle_since: int, now: int, difs: int = DIFS_US, slot: int = SLOT_US) -> int:
    """First slot edge at or after ``now`` on the grid anchored at idle_since + DIFS."""
    g0 = idle_since + difs
    if now <= g0:
        return g0
    k = -(-(now - g0) // slot)
    return g0 + k * slot


def on_tx_complete(state: DcfState, outcome: TxOutcome, stream=None) -> List[Packet]:
    """Apply a transmission outcome. Returns the packets that left the queue
    (delivered or dropped)."""
    if state.pending_frame is None:
        raise RuntimeError("transmission outcome without a pending frame")
    frame = state.pending_frame
    state.pending_frame = None
    n = len(getattr(frame, "packets", ())) or 1
    if outcome.kind == SUCCESS:
        state.cw = state.cw_min
        state.retries = 0
        state.attempts = 0
        done = [state.tx_queue.popleft() for _ in range(min(n, len(state.tx_queue)))]
        if stream is not None:
            state.backoff = backoff_draw(state.cw, stream)
        return done
    state.retries += 1
    if state.retries > state.retry_limit:
        done = [state.tx_queue.popleft() for _ in range(min(n, len(state.tx_queue)))]
        for p in done:
            p.dropped = True
        state.cw = state.cw_min
        state.retries = 0
        state.attempts = 0
        outcome.kind = DROP
    else:
        state.cw = min(2 * state.cw + 1, state.cw_max)
        done = []
    if stream is not None:
        state.backoff = backoff_draw(state.cw, stream)
    return done


def cw_after_failures(k: int, cw_min: int = CW_MIN, cw_max: int = CW_MAX) -> int:
    return min((cw_min + 1) * 2 ** k - 1, cw_max)


class RateAdapter:
    """Step MCS up after a run of successes and down after a run of failures."""

    def __init__(self, start: int = RATE_START_MCS, up_after: int = RATE_UP_AFTER,
                 down_after: int = RATE_DOWN_AFTER, max_mcs: int = MAX_MCS):
        self.mcs = start
        self.up_after = up_after
        self.down_after = down_after
        self.max_mcs = max_mcs
        self.successes = 0
        self.failures = 0

    def update(self, success: bool) -> int:
        if success:
            self.successes += 1
            self.failures = 0
            if self.successes >= self.up_after:
                self.mcs = min(self.mcs + 1, self.max_mcs)
                self.successes = 0
        else:
            self.failures += 1
            self.successes = 0
            if self.failures >= self.down_after:
                self.mcs = max(self.mcs - 1, 0)
                self.failures = 0
        return self.mcs


def baseline_rate_adapt(history: Iterable[bool], start: int = RATE_START_MCS) -> int:
    """MCS chosen after replaying a success/failure history from scratch."""
    ra = RateAdapter(start)
    for h in history:
        ra.update(h.kind == SUCCESS if isinstance(h, TxOutcome) else bool(h))
    return ra.mcs
