"""Service features, channel sensing features and the reward terms.

Times handed to these functions are microseconds; decay constants are per
second and the asynchronous discount exponent is in milliseconds.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .dcf import ACK_TIMEOUT, DROP, SUCCESS

SENSING_WINDOW_US = 50_000
QOS_WINDOW_US = 1_000_000
FAIRNESS_WINDOW_US = 1_000_000
N_ACTIVE_NORM = 32.0


@dataclass
class QosRequirement:
    delay_bound: float = 30.0  # ms
    jitter_bound: float = 10.0  # ms
    loss_bound: float = 0.01
    decay_rates: Tuple[float, float, float] = (1.0, 1.0, 1.0)  # 1/s for delay, jitter, loss

    def __post_init__(self):
        if min(self.delay_bound, self.jitter_bound, self.loss_bound) <= 0:
            raise ValueError("QoS bounds must be positive")
        if min(self.decay_rates) <= 0:
            raise ValueError("decay rates must be positive")


@dataclass
class ServiceFeatures:
    v_delay: float = 0.0
    v_jitter: float = 0.0
    v_loss: float = 0.0


@dataclass
class ChannelFeatures:
    utilization: float = 0.0
    mgmt_fraction: float = 0.0
    n_active: int = 0


@dataclass
class RewardConfig:
    success: float = 1.0
    collision: float = -1.0
    idle_penalty: float = 0.01
    idle_threshold: int = 64
    fairness_weight: float = 0.5
    feature_weights: Tuple[float, float, float] = (0.5, 0.25, 0.25)
    channel_weight: float = 0.0
    gamma: float = 0.9  # per millisecond of staleness


def _weighted_fraction(events: Iterable[Tuple[int, bool]], theta: float, now: int) -> float:
    num = den = 0.0
    for t, violated in events:
        w = math.exp(-theta * (now - t) / 1e6)
        den += w
        if violated:
            num += w
    return num / den if den > 0 else 0.0


def extract_service_features(delay_samples: Sequence[Tuple[int, float]],
                             loss_events: Sequence[int],
                             req: QosRequirement, now: int) -> ServiceFeatures:
    """Decay-weighted violation probabilities.

    ``delay_samples`` are (delivery time us, delay ms) pairs in time order;
    ``loss_events`` are drop times (us).
    """
    th_d, th_j, th_l = req.decay_rates
    v_delay = _weighted_fraction(((t, d > req.delay_bound) for t, d in delay_samples), th_d, now)
    jit = []
    total = 0.0
    for k, (t, d) in enumerate(delay_samples, 1):
        total += d
        jit.append((t, abs(d - total / k) > req.jitter_bound))
    v_jitter = _weighted_fraction(jit, th_j, now)
    loss = [(t, False) for t, _ in delay_samples] + [(t, True) for t in loss_events]
    v_loss = _weighted_fraction(loss, th_l, now)
    return ServiceFeatures(v_delay, v_jitter, v_loss)


def sense_channel(busy_intervals: Sequence[Tuple[int, int]],
                  decoded: Sequence[Tuple[int, int, int, str]],
                  window_start: int, window_end: int) -> ChannelFeatures:
    """Channel features over [window_start, window_end).

    ``busy_intervals`` are (start, end) carrier-sense busy spans; ``decoded``
    are (start, end, src, kind) frames decoded by the observer.
    """
    span = window_end - window_start
    if span <= 0:
        return ChannelFeatures()
    busy = 0
    for s, e in busy_intervals:
        s, e = max(s, window_start), min(e, window_end)
        if e > s:
            busy += e - s
    total = mgmt = 0
    sources = set()
    for s, e, src, kind in decoded:
        s, e = max(s, window_start), min(e, window_end)
        if e <= s:
            continue
        total += e - s
        if kind != "data":
            mgmt += e - s
        sources.add(src)
    return ChannelFeatures(min(busy / span, 1.0), mgmt / total if total else 0.0, len(sources))


def state_reward(sf: ServiceFeatures, cf: Optional[ChannelFeatures] = None,
                 cfg: Optional[RewardConfig] = None) -> float:
    cfg = cfg or RewardConfig()
    wd, wj, wl = cfg.feature_weights
    penalty = wd * sf.v_delay + wj * sf.v_jitter + wl * sf.v_loss
    if cf is not None and cfg.channel_weight:
        penalty += cfg.channel_weight * cf.utilization
    return min(1.0, max(-1.0, 1.0 - 2.0 * penalty))


def jain_index(shares: Sequence[float]) -> float:
    xs = [float(x) for x in shares]
    if not xs:
        return 1.0
    s2 = sum(x * x for x in xs)
    if s2 == 0:
        return 1.0
    return sum(xs) ** 2 / (len(xs) * s2)


def ca_local_reward(outcome: Optional[str], waited_slots: int, shares: Sequence[float],
                    cfg: Optional[RewardConfig] = None) -> float:
    """Transmission term plus weighted fairness term.

    ``outcome`` is a TxOutcome kind for a Transmit decision, or None for Wait.
    """
    cfg = cfg or RewardConfig()
    if outcome is None:
        r_tx = -cfg.idle_penalty * max(0, waited_slots - cfg.idle_threshold)
    elif outcome == SUCCESS:
        r_tx = cfg.success
    elif outcome in (ACK_TIMEOUT, DROP):
        r_tx = cfg.collision
    else:
        raise ValueError(f"unknown outcome {outcome!r}")
    r_fair = 2.0 * jain_index(shares) - 1.0
    return r_tx + cfg.fairness_weight * r_fair


def rc_local_reward(succ_ratio: float) -> float:
    if not 0.0 <= succ_ratio <= 1.0:
        raise ValueError("succ_ratio must lie in [0, 1]")
    return 2.0 * succ_ratio - 1.0


def total_reward(r_state: float, uploads: Dict[str, Optional[Tuple[int, float]]],
                 t: int, gamma: float = 0.9) -> float:
    """State reward plus each agent's latest local reward discounted by its
    staleness (ms). Agents with no upload yet contribute nothing."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    r = r_state
    for up in uploads.values():
        if up is None:
            continue
        t_i, r_i = up
        if t_i > t:
            raise ValueError("upload time after assembly time")
        r += gamma ** ((t - t_i) / 1000.0) * r_i
    return r


class ChannelMonitor:
    """Rolling record of what one device hears: busy spans and decoded frames."""

    def __init__(self, horizon_us: int = FAIRNESS_WINDOW_US):
        self.horizon = horizon_us
        self.busy: deque = deque()
        self.decoded: deque = deque()
        self._busy_since: Optional[int] = None
        self.last_intf_success: int = 0

    def set_busy(self, busy: bool, t: int):
        if busy and self._busy_since is None:
            self._busy_since = t
        elif not busy and self._busy_since is not None:
            if t > self._busy_since:
                self.busy.append((self._busy_since, t))
            self._busy_since = None

    def add_decoded(self, start: int, end: int, src: int, kind: str):
        self.decoded.append((start, end, src, kind))

    def trim(self, now: int):
        lim = now - self.horizon
        while self.busy and self.busy[0][1] < lim:
            self.busy.popleft()
        while self.decoded and self.decoded[0][1] < lim:
            self.decoded.popleft()

    def busy_spans(self, now: int) -> List[Tuple[int, int]]:
        spans = list(self.busy)
        if self._busy_since is not None:
            spans.append((self._busy_since, now))
        return spans

    def features(self, now: int, window: int = SENSING_WINDOW_US) -> ChannelFeatures:
        self.trim(now)
        lo = max(0, now - window)
        recent = [f for f in self.decoded if f[1] > lo]
        return sense_channel(self.busy_spans(now)[-64:], recent, lo, now)

    def airtime_shares(self, now: int, window: int = FAIRNESS_WINDOW_US) -> List[float]:
        lo = max(0, now - window)
        per_src: Dict[int, int] = {}
        for s, e, src, kind in self.decoded:
            if kind == "ack":
                continue
            s = max(s, lo)
            if e > s:
                per_src[src] = per_src.get(src, 0) + (e - s)
        return [per_src[k] for k in sorted(per_src)]


class QosTracker:
    """Delay samples and loss events of the monitored flows within a window."""

    def __init__(self, req: Optional[QosRequirement] = None, window_us: int = QOS_WINDOW_US):
        self.req = req or QosRequirement()
        self.window = window_us
        self.samples: deque = deque()
        self.losses: deque = deque()

    def add_delay(self, t: int, delay_ms: float):
        self.samples.append((t, delay_ms))

    def add_loss(self, t: int):
        self.losses.append(t)

    def trim(self, now: int):
        lim = now - self.window
        while self.samples and self.samples[0][0] < lim:
            self.samples.popleft()
        while self.losses and self.losses[0] < lim:
            self.losses.popleft()

    def features(self, now: int) -> ServiceFeatures:
        self.trim(now)
        return extract_service_features(self.samples, self.losses, self.req, now)

    def snapshot(self, now: int) -> Tuple[float, float, float]:
        """Recent mean delay (ms), delay std (ms) and loss fraction."""
        self.trim(now)
        n = len(self.samples)
        lost = len(self.losses)
        if n == 0:
            return 0.0, 0.0, (1.0 if lost else 0.0)
        ds = [d for _, d in self.samples]
        m = sum(ds) / n
        sd = math.sqrt(max(0.0, sum((d - m) ** 2 for d in ds) / n))
        return m, sd, lost / (n + lost)
