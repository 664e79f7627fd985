"""Event-triggered module agents (channel access, rate control) and the device
agent that turns their asynchronous uploads into training experiences."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .dcf import SUCCESS
from .kernel import RngStream
from .qmix import (CA_OBS_DIM, N_CA_ACTIONS, N_RC_ACTIONS, RC_OBS_DIM, STACK,
                   agent_params, qnet_forward)
from .qos import (N_ACTIVE_NORM, ChannelMonitor, QosTracker, RewardConfig,
                  ca_local_reward, rc_local_reward, state_reward, total_reward)

TRANSMIT, WAIT = 0, 1
CA, RC = "ca", "rc"
SNR_PRIOR_DB = 10.0
SNR_EWMA = 0.25


def _log_ms(ms: float, cap: float = 100.0) -> float:
    return min(math.log1p(max(ms, 0.0)) / math.log1p(cap), 1.0)


@dataclass
class CaObservation:
    busy: int
    n_observed: int
    delay_self: int  # us
    delay_intf: int  # us
    waited_slots: int
    qos_snapshot: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    time_frac: float = 0.0

    def vector(self) -> List[float]:
        d, j, l = self.qos_snapshot
        return [float(self.busy), min(self.n_observed / N_ACTIVE_NORM, 1.0),
                _log_ms(self.delay_self / 1000), _log_ms(self.delay_intf / 1000),
                min(self.waited_slots / 128.0, 1.0), _log_ms(d), _log_ms(j), l,
                self.time_frac]


@dataclass
class RcObservation:
    recent_snr: float = SNR_PRIOR_DB
    succ_ratio: float = 1.0
    queue_age: int = 0  # us

    def vector(self) -> List[float]:
        return [max(-1.0, min(self.recent_snr / 50.0, 1.0)), self.succ_ratio,
                _log_ms(self.queue_age / 1000)]


class ObsStack:
    """The latest observation stacked with the previous ones (oldest first)."""

    def __init__(self, dim: int, depth: int = STACK):
        self.dim = dim
        self.frames: deque = deque(maxlen=depth)
        self.depth = depth

    def push(self, vec) -> np.ndarray:
        if len(vec) != self.dim:
            raise ValueError(f"observation has dim {len(vec)}, expected {self.dim}")
        if not self.frames:
            self.frames.extend([list(vec)] * (self.depth - 1))
        self.frames.append(list(vec))
        return self.current()

    def current(self) -> np.ndarray:
        if not self.frames:
            return np.zeros(self.dim * self.depth)
        return np.concatenate([np.asarray(f, dtype=float) for f in self.frames])


def ca_trigger(now: int, busy: bool, monitor: ChannelMonitor, qos: QosTracker,
               last_success: int, waited_slots: int, duration: int,
               self_id: Optional[int] = None, window: int = 50_000) -> CaObservation:
    """Channel-access observation at an accessible idle slot edge."""
    lo = now - window
    heard = {f[2] for f in monitor.decoded if f[1] > lo and f[2] != self_id}
    return CaObservation(
        busy=int(busy), n_observed=len(heard),
        delay_self=max(0, now - last_success),
        delay_intf=max(0, now - monitor.last_intf_success),
        waited_slots=waited_slots, qos_snapshot=qos.snapshot(now),
        time_frac=min(now / duration, 1.0) if duration > 0 else 0.0)


def ca_act(obs, qparams, epsilon: float, stream: RngStream) -> int:
    """Epsilon-greedy over (Transmit, Wait); ties go to Wait."""
    if epsilon > 0 and stream.next_uniform() < epsilon:
        return stream.randint(0, N_CA_ACTIONS - 1)
    q = qnet_forward(qparams, obs)
    return TRANSMIT if q[TRANSMIT] > q[WAIT] else WAIT


def rc_act(obs, qparams, epsilon: float, stream: RngStream) -> int:
    """Epsilon-greedy MCS index."""
    if epsilon > 0 and stream.next_uniform() < epsilon:
        return stream.randint(0, N_RC_ACTIONS - 1)
    return int(np.argmax(qnet_forward(qparams, obs)))


rc_trigger_and_act = rc_act


@dataclass
class Upload:
    agent_id: str
    t_i: int
    observation: np.ndarray
    action: int
    r_local: float


@dataclass
class Experience:
    t: int
    global_state: np.ndarray
    obs_ca: np.ndarray
    obs_rc: np.ndarray
    act_ca: int
    act_rc: int
    r_tot: float
    next_global_state: np.ndarray
    next_obs_ca: np.ndarray
    next_obs_rc: np.ndarray
    done: bool = False
    # ingredients of r_tot, kept so it can be recomputed independently
    r_state: float = 0.0
    t_ca: int = 0
    r_ca: float = 0.0
    t_rc: int = 0
    r_rc: float = 0.0
    gamma: float = 0.9

    def to_record(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


class ExperienceLog:
    """One JSON record per line."""

    def __init__(self, fh):
        self.fh = fh

    def write(self, exp: Experience):
        self.fh.write(json.dumps(exp.to_record()) + "\n")

    @staticmethod
    def read(fh):
        for line in fh:
            if line.strip():
                yield json.loads(line)


@dataclass
class _Snapshot:
    t: int
    state: np.ndarray
    obs_ca: np.ndarray
    act_ca: int


class DeviceAgent:
    """Keeps the latest upload per module agent and assembles one experience
    per channel-access upload.

    ``state_fn(t)`` returns the global-state vector and the state reward at t.
    """

    def __init__(self, state_fn: Callable[[int], Tuple[np.ndarray, float]], gamma: float = 0.9):
        self.state_fn = state_fn
        self.gamma = gamma
        self.latest = {CA: None, RC: None}
        self.pending: Optional[_Snapshot] = None
        self.warmup = 0
        self.emitted = 0

    def ingest(self, up: Upload) -> Optional[Experience]:
        if up.agent_id not in self.latest:
            raise ValueError(f"unknown agent {up.agent_id!r}")
        prev = self.latest[up.agent_id]
        if prev is not None and up.t_i < prev.t_i:
            raise ValueError("uploads must arrive in time order")
        self.latest[up.agent_id] = up
        if up.agent_id == RC:
            return None
        state, r_state = self.state_fn(up.t_i)
        rc = self.latest[RC]
        exp = None
        if rc is None or self.pending is None:
            self.warmup += 1
        else:
            r_tot = total_reward(r_state, {CA: (up.t_i, up.r_local), RC: (rc.t_i, rc.r_local)},
                                 up.t_i, self.gamma)
            ps = self.pending
            exp = Experience(
                t=up.t_i, global_state=ps.state, obs_ca=ps.obs_ca, obs_rc=rc.observation,
                act_ca=ps.act_ca, act_rc=rc.action, r_tot=r_tot,
                next_global_state=state, next_obs_ca=up.observation, next_obs_rc=rc.observation,
                r_state=r_state, t_ca=up.t_i, r_ca=up.r_local, t_rc=rc.t_i, r_rc=rc.r_local,
                gamma=self.gamma)
            self.emitted += 1
        self.pending = _Snapshot(up.t_i, state, up.observation, up.action)
        return exp


class AimacController:
    """Runs both module agents for the device-under-test inside an episode.

    Only the agents' own observations and parameters feed action selection;
    the global state is computed for the device agent alone.
    """

    def __init__(self, params, epsilon_fn: Callable[[int], float], streams, monitor: ChannelMonitor,
                 qos: QosTracker, duration: int, reward_cfg: Optional[RewardConfig] = None,
                 collect: bool = False, step_offset: int = 0, self_id: int = 1,
                 experience_sink: Optional[Callable[[Experience], None]] = None):
        self.ca_q = agent_params(params, CA)
        self.rc_q = agent_params(params, RC)
        self.epsilon_fn = epsilon_fn
        self.ca_stream = streams("agent/ca")
        self.rc_stream = streams("agent/rc")
        self.monitor = monitor
        self.qos = qos
        self.duration = duration
        self.cfg = reward_cfg or RewardConfig()
        self.collect = collect
        self.step_offset = step_offset
        self.self_id = self_id
        self.sink = experience_sink
        self.device_agent = DeviceAgent(self.global_state, self.cfg.gamma)
        self.ca_stack = ObsStack(CA_OBS_DIM)
        self.rc_stack = ObsStack(RC_OBS_DIM)
        self.waited = 0
        self.last_ca: Optional[int] = None
        self.last_rc: Optional[int] = None
        self.last_outcome: Optional[str] = None
        self.last_success = 0
        self.recent_snr = SNR_PRIOR_DB
        self.succ_ratio = 1.0
        self.steps = 0
        self.experiences: List[Experience] = []
        self.ca_log: List[Tuple[int, int, int]] = []

    # hooks called by the MAC

    def slot_edge(self, now: int, busy: bool) -> bool:
        obs = ca_trigger(now, busy, self.monitor, self.qos, self.last_success,
                         self.waited, self.duration, self.self_id)
        r_ca = self._ca_reward(now)
        vec = self.ca_stack.push(obs.vector())
        eps = self.epsilon_fn(self.step_offset + self.steps)
        a = ca_act(vec, self.ca_q, eps, self.ca_stream)
        self.ca_log.append((now, obs.waited_slots, a))
        exp = self.device_agent.ingest(Upload(CA, now, vec, a, r_ca))
        if exp is not None:
            if self.collect:
                self.experiences.append(exp)
            if self.sink is not None:
                self.sink(exp)
        self.steps += 1
        self.waited = 0 if a == TRANSMIT else self.waited + 1
        self.last_ca = a
        self.last_outcome = None
        return a == TRANSMIT

    def choose_mcs(self, now: int, queue_age: int) -> int:
        obs = RcObservation(self.recent_snr, self.succ_ratio, queue_age)
        vec = self.rc_stack.push(obs.vector())
        a = rc_act(vec, self.rc_q, self.epsilon_fn(self.step_offset + self.steps), self.rc_stream)
        self.device_agent.ingest(Upload(RC, now, vec, a, rc_local_reward(self.succ_ratio)))
        self.last_rc = a
        return a

    def tx_outcome(self, now: int, kind: str):
        self.last_outcome = kind
        if kind == SUCCESS:
            self.last_success = now

    def packet_complete(self, attempted: int, acked: int):
        self.succ_ratio = acked / attempted if attempted else 1.0

    def measured_snr(self, snr_db: float):
        self.recent_snr += SNR_EWMA * (snr_db - self.recent_snr)

    # reward and state

    def _ca_reward(self, now: int) -> float:
        shares = self.monitor.airtime_shares(now)
        if self.last_ca == TRANSMIT and self.last_outcome is not None:
            return ca_local_reward(self.last_outcome, self.waited, shares, self.cfg)
        return ca_local_reward(None, self.waited if self.last_ca == WAIT else 0, shares, self.cfg)

    def global_state(self, now: int):
        sf = self.qos.features(now)
        cf = self.monitor.features(now)
        r_state = state_reward(sf, cf, self.cfg)
        lat = self.device_agent.latest
        g = self.cfg.gamma

        def stale(up):
            return 1.0 if up is None else 1.0 - g ** ((now - up.t_i) / 1000.0)

        vec = np.array([
            sf.v_delay, sf.v_jitter, sf.v_loss,
            cf.utilization, cf.mgmt_fraction, min(cf.n_active / N_ACTIVE_NORM, 1.0),
            1.0 if self.last_ca == TRANSMIT else 0.0,
            1.0 if self.last_ca == WAIT else 0.0,
            (self.last_rc or 0) / (N_RC_ACTIONS - 1),
            stale(lat[CA]), stale(lat[RC]),
            min(now / self.duration, 1.0) if self.duration > 0 else 0.0,
        ])
        return vec, r_state
