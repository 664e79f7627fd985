"""One simulated episode: devices contending on the shared medium.

Every device runs DCF except a device-under-test configured for the learned
policy, whose channel-access and rate decisions come from an
:class:`~aimac.agents.AimacController`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, TextIO

from . import dcf as mac
from .agents import AimacController
from .dcf import (ACK_TIMEOUT, DROP, SUCCESS, DcfState, Packet, RateAdapter, TxOutcome,
                  backoff_draw, next_grid_edge, on_tx_complete, slots_elapsed)
from .env import (AIMAC, AP, BOTH, DOWNLINK, PROBE, UPLINK, ScenarioConfig, next_packet,
                  place_devices, tx_power_of)
from .kernel import (PACKET_ARRIVAL, SLOT_EDGE, TIMER, TX_END, TX_START, Simulator,
                     StreamFactory)
from .phy import ACK, ACK_AIRTIME_US, ACK_BYTES, DATA, MGMT, Frame, Medium, medium_deliver
from .qos import ChannelMonitor, QosTracker, RewardConfig

IDLE, CONTEND, TX, WAIT_ACK = "idle", "contend", "tx", "wait_ack"


@dataclass
class MacCounters:
    tx_attempts: int = 0
    successes: int = 0
    ack_timeouts: int = 0
    drops: int = 0
    airtime_us: int = 0
    delivered_airtime_us: int = 0


class Node:
    def __init__(self, spec, streams: StreamFactory):
        self.id = spec.id
        self.spec = spec
        self.dcf = DcfState()
        self.rates: Dict[int, RateAdapter] = {}
        self.backoff_stream = streams(f"backoff/{spec.id}")
        self.rx_stream = streams(f"rx/{spec.id}")
        self.dcf.backoff = backoff_draw(self.dcf.cw, self.backoff_stream)
        self.state = IDLE
        self.ev_access = None
        self.ev_timeout = None
        self.txing = False
        self.sensed_busy = False
        self.idle_since = 0
        self.countdown_start = 0
        self.counters = MacCounters()
        self.controller: Optional[AimacController] = None

    def rate(self, dst: int) -> RateAdapter:
        ra = self.rates.get(dst)
        if ra is None:
            ra = self.rates[dst] = RateAdapter()
        return ra


@dataclass
class EpisodeResult:
    duration: int
    dut_packets: List[Packet]
    generated: int
    delivered: int
    dropped: int
    residual_queued: int
    counters: Dict[int, MacCounters]
    controller: Optional[AimacController]
    events: int
    history: Optional[dict] = None


class Episode:
    """Builds the devices for a scenario and runs them to ``duration``."""

    def __init__(self, config: ScenarioConfig, seed: int, duration: Optional[int] = None,
                 policy: Optional[str] = None, params=None,
                 epsilon_fn: Optional[Callable[[int], float]] = None,
                 collect: bool = False, step_offset: int = 0,
                 trace: Optional[TextIO] = None, keep_history: bool = False,
                 reward_cfg: Optional[RewardConfig] = None, experience_sink=None):
        config.validate()
        self.cfg = config
        self.duration = config.duration if duration is None else int(duration)
        self.streams = StreamFactory(seed)
        self.sim = Simulator(trace)
        specs = config.devices
        positions = place_devices(specs, self.streams("placement"), config.phy)
        self.medium = Medium(positions, [tx_power_of(d, config.phy) for d in specs], config.phy)
        self.nodes = [Node(d, self.streams) for d in specs]
        dut_spec = config.dut()
        self.dut = self.nodes[dut_spec.id]
        self.dut_ap = dut_spec.associated_with
        pol = policy or dut_spec.policy
        self.monitor = ChannelMonitor()
        self.qos = QosTracker()
        self.keep_history = keep_history
        self.history = {"decoded": [], "busy": []} if keep_history else None
        if pol == AIMAC:
            if params is None:
                raise ValueError("the aimac policy needs network parameters")
            self.dut.controller = AimacController(
                params, epsilon_fn or (lambda step: 0.0), self.streams, self.monitor, self.qos,
                self.duration, reward_cfg, collect=collect, step_offset=step_offset,
                self_id=self.dut.id, experience_sink=experience_sink)
        self._pkt_id = 0
        self.dut_packets: List[Packet] = []
        self.generated = 0
        self.delivered = 0
        self.dropped = 0
        self._install_traffic()
        # end marker so a trace alone tells how long the episode ran
        self.sim.schedule(self.duration, TIMER, lambda: f"end duration={self.duration}")

    # traffic

    def _install_traffic(self):
        for d in self.cfg.devices:
            for k, prof in enumerate(d.profiles):
                dirs = []
                if prof.kind == PROBE or d.associated_with is None:
                    dirs.append((d.id, -1, UPLINK))
                else:
                    if prof.direction in (UPLINK, BOTH):
                        dirs.append((d.id, d.associated_with, UPLINK))
                    if prof.direction in (DOWNLINK, BOTH):
                        dirs.append((d.associated_with, d.id, DOWNLINK))
                for src, dst, flow in dirs:
                    stream = self.streams(f"traffic/{d.id}/{k}/{flow}")
                    gen = (src, dst, prof, stream, flow, d.dut)
                    t, size = next_packet(prof, 0, stream)
                    self._schedule_arrival(gen, t, size)

    def _schedule_arrival(self, gen, t, size):
        self.sim.schedule(t, PACKET_ARRIVAL, lambda: self._arrival(gen, size), gen[0])

    def _arrival(self, gen, size) -> str:
        src, dst, prof, stream, flow, dut = gen
        now = self.sim.now
        node = self.nodes[src]
        kind = MGMT if prof.kind == PROBE else DATA
        parts = []
        for _ in range(prof.frames_per_arrival):
            pkt = Packet(self._pkt_id, size, now, flow, src, dst, kind, dut)
            self._pkt_id += 1
            self.generated += 1
            if dut:
                self.dut_packets.append(pkt)
            ok = node.dcf.enqueue(pkt)
            if not ok:
                pkt.dropped = True
                self.dropped += 1
                if dut:
                    self.qos.add_loss(now)
            parts.append(f"pkt={pkt.id} flow={flow} dut={int(dut)} bytes={size} q={'ok' if ok else 'overflow'}")
        t, nsize = next_packet(prof, now, stream)
        self._schedule_arrival(gen, t, nsize)
        if node.state == IDLE and node.dcf.tx_queue:
            self._start_contention(node)
        return " ".join(parts)

    # contention

    def _start_contention(self, n: Node):
        n.state = CONTEND
        if not n.sensed_busy:
            self._resume(n)

    def _resume(self, n: Node):
        if n.ev_access is not None and not n.ev_access.cancelled:
            return
        now = self.sim.now
        edge = next_grid_edge(n.idle_since, now)
        if n.controller is not None:
            n.ev_access = self.sim.schedule(edge, SLOT_EDGE, lambda: self._ai_slot(n), n.id)
        else:
            n.countdown_start = edge
            fire = edge + n.dcf.backoff * mac.SLOT_US
            n.ev_access = self.sim.schedule(fire, SLOT_EDGE, lambda: self._access(n), n.id)

    def _freeze(self, n: Node):
        ev = n.ev_access
        if ev is None or ev.cancelled:
            return
        now = self.sim.now
        if ev.fire_at <= now:
            # same-instant edge: the device cannot have sensed the new frame yet
            return
        Simulator.cancel(ev)
        n.ev_access = None
        if n.controller is None:
            n.dcf.backoff -= min(slots_elapsed(n.countdown_start, now), n.dcf.backoff)

    def _sense_changed(self, n: Node):
        busy = self.medium.busy[n.id] or n.txing
        if busy == n.sensed_busy:
            return
        n.sensed_busy = busy
        if busy:
            if n.state == CONTEND:
                self._freeze(n)
        else:
            n.idle_since = self.sim.now
            if n.state == CONTEND:
                self._resume(n)

    def _refresh_cca(self, *extra: Node):
        flipped = self.medium.update_cca()
        dut = self.dut.id
        if dut in flipped:
            self.monitor.set_busy(self.medium.busy[dut], self.sim.now)
            if self.history is not None:
                self.history["busy"].append((self.sim.now, self.medium.busy[dut]))
        seen = set()
        for d in flipped:
            seen.add(d)
            self._sense_changed(self.nodes[d])
        for n in extra:
            if n.id not in seen:
                self._sense_changed(n)

    def _access(self, n: Node) -> str:
        n.ev_access = None
        if n.state != CONTEND:
            return "stale"
        return self._start_data(n)

    def _ai_slot(self, n: Node) -> str:
        n.ev_access = None
        if n.state != CONTEND:
            return "stale"
        ctl = n.controller
        waited = ctl.waited
        if ctl.slot_edge(self.sim.now, self.medium.busy[n.id]):
            return f"ca=transmit waited={waited} " + self._start_data(n)
        if not n.sensed_busy:
            n.ev_access = self.sim.schedule(self.sim.now + mac.SLOT_US, SLOT_EDGE,
                                            lambda: self._ai_slot(n), n.id)
        return f"ca=wait waited={waited}"

    # transmission

    def _start_data(self, n: Node) -> str:
        now = self.sim.now
        q = n.dcf.tx_queue
        head = q[0]
        if head.kind == MGMT:
            mcs = 0
        elif n.controller is not None:
            mcs = n.controller.choose_mcs(now, now - head.created_at)
        else:
            mcs = n.rate(head.dst).mcs
        pkts = [head]
        nbytes = head.bytes
        air = self.medium.airtime(mcs, nbytes)
        if head.kind == DATA:
            for p in list(q)[1:n.spec.burst_length]:
                if p.dst != head.dst or p.kind != DATA:
                    break
                longer = self.medium.airtime(mcs, nbytes + p.bytes)
                if longer > mac.MAX_PPDU_US:
                    break
                pkts.append(p)
                nbytes += p.bytes
                air = longer
        frame = Frame(n.id, head.dst, head.kind, nbytes, mcs, self.medium.tx_powers[n.id],
                      now, now + air, tuple(pkts))
        n.dcf.pending_frame = frame
        n.dcf.attempts += 1
        n.counters.tx_attempts += 1
        n.state = TX
        self._begin_tx(n, frame)
        return f"tx src={n.id} dst={head.dst} mcs={mcs} bytes={nbytes} air={air}"

    def _begin_tx(self, n: Node, frame: Frame):
        self.medium.start_frame(frame)
        n.txing = True
        n.counters.airtime_us += frame.end - frame.start
        self.sim.schedule(frame.end, TX_END, lambda: self._end_tx(frame), n.id)
        self._refresh_cca(n)

    def _end_tx(self, frame: Frame) -> str:
        med = self.medium
        med.end_frame(frame)
        src = self.nodes[frame.src]
        src.txing = any(f.src == src.id for f in med.in_flight)
        self._observe(frame)
        self._refresh_cca(src)
        if frame.kind == ACK:
            return self._ack_end(frame)
        return self._data_end(frame)

    def _observe(self, frame: Frame):
        dut = self.dut.id
        if frame.src == dut:
            rec = (frame.start, frame.end, frame.src, frame.kind)
        elif self.medium.decodable(frame, dut):
            rec = (frame.start, frame.end, frame.src, frame.kind)
            if frame.dst != dut and frame.kind in (DATA, ACK):
                self.monitor.last_intf_success = frame.end
        else:
            return
        self.monitor.add_decoded(*rec)
        if self.history is not None:
            self.history["decoded"].append(rec)

    def _deliver(self, pkts, now) -> List[int]:
        out = []
        for p in pkts:
            if p.mark_delivered(now):
                self.delivered += 1
                out.append(p.id)
                if p.dut:
                    self.qos.add_delay(now, (now - p.created_at) / 1000.0)
        return out

    def _data_end(self, frame: Frame) -> str:
        now = self.sim.now
        s = self.nodes[frame.src]
        if frame.dst < 0:
            got = self._deliver(frame.packets, now)
            self._complete(s, SUCCESS)
            return f"frame={frame.kind} src={s.id} dst=-1 ok=1 dlv={';'.join(map(str, got))}"
        r = frame.dst
        ok = False
        sinr = self.medium.sinr(frame, r)
        if r not in frame.overlaps:
            u = self.nodes[r].rx_stream.next_uniform()
            ok = medium_deliver(sinr, self.medium.mcs(frame.mcs), bool(frame.overlaps), u,
                                self.cfg.phy.capture_db, self.cfg.phy.per_sigma_db)
        got = []
        if ok:
            got = self._deliver(frame.packets, now)
            if r == self.dut.id and self.dut.controller is not None:
                self.dut.controller.measured_snr(sinr)
            self.sim.schedule(now + mac.SIFS_US, TX_START,
                              lambda: self._send_ack(self.nodes[r], s, frame), r)
        s.state = WAIT_ACK
        s.ev_timeout = self.sim.schedule(
            now + mac.SIFS_US + ACK_AIRTIME_US + mac.ACK_TIMEOUT_SLACK_US, TIMER,
            lambda: self._ack_timeout(s, frame), s.id)
        return (f"frame=data src={s.id} dst={r} mcs={frame.mcs} ok={int(ok)} "
                f"dlv={';'.join(map(str, got))}")

    def _send_ack(self, r: Node, s: Node, data: Frame) -> str:
        if r.txing:
            return f"ack-skip src={r.id}"
        now = self.sim.now
        ack = Frame(r.id, s.id, ACK, ACK_BYTES, 0, self.medium.tx_powers[r.id],
                    now, now + ACK_AIRTIME_US, ref=data)
        self._begin_tx(r, ack)
        return f"ack src={r.id} dst={s.id}"

    def _ack_end(self, ack: Frame) -> str:
        s = self.nodes[ack.dst]
        if s.state != WAIT_ACK or s.dcf.pending_frame is not ack.ref:
            return f"frame=ack src={ack.src} dst={s.id} ok=0 stale=1"
        ok = False
        sinr = self.medium.sinr(ack, s.id)
        if s.id not in ack.overlaps:
            u = s.rx_stream.next_uniform()
            ok = medium_deliver(sinr, self.medium.mcs(0), bool(ack.overlaps), u,
                                self.cfg.phy.capture_db, self.cfg.phy.per_sigma_db)
        if not ok:
            return f"frame=ack src={ack.src} dst={s.id} ok=0"
        Simulator.cancel(s.ev_timeout)
        s.ev_timeout = None
        if s.controller is not None:
            s.controller.measured_snr(sinr)
        detail = self._complete(s, SUCCESS)
        return f"frame=ack src={ack.src} dst={s.id} ok=1 {detail}"

    def _ack_timeout(self, s: Node, frame: Frame) -> str:
        s.ev_timeout = None
        if s.dcf.pending_frame is not frame:
            return "stale"
        return "ack-timeout " + self._complete(s, ACK_TIMEOUT)

    def _complete(self, s: Node, kind: str) -> str:
        now = self.sim.now
        frame = s.dcf.pending_frame
        attempts = s.dcf.attempts
        outcome = TxOutcome(kind, attempts, 1 if kind == SUCCESS else 0)
        unicast = frame.dst >= 0
        if unicast and s.controller is None:
            s.rate(frame.dst).update(kind == SUCCESS)
        done = on_tx_complete(s.dcf, outcome, s.backoff_stream)
        c = s.counters
        dropped_ids = []
        if outcome.kind == SUCCESS:
            c.successes += 1
            c.delivered_airtime_us += frame.end - frame.start
        else:
            c.ack_timeouts += 1
            if outcome.kind == DROP:
                for p in done:
                    if p.delivered_at is None:
                        c.drops += 1
                        self.dropped += 1
                        dropped_ids.append(p.id)
                        if p.dut:
                            self.qos.add_loss(now)
        if s.controller is not None:
            s.controller.tx_outcome(now, outcome.kind)
            if done:
                s.controller.packet_complete(attempts, outcome.frames_acked)
        s.state = IDLE
        if s.dcf.tx_queue:
            self._start_contention(s)
        detail = f"outcome={outcome.kind}"
        if dropped_ids:
            detail += f" drop={';'.join(map(str, dropped_ids))}"
        return detail

    # driver

    def run(self) -> EpisodeResult:
        self.sim.run_until(self.duration)
        residual = sum(1 for n in self.nodes for p in n.dcf.tx_queue if p.delivered_at is None)
        return EpisodeResult(
            duration=self.duration, dut_packets=self.dut_packets, generated=self.generated,
            delivered=self.delivered, dropped=self.dropped, residual_queued=residual,
            counters={n.id: n.counters for n in self.nodes}, controller=self.dut.controller,
            events=self.sim.executed, history=self.history)
