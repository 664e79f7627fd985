import pytest
from hypothesis import given, settings, strategies as st

from aimac import dcf
from aimac.dcf import (ACK_TIMEOUT, DECREMENT, DROP, FREEZE, SUCCESS, TRANSMIT, DcfState, Packet,
                       RateAdapter, TxOutcome, backoff_draw, baseline_rate_adapt, cw_after_failures,
                       dcf_on_slot_edge, next_grid_edge, on_tx_complete, slots_elapsed)
from aimac.env import AP, STA, UNASSOC, DeviceSpec, ScenarioConfig
from aimac.kernel import RngStream
from aimac.phy import MGMT, Frame, Medium
from aimac.sim import Episode


class _F:
    packets = (None,)


def _state_with_packet(cw=15):
    s = DcfState(cw=cw)
    s.enqueue(Packet(0, 100, 0))
    s.pending_frame = _F()
    return s


def test_timing_constants():
    assert (dcf.SLOT_US, dcf.SIFS_US, dcf.DIFS_US) == (9, 16, 34)
    assert dcf.DIFS_US == dcf.SIFS_US + 2 * dcf.SLOT_US
    assert (dcf.CW_MIN, dcf.CW_MAX, dcf.RETRY_LIMIT, dcf.QUEUE_CAP) == (15, 1023, 7, 256)


def test_backoff_draw_range_and_mean():
    s = RngStream(1, "bo")
    assert {backoff_draw(1, s) for _ in range(500)} == {0, 1}
    draws = [backoff_draw(15, s) for _ in range(1_000_000)]
    assert 7.45 <= sum(draws) / len(draws) <= 7.55
    assert min(draws) == 0 and max(draws) == 15
    with pytest.raises(ValueError):
        backoff_draw(0, s)


def test_backoff_deterministic():
    a, b = RngStream(9, "bo"), RngStream(9, "bo")
    assert [backoff_draw(31, a) for _ in range(100)] == [backoff_draw(31, b) for _ in range(100)]


def test_slot_edge_rules():
    s = DcfState(backoff=3)
    assert dcf_on_slot_edge(s, False) == DECREMENT and s.backoff == 2
    assert dcf_on_slot_edge(s, True) == FREEZE and s.backoff == 2
    s.backoff = 0
    assert dcf_on_slot_edge(s, False) == TRANSMIT


def test_grid_alignment():
    assert next_grid_edge(100, 100) == 134
    assert next_grid_edge(100, 134) == 134
    assert next_grid_edge(100, 135) == 143
    assert slots_elapsed(134, 134) == 0
    assert slots_elapsed(134, 152) == 2


def test_cw_doubling_and_cap():
    s = _state_with_packet(15)
    on_tx_complete(s, TxOutcome(ACK_TIMEOUT))
    assert s.cw == 31
    s = _state_with_packet(1023)
    on_tx_complete(s, TxOutcome(ACK_TIMEOUT))
    assert s.cw == 1023


def test_success_resets_and_dequeues():
    s = _state_with_packet(63)
    s.retries = 3
    out = TxOutcome(SUCCESS, 1, 1)
    done = on_tx_complete(s, out)
    assert len(done) == 1 and not s.tx_queue
    assert s.cw == 15 and s.retries == 0


def test_eighth_timeout_drops():
    s = DcfState()
    s.enqueue(Packet(0, 100, 0))
    kinds = []
    for _ in range(8):
        s.pending_frame = _F()
        out = TxOutcome(ACK_TIMEOUT)
        done = on_tx_complete(s, out)
        kinds.append(out.kind)
    assert kinds[:7] == [ACK_TIMEOUT] * 7
    assert kinds[7] == DROP
    assert done and done[0].dropped and not s.tx_queue


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 7))
def test_cw_trajectory_matches_oracle(k):
    s = DcfState()
    s.enqueue(Packet(0, 100, 0))
    for _ in range(k):
        s.pending_frame = _F()
        on_tx_complete(s, TxOutcome(ACK_TIMEOUT))
    assert s.cw == min(2 ** k * 16 - 1, 1023) == cw_after_failures(k)


def test_queue_overflow():
    s = DcfState(queue_cap=2)
    assert s.enqueue(Packet(0, 1, 0)) and s.enqueue(Packet(1, 1, 0))
    assert not s.enqueue(Packet(2, 1, 0))


def test_rate_adapter_rules():
    assert baseline_rate_adapt([]) == 3
    ra = RateAdapter(start=11)
    for _ in range(10):
        ra.update(True)
    assert ra.mcs == 11
    assert baseline_rate_adapt([False, False], start=5) == 4
    assert baseline_rate_adapt([True] * 10) == 4
    assert baseline_rate_adapt([False, True, False]) == 3
    assert baseline_rate_adapt([TxOutcome(ACK_TIMEOUT)] * 2) == 2


def test_packet_delivery_recorded_once():
    p = Packet(0, 10, 5)
    assert p.mark_delivered(9) and not p.mark_delivered(12)
    assert p.delivered_at == 9
    with pytest.raises(ValueError):
        Packet(1, 0, 0)


# crafted three-device episodes for the acknowledgement procedure

def _crafted(positions):
    devices = [DeviceSpec(0, AP), DeviceSpec(1, STA, associated_with=0, dut=True),
               DeviceSpec(2, UNASSOC)]
    cfg = ScenarioConfig(kind="crafted", devices=devices, duration=200_000)
    ep = Episode(cfg, seed=1)
    ep.medium = Medium(positions, [20.0, 15.0, 15.0], cfg.phy)
    pkt = Packet(0, 100, 0, "uplink", 1, 0, "data", True)
    ep.dut_packets.append(pkt)
    ep.generated += 1
    ep._pkt_id = 1
    node = ep.nodes[1]
    node.dcf.enqueue(pkt)
    ep.sim.schedule(0, "packet-arrival", lambda: ep._start_contention(node) or "inject", 1)
    return ep, pkt


def test_delivered_frame_is_acked():
    ep, pkt = _crafted([(0, 0), (5, 0), (500, 0)])
    r = ep.run()
    assert pkt.delivered_at is not None
    c = r.counters[1]
    assert (c.tx_attempts, c.successes, c.ack_timeouts) == (1, 1, 0)


def test_corrupted_frame_times_out_until_dropped():
    ep, pkt = _crafted([(0, 0), (300, 0), (600, 0)])
    r = ep.run()
    c = r.counters[1]
    assert c.successes == 0 and c.ack_timeouts == 8 and c.drops == 1
    assert pkt.dropped and pkt.delivered_at is None
    assert r.generated == r.delivered + r.dropped + r.residual_queued


def test_corrupted_ack_counts_as_failure_despite_delivery():
    import io
    ep, pkt = _crafted([(0, 0), (6, 0), (9, 0)])
    trace = io.StringIO()
    ep.sim.trace = trace
    orig = ep._send_ack

    def send_and_jam(r, s, data):
        detail = orig(r, s, data)
        now = ep.sim.now
        ep.medium.start_frame(Frame(2, -1, MGMT, 100, 0, 15.0, now, now + 150_000))
        ep._refresh_cca()
        return detail

    ep._send_ack = send_and_jam
    ep.duration = 100_000
    r = ep.run()
    lines = trace.getvalue().splitlines()
    assert any("frame=data src=1 dst=0" in ln and "ok=1" in ln and "dlv=0" in ln for ln in lines)
    assert any("frame=ack" in ln and "ok=0" in ln for ln in lines)
    assert any("ack-timeout outcome=ack_timeout" in ln for ln in lines)
    assert pkt.delivered_at is not None
    assert r.counters[1].successes == 0 and r.counters[1].ack_timeouts == 1
