"""Propagation, airtime, reception and carrier sense on a single shared channel."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

PL0_DB = 46.7
PL_EXPONENT = 3.0
MIN_DISTANCE_M = 0.1
NOISE_DBM = -94.0
CCA_THRESHOLD_DBM = -82.0
CAPTURE_DB = 10.0
PER_SIGMA_DB = 1.0
PREAMBLE_US = 40.0
SYMBOL_US = 13.6
ACK_AIRTIME_US = 32
ACK_BYTES = 14
AP_TX_POWER_DBM = 20.0
STA_TX_POWER_DBM = 15.0

# HE-MCS 0..11, one spatial stream, 0.8 us GI, 20 MHz RU (Mbit/s == bit/us)
HE_RATES = (8.6, 17.2, 25.8, 34.4, 51.6, 68.8, 77.4, 86.0, 103.2, 114.7, 129.0, 143.4)
HE_SNR50 = tuple(2.0 + 3.0 * i for i in range(12))

DATA, ACK, MGMT = "data", "ack", "mgmt"


@dataclass(frozen=True)
class McsEntry:
    index: int
    data_rate: float  # bit/us
    snr50: float  # dB


def default_mcs_table() -> List[McsEntry]:
    return [McsEntry(i, r, s) for i, (r, s) in enumerate(zip(HE_RATES, HE_SNR50))]


def validate_mcs_table(table: Sequence[McsEntry]):
    for a, b in zip(table, table[1:]):
        if not (b.data_rate > a.data_rate and b.snr50 > a.snr50):
            raise ValueError("MCS table must be strictly increasing in rate and snr50")


@dataclass
class PhyConfig:
    pl0_db: float = PL0_DB
    exponent: float = PL_EXPONENT
    noise_dbm: float = NOISE_DBM
    cca_threshold_dbm: float = CCA_THRESHOLD_DBM
    capture_db: float = CAPTURE_DB
    per_sigma_db: float = PER_SIGMA_DB
    ap_tx_power_dbm: float = AP_TX_POWER_DBM
    sta_tx_power_dbm: float = STA_TX_POWER_DBM
    mcs: List[McsEntry] = field(default_factory=default_mcs_table)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "pl0_db", "exponent", "noise_dbm", "cca_threshold_dbm", "capture_db",
            "per_sigma_db", "ap_tx_power_dbm", "sta_tx_power_dbm")}
        d["mcs"] = [{"index": m.index, "data_rate": m.data_rate, "snr50": m.snr50}
                    for m in self.mcs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhyConfig":
        d = dict(d)
        mcs = d.pop("mcs", None)
        cfg = cls(**d)
        if mcs is not None:
            cfg.mcs = [McsEntry(int(m["index"]), float(m["data_rate"]), float(m["snr50"]))
                       for m in mcs]
        validate_mcs_table(cfg.mcs)
        return cfg


def path_loss(d: float, pl0: float = PL0_DB, n: float = PL_EXPONENT) -> float:
    """Log-distance path loss in dB, 1 m reference."""
    d = max(d, MIN_DISTANCE_M)
    return pl0 + 10.0 * n * math.log10(d)


def distance_for_rssi(rssi_dbm: float, tx_power_dbm: float,
                      pl0: float = PL0_DB, n: float = PL_EXPONENT) -> float:
    return 10.0 ** ((tx_power_dbm - rssi_dbm - pl0) / (10.0 * n))


def frame_airtime(mcs: McsEntry, nbytes: int) -> int:
    """PPDU duration in whole microseconds: preamble plus payload padded to
    whole OFDM symbols."""
    if nbytes <= 0:
        raise ValueError("frame must carry at least one byte")
    # tenth-of-unit integer arithmetic keeps the symbol count exact
    rate10 = round(mcs.data_rate * 10)
    sym10 = round(SYMBOL_US * 10)
    n_sym = -(-(8 * nbytes * 100) // (rate10 * sym10))
    total10 = round(PREAMBLE_US * 10) + n_sym * sym10
    return -(-total10 // 10)


def per(mcs: McsEntry, snr_db: float, sigma: float = PER_SIGMA_DB) -> float:
    x = (snr_db - mcs.snr50) / sigma
    if x > 700:
        return 0.0
    if x < -700:
        return 1.0
    return 1.0 / (1.0 + math.exp(x))


def dbm_to_mw(p: float) -> float:
    return 10.0 ** (p / 10.0)


def mw_to_dbm(p: float) -> float:
    return 10.0 * math.log10(p) if p > 0 else -math.inf


@dataclass
class Frame:
    src: int
    dst: int  # -1 for broadcast
    kind: str
    payload_bytes: int
    mcs: int
    tx_power: float
    start: int
    end: int
    packets: tuple = ()
    # for an ACK, the data frame it acknowledges
    ref: object = None
    # sources of every frame that overlapped this one in time
    overlaps: list = field(default_factory=list)

    def __post_init__(self):
        if self.payload_bytes <= 0:
            raise ValueError("payload must be positive")


class Medium:
    """The single shared channel: positions, pairwise received powers, in-flight
    frames and per-device carrier-sense state."""

    def __init__(self, positions: Sequence, tx_powers: Sequence[float],
                 cfg: Optional[PhyConfig] = None):
        self.cfg = cfg or PhyConfig()
        self.positions = [tuple(p) for p in positions]
        self.tx_powers = list(tx_powers)
        n = len(self.positions)
        self.n = n
        self.noise_mw = dbm_to_mw(self.cfg.noise_dbm)
        self.cca_mw = dbm_to_mw(self.cfg.cca_threshold_dbm)
        # rx_dbm[i][j]: power received at j from a transmission by i
        self.rx_dbm = [[0.0] * n for _ in range(n)]
        self.rx_mw = [[0.0] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                d = math.dist(self.positions[i], self.positions[j])
                p = self.tx_powers[i] - path_loss(d, self.cfg.pl0_db, self.cfg.exponent)
                self.rx_dbm[i][j] = p
                self.rx_mw[i][j] = dbm_to_mw(p)
        self.in_flight: List[Frame] = []
        self.busy = [False] * n

    def mcs(self, index: int) -> McsEntry:
        return self.cfg.mcs[index]

    def airtime(self, mcs_index: int, nbytes: int) -> int:
        return frame_airtime(self.cfg.mcs[mcs_index], nbytes)

    def snr(self, src: int, dst: int) -> float:
        return self.rx_dbm[src][dst] - self.cfg.noise_dbm

    def sense_power_mw(self, device: int) -> float:
        return sum(self.rx_mw[f.src][device] for f in self.in_flight if f.src != device)

    def cca_busy(self, device: int) -> bool:
        return self.sense_power_mw(device) > self.cca_mw

    def start_frame(self, frame: Frame):
        for other in self.in_flight:
            other.overlaps.append(frame.src)
            frame.overlaps.append(other.src)
        self.in_flight.append(frame)

    def end_frame(self, frame: Frame):
        self.in_flight.remove(frame)

    def transmitting(self, device: int) -> bool:
        return any(f.src == device for f in self.in_flight)

    def update_cca(self) -> List[int]:
        """Recompute busy flags; return devices whose state flipped."""
        flipped = []
        rx = self.rx_mw
        thr = self.cca_mw
        inflight = self.in_flight
        for d in range(self.n):
            p = 0.0
            for f in inflight:
                if f.src != d:
                    p += rx[f.src][d]
            b = p > thr
            if b != self.busy[d]:
                self.busy[d] = b
                flipped.append(d)
        return flipped

    def sinr(self, frame: Frame, rx: int) -> float:
        signal = self.rx_mw[frame.src][rx]
        interf = sum(self.rx_mw[s][rx] for s in set(frame.overlaps) if s != rx)
        return mw_to_dbm(signal / (self.noise_mw + interf)) if signal > 0 else -math.inf

    def decodable(self, frame: Frame, rx: int) -> bool:
        """Deterministic decodability used for passive sensing: SINR at or
        above the MCS midpoint and capture satisfied under overlap."""
        if rx == frame.src or rx in frame.overlaps:
            return False
        s = self.sinr(frame, rx)
        if frame.overlaps and s < self.cfg.capture_db:
            return False
        return s >= self.cfg.mcs[frame.mcs].snr50


def medium_deliver(sinr_db: float, mcs: McsEntry, overlapped: bool, u: float,
                   capture_db: float = CAPTURE_DB, sigma: float = PER_SIGMA_DB) -> bool:
    """Reception outcome for one receiver given its SINR and a uniform draw."""
    if overlapped and sinr_db < capture_db:
        return False
    return u < 1.0 - per(mcs, sinr_db, sigma)


def sinr_db(signal_dbm: float, interferers_dbm: Sequence[float], noise_dbm: float = NOISE_DBM) -> float:
    total = dbm_to_mw(noise_dbm) + sum(dbm_to_mw(p) for p in interferers_dbm)
    return signal_dbm - mw_to_dbm(total)
