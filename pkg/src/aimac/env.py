"""Traffic profiles, interference scenarios and device placement.

Packet sizes and inter-arrival times follow a Gumbel (largest extreme value)
law. Scenarios are plain data and round-trip through a versioned JSON file.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from .kernel import RngStream, SECOND_US
from .phy import PhyConfig, distance_for_rssi

SCHEMA_VERSION = 1
EULER_GAMMA = 0.5772156649015329

MIN_SIZE_B, MAX_SIZE_B = 1, 2000
MIN_INTERVAL_MS = 0.1
RSSI_RANGE = (-90.0, -30.0)

GAMING, BULK, PROBE = "gaming", "bulk", "probe_mgmt"
UPLINK, DOWNLINK, BOTH = "uplink", "downlink", "both"
AP, STA, UNASSOC = "ap", "sta", "unassociated_sta"
BASELINE, AIMAC = "baseline", "aimac"
SCENARIO_KINDS = ("home", "office", "mall")


class ConfigError(ValueError):
    pass


@dataclass
class TrafficProfile:
    size_mu: float
    size_beta: float
    interval_mu: float
    interval_beta: float
    kind: str = GAMING
    direction: str = BOTH
    # frames emitted per arrival (probe bursts, bulk transfers)
    frames_per_arrival: int = 1

    def validate(self):
        if self.size_beta <= 0 or self.interval_beta <= 0:
            raise ConfigError("Gumbel scale parameters must be positive")
        if self.kind not in (GAMING, BULK, PROBE):
            raise ConfigError(f"unknown traffic kind {self.kind!r}")
        if self.direction not in (UPLINK, DOWNLINK, BOTH):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.frames_per_arrival < 1:
            raise ConfigError("frames_per_arrival must be >= 1")

    def mean_bytes(self) -> float:
        return self.size_mu + EULER_GAMMA * self.size_beta

    def mean_interval_ms(self) -> float:
        return self.interval_mu + EULER_GAMMA * self.interval_beta

    def offered_load_bps(self) -> float:
        n_dir = 2 if self.direction == BOTH else 1
        return n_dir * self.frames_per_arrival * 8 * self.mean_bytes() / (self.mean_interval_ms() / 1e3)


def gaming_profile() -> TrafficProfile:
    return TrafficProfile(80.0, 20.0, 15.0, 3.0, GAMING, BOTH)


def probe_profile() -> TrafficProfile:
    return TrafficProfile(120.0, 0.5, 500.0, 100.0, PROBE, UPLINK, frames_per_arrival=3)


@dataclass
class DeviceSpec:
    id: int
    role: str
    associated_with: Optional[int] = None
    rssi_target: Optional[float] = None
    profiles: List[TrafficProfile] = field(default_factory=list)
    policy: str = BASELINE
    dut: bool = False
    burst_length: int = 1
    tx_power: Optional[float] = None


@dataclass
class ScenarioConfig:
    kind: str
    devices: List[DeviceSpec]
    phy: PhyConfig = field(default_factory=PhyConfig)
    duration: int = 15 * SECOND_US
    seed: int = 0
    tail_threshold_ms: float = 30.0

    def dut(self) -> DeviceSpec:
        return next(d for d in self.devices if d.dut)

    def validate(self):
        ids = [d.id for d in self.devices]
        if ids != list(range(len(ids))):
            raise ConfigError("device ids must be 0..n-1 in order")
        by_id = {d.id: d for d in self.devices}
        duts = [d for d in self.devices if d.dut]
        if len(duts) != 1:
            raise ConfigError("exactly one device must be marked as device-under-test")
        if duts[0].role != STA:
            raise ConfigError("device-under-test must be an associated STA")
        for d in self.devices:
            if d.role not in (AP, STA, UNASSOC):
                raise ConfigError(f"device {d.id}: unknown role {d.role!r}")
            if d.policy not in (BASELINE, AIMAC):
                raise ConfigError(f"device {d.id}: unknown policy {d.policy!r}")
            if d.policy == AIMAC and not d.dut:
                raise ConfigError(f"device {d.id}: only the device-under-test may run aimac")
            if d.role == STA:
                ap = by_id.get(d.associated_with)
                if ap is None or ap.role != AP:
                    raise ConfigError(f"device {d.id}: sta must reference an existing ap")
            if d.role == UNASSOC and any(p.kind != PROBE for p in d.profiles):
                raise ConfigError(f"device {d.id}: unassociated sta may only probe")
            if d.rssi_target is not None and not RSSI_RANGE[0] <= d.rssi_target <= RSSI_RANGE[1]:
                raise ConfigError(f"device {d.id}: rssi_target {d.rssi_target} out of range")
            if d.burst_length < 1:
                raise ConfigError(f"device {d.id}: burst_length must be >= 1")
            for p in d.profiles:
                p.validate()
        if self.duration < 0:
            raise ConfigError("duration must be non-negative")

    def offered_load_bps(self) -> float:
        return sum(p.offered_load_bps() for d in self.devices for p in d.profiles)

    # serialization

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "duration": self.duration,
            "tail_threshold_ms": self.tail_threshold_ms,
            "phy": self.phy.to_dict(),
            "devices": [asdict(d) for d in self.devices],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {d.get('schema_version')!r}")
        try:
            devices = []
            for dd in d["devices"]:
                dd = dict(dd)
                dd["profiles"] = [TrafficProfile(**p) for p in dd.get("profiles", [])]
                devices.append(DeviceSpec(**dd))
            cfg = cls(kind=d["kind"], devices=devices,
                      phy=PhyConfig.from_dict(d.get("phy", {})),
                      duration=int(d.get("duration", 15 * SECOND_US)),
                      seed=int(d.get("seed", 0)),
                      tail_threshold_ms=float(d.get("tail_threshold_ms", 30.0)))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed scenario: {e}") from e
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_gumbel(mu: float, beta: float, stream: RngStream) -> float:
    if beta <= 0:
        raise ValueError("beta must be positive")
    u = stream.next_uniform()
    while u <= 0.0 or u >= 1.0:
        u = stream.next_uniform()
    return mu - beta * math.log(-math.log(u))


def clamp_size(x: float) -> int:
    return int(min(max(round(x), MIN_SIZE_B), MAX_SIZE_B))


def clamp_interval_ms(x: float) -> float:
    return max(x, MIN_INTERVAL_MS)


def next_packet(profile: TrafficProfile, now: int, stream: RngStream):
    """Arrival time (us) and size (bytes) of the next packet of a flow."""
    interval = clamp_interval_ms(sample_gumbel(profile.interval_mu, profile.interval_beta, stream))
    size = clamp_size(sample_gumbel(profile.size_mu, profile.size_beta, stream))
    return now + max(1, round(interval * 1000)), size


def place_devices(specs: List[DeviceSpec], stream: RngStream, phy: Optional[PhyConfig] = None):
    """Positions (m) for every device.

    The device-under-test's AP anchors the origin. A STA is placed around its
    AP; other devices around the origin. The radius inverts the path-loss
    model so the reference point hears the device at its rssi_target; the
    bearing is uniform.
    """
    phy = phy or PhyConfig()
    by_id = {d.id: d for d in specs}
    anchor = by_id[next(d for d in specs if d.dut).associated_with]
    pos = {}

    def ref_of(d):
        if d.role == STA and d.associated_with is not None and d.associated_with != d.id:
            return d.associated_with
        return None

    def place(d):
        if d.id in pos:
            return pos[d.id]
        if d.id == anchor.id or d.rssi_target is None:
            pos[d.id] = (0.0, 0.0)
            return pos[d.id]
        if not RSSI_RANGE[0] <= d.rssi_target <= RSSI_RANGE[1]:
            raise ConfigError(f"device {d.id}: rssi_target {d.rssi_target} out of range")
        ref = ref_of(d)
        cx, cy = place(by_id[ref]) if ref is not None else (0.0, 0.0)
        r = distance_for_rssi(d.rssi_target, tx_power_of(d, phy), phy.pl0_db, phy.exponent)
        theta = 2 * math.pi * stream.next_uniform()
        pos[d.id] = (cx + r * math.cos(theta), cy + r * math.sin(theta))
        return pos[d.id]

    return [place(d) for d in specs]


def tx_power_of(d: DeviceSpec, phy: PhyConfig) -> float:
    if d.tx_power is not None:
        return d.tx_power
    return phy.ap_tx_power_dbm if d.role == AP else phy.sta_tx_power_dbm


# scenario synthesis; population sizes and profile constants are data
SCENARIO_PRESETS = {
    "home": dict(
        n_ap=2, sta_per_ap=(2, 2), n_probers=0,
        ap_rssi=(-80.0, -65.0), sta_rssi=(-60.0, -45.0), prober_rssi=None,
        bulk=TrafficProfile(1000.0, 200.0, 25.0, 5.0, BULK, BOTH), burst_length=1,
    ),
    "office": dict(
        n_ap=8, sta_per_ap=(5, 5, 5, 5, 5, 5, 5, 5), n_probers=0,
        ap_rssi=(-62.0, -50.0), sta_rssi=(-52.0, -40.0), prober_rssi=None,
        # bulk transfers arrive as 8-frame bursts that aggregate into one PPDU
        bulk=TrafficProfile(1400.0, 100.0, 300.0, 60.0, BULK, BOTH, frames_per_arrival=8),
        burst_length=8,
    ),
    "mall": dict(
        n_ap=12, sta_per_ap=(1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0), n_probers=60,
        ap_rssi=(-88.0, -60.0), sta_rssi=(-65.0, -45.0), prober_rssi=(-85.0, -50.0),
        bulk=TrafficProfile(400.0, 100.0, 40.0, 10.0, BULK, BOTH), burst_length=1,
    ),
}
DUT_RSSI = (-50.0, -40.0)


def build_scenario(kind: str, seed: int, policy: str = BASELINE,
                   duration: int = 15 * SECOND_US) -> ScenarioConfig:
    """Deterministic scenario for (kind, seed): the device-under-test STA and
    its AP carrying gaming traffic, plus the kind's interferer population."""
    if kind not in SCENARIO_PRESETS:
        raise ConfigError(f"unknown scenario kind {kind!r}; expected one of {SCENARIO_KINDS}")
    p = SCENARIO_PRESETS[kind]
    rs = RngStream(seed, f"scenario/{kind}")

    def rssi(lo_hi):
        return round(rs.uniform(*lo_hi), 2)

    devices = [
        DeviceSpec(0, AP),
        DeviceSpec(1, STA, associated_with=0, rssi_target=rssi(DUT_RSSI),
                   profiles=[gaming_profile()], policy=policy, dut=True),
    ]
    bulk = p["bulk"]
    for a in range(p["n_ap"]):
        ap_id = len(devices)
        devices.append(DeviceSpec(ap_id, AP, rssi_target=rssi(p["ap_rssi"]),
                                  burst_length=p["burst_length"]))
        for _ in range(p["sta_per_ap"][a]):
            devices.append(DeviceSpec(len(devices), STA, associated_with=ap_id,
                                      rssi_target=rssi(p["sta_rssi"]),
                                      profiles=[TrafficProfile(**asdict(bulk))],
                                      burst_length=p["burst_length"]))
    for _ in range(p["n_probers"]):
        devices.append(DeviceSpec(len(devices), UNASSOC, rssi_target=rssi(p["prober_rssi"]),
                                  profiles=[probe_profile()]))
    cfg = ScenarioConfig(kind=kind, devices=devices, duration=duration, seed=seed)
    cfg.validate()
    return cfg


def clean_scenario(seed: int = 0, policy: str = BASELINE,
                   duration: int = 15 * SECOND_US) -> ScenarioConfig:
    """One AP and the device-under-test only."""
    rs = RngStream(seed, "scenario/clean")
    devices = [
        DeviceSpec(0, AP),
        DeviceSpec(1, STA, associated_with=0, rssi_target=round(rs.uniform(*DUT_RSSI), 2),
                   profiles=[gaming_profile()], policy=policy, dut=True),
    ]
    return ScenarioConfig(kind="clean", devices=devices, duration=duration, seed=seed)


def saturated_scenario(n_sta: int = 4, seed: int = 0,
                       duration: int = 15 * SECOND_US) -> ScenarioConfig:
    """n identical backlogged STAs uploading to one AP at equal RSSI."""
    sat = TrafficProfile(1500.0, 1.0, 0.1, 0.01, BULK, UPLINK)
    devices = [DeviceSpec(0, AP)]
    for i in range(n_sta):
        devices.append(DeviceSpec(i + 1, STA, associated_with=0, rssi_target=-45.0,
                                  profiles=[TrafficProfile(**asdict(sat))], dut=(i == 0)))
    return ScenarioConfig(kind="saturated", devices=devices, duration=duration, seed=seed)


def resolve_scenario(spec: str, seed: int = 0) -> ScenarioConfig:
    """A scenario kind name or a path to a scenario file."""
    if spec in SCENARIO_PRESETS:
        return build_scenario(spec, seed)
    if spec == "clean":
        return clean_scenario(seed)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"no scenario kind or file named {spec!r}")
    return ScenarioConfig.load(path)
