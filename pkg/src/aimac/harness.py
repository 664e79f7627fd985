"""Episode runner, metrics, the multi-seed evaluation protocol, training
orchestration and trace replay."""
from __future__ import annotations

import csv
import json
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .agents import ExperienceLog
from .env import AIMAC, BASELINE, ScenarioConfig, resolve_scenario
from .kernel import PACKET_ARRIVAL, SECOND_US
from .qmix import (NonFiniteLoss, Optimizer, ReplayBuffer, TrainConfig, epsilon_at,
                   init_params, save_checkpoint, sync_target, td_step)
from .sim import Episode, EpisodeResult

TAIL_THRESHOLD_MS = 30.0
METRICS = ("latency_ms", "jitter_ms", "loss_rate", "tail_prob")
CSV_COLUMNS = ("seed", "policy", "scenario", "latency_ms", "jitter_ms", "loss_rate",
               "tail_prob", "tx_attempts", "ack_timeouts")
TRAIN_SEED_BASE = 10_000


@dataclass
class FlowMetrics:
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_rate: float = 0.0
    tail_prob: float = 0.0
    generated: int = 0
    delivered: int = 0
    empty: bool = True


@dataclass
class EpisodeMetrics(FlowMetrics):
    flows: Dict[str, FlowMetrics] = field(default_factory=dict)
    tx_attempts: int = 0
    ack_timeouts: int = 0
    successes: int = 0
    drops: int = 0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRICS + ("tx_attempts", "ack_timeouts")}


def compute_metrics(delays_ms: Sequence[float], generated: int, delivered: Optional[int] = None,
                    tail_threshold_ms: float = TAIL_THRESHOLD_MS) -> EpisodeMetrics:
    """Latency (mean), jitter (population std), loss and tail probability.

    An episode that generated nothing is flagged ``empty`` with zeroed
    metrics rather than NaNs. With packets but no deliveries the delay
    statistics are zero and the loss is 1.
    """
    n = len(delays_ms)
    if delivered is None:
        delivered = n
    if delivered != n:
        raise ValueError(f"delivered count {delivered} does not match {n} delay samples")
    if delivered > generated:
        raise ValueError("more packets delivered than generated")
    if generated == 0:
        return EpisodeMetrics()
    m = EpisodeMetrics(generated=generated, delivered=delivered, empty=False,
                       loss_rate=(generated - delivered) / generated)
    if n:
        mean = math.fsum(delays_ms) / n
        m.latency_ms = mean
        m.jitter_ms = math.sqrt(math.fsum((d - mean) ** 2 for d in delays_ms) / n)
        m.tail_prob = sum(1 for d in delays_ms if d > tail_threshold_ms) / n
    return m


def _flow_view(m: EpisodeMetrics) -> FlowMetrics:
    return FlowMetrics(**{k: getattr(m, k) for k in FlowMetrics.__dataclass_fields__})


def metrics_from_packets(packets, tail_threshold_ms: float = TAIL_THRESHOLD_MS,
                         end_us: Optional[int] = None) -> EpisodeMetrics:
    """Metrics over resolved packets. A packet still queued at ``end_us`` is
    in flight and ignored, unless it has already waited past the tail
    threshold: then it counts as lost."""
    stale_us = tail_threshold_ms * 1000.0
    by_flow: Dict[str, list] = {}
    for p in packets:
        by_flow.setdefault(p.flow, []).append(p)

    def one(pkts):
        delays = [(p.delivered_at - p.created_at) / 1000.0 for p in pkts if p.delivered_at is not None]
        resolved = sum(1 for p in pkts if p.delivered_at is not None or p.dropped
                       or (end_us is not None and end_us - p.created_at > stale_us))
        return compute_metrics(delays, resolved, tail_threshold_ms=tail_threshold_ms)

    m = one(packets)
    m.flows = {f: _flow_view(one(ps)) for f, ps in sorted(by_flow.items())}
    return m


def run_episode(config: ScenarioConfig, policy: str = BASELINE, params=None, seed: int = 1,
                duration: Optional[int] = None, trace=None, **kw):
    """Runs one episode; returns (metrics on the device-under-test flows, raw result)."""
    if policy == AIMAC and params is None:
        raise ValueError("the aimac policy needs a checkpoint")
    ep = Episode(config, seed=seed, duration=duration, policy=policy,
                 params=params if policy == AIMAC else None, trace=trace, **kw)
    res = ep.run()
    m = metrics_from_packets(res.dut_packets, config.tail_threshold_ms, res.duration)
    c = res.counters[config.dut().id]
    m.tx_attempts, m.ack_timeouts = c.tx_attempts, c.ack_timeouts
    m.successes, m.drops = c.successes, c.drops
    return m, res


@dataclass
class EvalReport:
    scenario: str
    policy: str
    seeds: List[int]
    per_seed: List[EpisodeMetrics]

    def values(self, metric: str) -> List[float]:
        return [getattr(m, metric) for m in self.per_seed]

    def mean(self, metric: str) -> float:
        return math.fsum(self.values(metric)) / len(self.per_seed)

    def std(self, metric: str) -> float:
        return statistics.pstdev(self.values(metric)) if len(self.per_seed) > 1 else 0.0

    def summary(self) -> dict:
        return {
            "scenario": self.scenario, "policy": self.policy, "seeds": list(self.seeds),
            "n_seeds": len(self.seeds),
            "mean": {k: self.mean(k) for k in METRICS},
            "std": {k: self.std(k) for k in METRICS},
            "empty_episodes": sum(m.empty for m in self.per_seed),
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for s, m in zip(self.seeds, self.per_seed):
                w.writerow([s, self.policy, self.scenario] + [repr(float(getattr(m, k))) for k in METRICS]
                           + [m.tx_attempts, m.ack_timeouts])

    def write_json(self, path):
        out = self.summary()
        out["per_seed"] = [dict(seed=s, **asdict(m)) for s, m in zip(self.seeds, self.per_seed)]
        Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


class EpisodeFailed(RuntimeError):
    def __init__(self, seed: int, err: BaseException):
        super().__init__(f"seed {seed}: {err}")
        self.seed = seed


def _seed_config(scenario, seed: int) -> ScenarioConfig:
    if isinstance(scenario, ScenarioConfig):
        return scenario
    return resolve_scenario(scenario, seed)


def _eval_one(args):
    scenario, policy, params, seed, duration, trace_path = args
    try:
        cfg = _seed_config(scenario, seed)
        if trace_path is None:
            m, _ = run_episode(cfg, policy, params, seed, duration)
        else:
            with open(trace_path, "w") as fh:
                m, _ = run_episode(cfg, policy, params, seed, duration, trace=fh)
        return m
    except Exception as e:
        raise EpisodeFailed(seed, e) from e


def eval_workers() -> int:
    try:
        return max(1, int(os.environ.get("AIMAC_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(scenario: Union[str, ScenarioConfig], policy: str = BASELINE, params=None,
             n_seeds: int = 20, duration: Optional[int] = 15 * SECOND_US, first_seed: int = 1,
             trace_dir=None, workers: Optional[int] = None) -> EvalReport:
    """Runs seeds first_seed .. first_seed + n_seeds - 1 and aggregates them.

    ``scenario`` is a kind name (rebuilt per seed) or a fixed config.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    seeds = list(range(first_seed, first_seed + n_seeds))
    jobs = []
    for s in seeds:
        tp = None if trace_dir is None else str(Path(trace_dir) / f"trace_seed{s}.csv")
        jobs.append((scenario, policy, params, s, duration, tp))
    workers = min(workers or eval_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_eval_one, jobs))
    else:
        per_seed = [_eval_one(j) for j in jobs]
    kind = scenario.kind if isinstance(scenario, ScenarioConfig) else str(scenario)
    return EvalReport(kind, policy, seeds, per_seed)


# training

def eval_score(report: EvalReport) -> float:
    """Lower is better: mean latency plus tail and loss penalties in ms."""
    return report.mean("latency_ms") + 100.0 * report.mean("tail_prob") + 100.0 * report.mean("loss_rate")


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    best_score: float
    env_steps: int
    td_steps: int
    curve: List[dict]
    rewards: List[float]


def train(scenario: Union[str, ScenarioConfig], cfg: Optional[TrainConfig] = None,
          out_dir=None, params=None, log: Optional[Callable[[str], None]] = None,
          time_budget_s: Optional[float] = None) -> TrainResult:
    """Alternates rollout episodes with TD updates until ``cfg.env_steps``
    environment steps (channel-access decisions) have been taken.

    Writes ``curve.csv``, ``best.ckpt`` and ``last.ckpt`` into ``out_dir``.
    """
    cfg = cfg or TrainConfig()
    params = params if params is not None else init_params(cfg.seed)
    target = sync_target(params)
    opt = Optimizer(params, cfg)
    buf = ReplayBuffer(cfg.buffer_capacity, seed=cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    exp_fh = open(out / "experiences.jsonl", "w") if out is not None and cfg.env_steps <= 20_000 else None
    exp_log = ExperienceLog(exp_fh) if exp_fh is not None else None

    best_params, best_score = sync_target(params), math.inf
    curve: List[dict] = []
    rewards: List[float] = []
    env_steps = td_steps = 0
    episode = 0
    started = time.monotonic()
    duration = int(cfg.episode_seconds * SECOND_US)

    def evaluate_now():
        nonlocal best_params, best_score
        rep = evaluate(scenario, AIMAC, params, n_seeds=cfg.eval_seeds,
                       duration=int(cfg.eval_seconds * SECOND_US),
                       first_seed=TRAIN_SEED_BASE // 2, workers=1)
        score = eval_score(rep)
        if score < best_score:
            best_score, best_params = score, sync_target(params)
            if out is not None:
                save_checkpoint(out / "best.ckpt", best_params, {"env_steps": env_steps, "score": score})
        return score

    try:
        while env_steps < cfg.env_steps:
            seed = TRAIN_SEED_BASE + cfg.seed * 1000 + episode
            new = []

            def sink(exp):
                new.append(exp)
                buf.add(exp)
                if exp_log is not None:
                    exp_log.write(exp)

            _, res = run_episode(_seed_config(scenario, seed), AIMAC, params, seed, duration,
                                 epsilon_fn=lambda k: epsilon_at(k, cfg), step_offset=env_steps,
                                 experience_sink=sink)
            steps = res.controller.steps
            env_steps += steps
            rewards.extend(e.r_tot for e in new)
            losses = []
            for _ in range(steps // cfg.train_every):
                if len(buf) < cfg.batch:
                    break
                try:
                    params, loss = td_step(buf.sample(cfg.batch), params, target, cfg, opt)
                except NonFiniteLoss as e:
                    raise NonFiniteLoss(f"{e} at td step {td_steps}") from e
                td_steps += 1
                losses.append(loss)
                if td_steps % cfg.target_sync == 0:
                    target = sync_target(params)
            episode += 1
            row = {"episode": episode, "step": env_steps, "td_steps": td_steps,
                   "loss": float(np.mean(losses)) if losses else float("nan"),
                   "epsilon": epsilon_at(env_steps, cfg),
                   "mean_r_tot": float(np.mean([e.r_tot for e in new])) if new else float("nan")}
            if episode % cfg.eval_every == 0 or env_steps >= cfg.env_steps:
                row["eval_score"] = evaluate_now()
            curve.append(row)
            if log is not None:
                log(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
            if time_budget_s is not None and time.monotonic() - started > time_budget_s:
                break
        if not curve:
            # nothing trained: the initialization is both the last and the best
            best_params = sync_target(params)
    finally:
        if exp_fh is not None:
            exp_fh.close()

    if out is not None:
        if not math.isfinite(best_score):
            save_checkpoint(out / "best.ckpt", best_params, {"env_steps": env_steps})
        save_checkpoint(out / "last.ckpt", params, {"env_steps": env_steps})
        write_curve(out / "curve.csv", curve)
        write_rewards(out / "rewards.csv", rewards)
    return TrainResult(params, best_params, best_score, env_steps, td_steps, curve, rewards)


def write_curve(path, curve: List[dict]):
    cols = ["step", "loss", "epsilon", "mean_r_tot", "episode", "td_steps", "eval_score"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n", restval="")
        w.writeheader()
        for row in curve:
            w.writerow(row)


def write_rewards(path, rewards: Iterable[float]):
    with open(path, "w") as fh:
        fh.write("step,r_tot\n")
        for i, r in enumerate(rewards):
            fh.write(f"{i},{r!r}\n")


def moving_average(xs: Sequence[float], window: int) -> np.ndarray:
    x = np.asarray(xs, dtype=float)
    if len(x) < window:
        raise ValueError(f"need at least {window} values, got {len(x)}")
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


# trace replay

@dataclass
class _TracePacket:
    created_at: int
    flow: str
    delivered_at: Optional[int] = None
    dropped: bool = False


@dataclass
class TraceSummary:
    packets: Dict[int, _TracePacket]
    ca_decisions: List[tuple]  # (time, waited_before, action)
    end_us: Optional[int] = None

    def dut_packets(self):
        return [p for p in self.packets.values()]


def parse_trace(lines: Iterable[str]) -> TraceSummary:
    """Rebuilds device-under-test packet fates and channel-access decisions
    from trace lines ``time_us,seq,kind,device,detail``."""
    pkts: Dict[int, _TracePacket] = {}
    ca = []
    end_us = None
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        t_s, _seq, kind, dev, detail = line.split(",", 4)
        t = int(t_s)
        toks = detail.split()
        if kind == PACKET_ARRIVAL:
            cur = None
            for tok in toks:
                k, _, v = tok.partition("=")
                if k == "pkt":
                    cur = {"id": int(v)}
                elif cur is not None:
                    cur[k] = v
                    if k == "q":
                        if cur["dut"] == "1":
                            pkts[cur["id"]] = _TracePacket(t, cur["flow"], dropped=(v == "overflow"))
                        cur = None
            continue
        for tok in toks:
            k, _, v = tok.partition("=")
            if k in ("dlv", "drop") and v:
                for pid in map(int, v.split(";")):
                    p = pkts.get(pid)
                    if p is None:
                        continue
                    if k == "dlv" and p.delivered_at is None:
                        p.delivered_at = t
                    elif k == "drop":
                        p.dropped = True
            elif k == "duration" and toks[0] == "end":
                end_us = int(v)
            elif k == "ca":
                waited = int(toks[toks.index(tok) + 1].partition("=")[2])
                ca.append((t, waited, v))
    return TraceSummary(pkts, ca, end_us)


def replay_metrics(lines: Iterable[str], tail_threshold_ms: float = TAIL_THRESHOLD_MS) -> EpisodeMetrics:
    tr = parse_trace(lines)
    return metrics_from_packets(tr.dut_packets(), tail_threshold_ms, tr.end_us)
