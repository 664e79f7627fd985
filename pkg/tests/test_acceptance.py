"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

Criterion 10 trains a policy from scratch and evaluates it over 20 seeds
in two scenarios, so this module takes several minutes on one core.
"""
import io
import math
import time

import numpy as np
import pytest

from aimac.agents import CA, RC, DeviceAgent, Upload
from aimac.cli import main
from aimac.env import (AIMAC, BASELINE, EULER_GAMMA, build_scenario, clean_scenario,
                       gaming_profile, sample_gumbel, saturated_scenario)
from aimac.harness import (compute_metrics, evaluate, moving_average, parse_trace, run_episode,
                           train)
from aimac.kernel import SECOND_US, RngStream
from aimac.qmix import CA_OBS_DIM, RC_OBS_DIM, STACK, STATE_DIM, TrainConfig, init_params, mix
from aimac.qos import jain_index
from oracles import fd_max_rel_error, metrics_oracle, r_tot_oracle, random_batch

EPISODE = 15 * SECOND_US
N_SEEDS = 20


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def test_c01_determinism_and_speed(tmp_path, report):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        rc = main(["eval", "--scenario", "home", "--policy", "baseline", "--seeds", "2", "--seed", "7",
                   "--duration", "15", "--out", str(out), "--trace"])
        assert rc == 0
        outs.append(out)
    names = ["report.csv", "report.json", "trace_seed7.csv", "trace_seed8.csv"]
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in names)
    t0 = time.perf_counter()
    run_episode(build_scenario("home", 7), BASELINE, None, 7, EPISODE)
    wall = time.perf_counter() - t0
    ok = report(1, same and wall < 60.0, f"byte-identical={same}, home 15 s episode took {wall:.2f} s")
    assert ok


def test_c02_metric_oracle(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        delays = rng.exponential(rng.uniform(1.0, 40.0), size=n).tolist()
        generated = n + int(rng.integers(0, 50))
        m = compute_metrics(delays, generated)
        ref = metrics_oracle(delays, generated)
        for a, b in zip((m.latency_ms, m.jitter_ms, m.loss_rate, m.tail_prob), ref):
            if a != b:
                worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    ok = report(2, worst <= 1e-9, f"max relative error {worst:.3g} over 1000 delay sets")
    assert ok


def test_c03_conservation(report):
    cases = [(build_scenario(k, s), BASELINE, None) for k in ("home", "office", "mall") for s in (1, 2)]
    cases += [(clean_scenario(3), BASELINE, None), (saturated_scenario(4, 3), BASELINE, None)]
    cases += [(build_scenario(k, 4), AIMAC, init_params(s)) for k in ("home", "office") for s in (1, 2)]
    bad = []
    for cfg, pol, params in cases:
        _, r = run_episode(cfg, pol, params, cfg.seed, 2 * SECOND_US)
        if r.generated != r.delivered + r.dropped + r.residual_queued:
            bad.append((cfg.kind, cfg.seed, r.generated, r.delivered, r.dropped, r.residual_queued))
    ok = report(3, not bad, f"{len(cases)} episodes, violations: {bad}")
    assert ok


def test_c04_clean_channel(report):
    rep = evaluate("clean", BASELINE, n_seeds=N_SEEDS, duration=EPISODE)
    lat, loss = rep.values("latency_ms"), rep.values("loss_rate")
    ok = report(4, max(lat) < 2.0 and max(loss) == 0.0,
                f"latency max {max(lat):.4f} ms, mean {rep.mean('latency_ms'):.4f} ms; loss max {max(loss)}")
    assert ok


def test_c05_saturated_fairness(report):
    jains = []
    for seed in range(1, N_SEEDS + 1):
        cfg = saturated_scenario(4, seed)
        _, r = run_episode(cfg, BASELINE, None, seed, EPISODE)
        jains.append(jain_index([r.counters[i].delivered_airtime_us for i in range(1, 5)]))
    ok = report(5, min(jains) >= 0.95, f"Jain index min {min(jains):.4f} over {N_SEEDS} seeds")
    assert ok


def test_c06_gumbel_traffic(report):
    prof = gaming_profile()
    details, ok = [], True
    for name, mu, beta in (("size", prof.size_mu, prof.size_beta),
                           ("interval", prof.interval_mu, prof.interval_beta)):
        s = RngStream(6, f"accept/{name}")
        xs = np.array([sample_gumbel(mu, beta, s) for _ in range(1_000_000)])
        mean_ref = mu + EULER_GAMMA * beta
        med_ref = mu - beta * math.log(math.log(2.0))
        e_mean = abs(xs.mean() - mean_ref) / mean_ref
        e_med = abs(np.median(xs) - med_ref) / med_ref
        ok &= e_mean <= 0.01 and e_med <= 0.01
        details.append(f"{name} mean err {e_mean:.2e} median err {e_med:.2e}")
    size_mean, interval_mean = prof.mean_bytes(), prof.mean_interval_ms()
    envelope = 30 <= size_mean <= 150 and 10 <= interval_mean <= 30
    ok = report(6, ok and envelope, "; ".join(details)
                + f"; gaming mean {size_mean:.1f} B every {interval_mean:.2f} ms")
    assert ok


def test_c07_reward_assembly(report):
    checked, worst = 0, 0.0
    for kind, seed in (("home", 1), ("office", 2), ("mall", 3), ("office", 4)):
        cfg = build_scenario(kind, seed, policy=AIMAC)
        _, r = run_episode(cfg, AIMAC, init_params(seed), seed, 2 * SECOND_US,
                           epsilon_fn=lambda k: 0.5, collect=True)
        for e in r.controller.experiences:
            ref = r_tot_oracle(e.r_state, e.gamma, e.t, e.t_ca, e.r_ca, e.t_rc, e.r_rc)
            if e.r_tot != ref:
                worst = max(worst, abs(e.r_tot - ref) / max(abs(ref), 1e-300))
            checked += 1
    # all uploads at the experience time: plain sum
    da = DeviceAgent(lambda t: (np.zeros(STATE_DIM), 0.3), gamma=0.9)
    vec_ca, vec_rc = np.zeros(CA_OBS_DIM * STACK), np.zeros(RC_OBS_DIM * STACK)
    da.ingest(Upload(CA, 50, vec_ca, 0, 0.0))
    da.ingest(Upload(RC, 100, vec_rc, 0, 0.7))
    e = da.ingest(Upload(CA, 100, vec_ca, 1, -0.2))
    plain = math.isclose(e.r_tot, 0.3 + 0.7 - 0.2, rel_tol=1e-12)
    ok = report(7, checked > 0 and worst <= 1e-12 and plain,
                f"{checked} experiences, max relative error {worst:.3g}; same-time case plain sum={plain}")
    assert ok


def test_c08_mixer_monotonicity(report):
    rng = np.random.default_rng(8)
    worst = math.inf
    h = 1e-6
    for k in range(1000):
        p = init_params(k)
        for name in p:
            if name.startswith("mix."):
                p[name] = p[name] + rng.normal(scale=0.5, size=p[name].shape)
        s = rng.normal(size=STATE_DIM)
        q = rng.normal(scale=3.0, size=2)
        for i in range(2):
            up, dn = q.copy(), q.copy()
            up[i] += h
            dn[i] -= h
            worst = min(worst, (mix(up, s, p) - mix(dn, s, p)) / (2 * h))
    ok = report(8, worst >= -1e-9, f"min dQ_tot/dq_i {worst:.3g} over 1000 draws")
    assert ok


def test_c09_gradient_check(report):
    rng = np.random.default_rng(9)
    worst = {}
    for k in range(10):
        p = init_params(100 + k)
        b = random_batch(rng, p, n=64)
        for name, err in fd_max_rel_error(p, b).items():
            worst[name] = max(worst.get(name, 0.0), err)
    top = max(worst.values())
    ok = report(9, top <= 1e-4, f"max relative error {top:.3g} over 10 batches, {len(worst)} parameter groups")
    assert ok


def _means(rep):
    return {k: rep.mean(k) for k in ("latency_ms", "jitter_ms", "loss_rate", "tail_prob")}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = TrainConfig(env_steps=100_000, episode_seconds=5.0)
    t0 = time.perf_counter()
    res = train("office", cfg, out_dir=tmp_path_factory.mktemp("run"))
    return res, time.perf_counter() - t0


def test_c10_learning_beats_baseline(trained, report):
    res, train_wall = trained
    params = res.best_params
    office = {pol: _means(evaluate("office", pol, params if pol == AIMAC else None,
                                   n_seeds=N_SEEDS, duration=EPISODE)) for pol in (BASELINE, AIMAC)}
    home = {pol: _means(evaluate("home", pol, params if pol == AIMAC else None,
                                 n_seeds=N_SEEDS, duration=EPISODE)) for pol in (BASELINE, AIMAC)}
    b, a = office[BASELINE], office[AIMAC]
    office_ok = (a["latency_ms"] < b["latency_ms"] and a["tail_prob"] < b["tail_prob"]
                 and a["jitter_ms"] <= 1.1 * b["jitter_ms"])
    home_ok = all(home[AIMAC][k] <= 1.1 * home[BASELINE][k] for k in home[BASELINE])
    fmt = lambda d: ", ".join(f"{k}={v:.4g}" for k, v in d.items())
    detail = (f"{res.env_steps} env steps in {train_wall:.0f} s | office baseline [{fmt(b)}] aimac [{fmt(a)}]"
              f" | home baseline [{fmt(home[BASELINE])}] aimac [{fmt(home[AIMAC])}]")
    ok = report(10, res.env_steps <= 200_000 and office_ok and home_ok, detail)
    assert ok


def test_c11_waited_slots_replay(report):
    rng = np.random.default_rng(11)
    kinds = ("clean", "home", "office", "mall")
    decisions, bad = 0, []
    for ep in range(100):
        kind = kinds[ep % len(kinds)]
        seed = int(rng.integers(1, 10**6))
        cfg = clean_scenario(seed) if kind == "clean" else build_scenario(kind, seed)
        eps = float(rng.uniform(0.0, 1.0))
        buf = io.StringIO()
        run_episode(cfg, AIMAC, init_params(seed), seed, SECOND_US // 5, trace=buf,
                    epsilon_fn=lambda k, e=eps: e)
        run = 0
        for t, waited, action in parse_trace(io.StringIO(buf.getvalue())).ca_decisions:
            decisions += 1
            if waited != run:
                bad.append((ep, t, waited, run))
            run = 0 if action == "transmit" else run + 1
    ok = report(11, decisions > 0 and not bad, f"{decisions} decisions over 100 episodes, mismatches: {bad[:5]}")
    assert ok


def test_training_raises_mean_reward(trained):
    res, _ = trained
    avg = moving_average(res.rewards, 1000)
    assert avg[-1] > avg[0]
