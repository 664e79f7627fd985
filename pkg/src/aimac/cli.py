"""Command-line entry point: ``aimac {scenario gen,train,eval,replay}``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .env import AIMAC, BASELINE, SCENARIO_KINDS, ConfigError, build_scenario, clean_scenario
from .harness import evaluate, replay_metrics, train
from .kernel import SECOND_US
from .qmix import TrainConfig, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this surface reserves 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aimac", description="AI-assisted Wi-Fi MAC simulator and learner")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    sc = sub.add_parser("scenario", help="scenario files")
    scs = sc.add_subparsers(dest="scmd", parser_class=_Parser)
    gen = scs.add_parser("gen", help="write a scenario config file")
    gen.add_argument("kind", choices=list(SCENARIO_KINDS) + ["clean"])
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--out", default=".")

    tr = sub.add_parser("train", help="train the learned policy")
    tr.add_argument("--scenario", default="office", help="scenario kind or config file")
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--steps", type=int, default=TrainConfig.env_steps, help="environment steps")
    tr.add_argument("--duration", type=float, default=5.0, help="seconds per training episode")
    tr.add_argument("--optimizer", choices=("sgd", "adam"), default=TrainConfig.optimizer)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--eval-seeds", type=int, default=TrainConfig.eval_seeds,
                    help="seeds per checkpoint-selection evaluation")
    tr.add_argument("--eval-seconds", type=float, default=TrainConfig.eval_seconds)
    tr.add_argument("--quiet", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a policy over several seeds")
    ev.add_argument("--scenario", default="office", help="scenario kind or config file")
    ev.add_argument("--policy", choices=(BASELINE, AIMAC), default=None)
    ev.add_argument("--checkpoint")
    ev.add_argument("--seeds", type=int, default=20)
    ev.add_argument("--seed", type=int, default=1, help="first seed")
    ev.add_argument("--duration", type=float, default=15.0, help="seconds per episode")
    ev.add_argument("--out", default=".")
    ev.add_argument("--trace", action="store_true", help="write one event trace per seed")

    rp = sub.add_parser("replay", help="recompute metrics from an event trace")
    rp.add_argument("trace")
    rp.add_argument("--out", default=None, help="write the metrics JSON here")
    return p


def _scenario_gen(a) -> int:
    cfg = clean_scenario(a.seed) if a.kind == "clean" else build_scenario(a.kind, a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{a.kind}_seed{a.seed}.json"
    cfg.save(path)
    print(path)
    return EXIT_OK


def _train(a) -> int:
    kw = dict(env_steps=a.steps, seed=a.seed, optimizer=a.optimizer, episode_seconds=a.duration,
              eval_seeds=a.eval_seeds, eval_seconds=a.eval_seconds)
    if a.lr is not None:
        kw["lr"] = a.lr
    cfg = TrainConfig(**kw)
    res = train(a.scenario, cfg, out_dir=a.out, log=None if a.quiet else print)
    print(f"trained {res.env_steps} env steps, {res.td_steps} td steps; best score {res.best_score:.4g}")
    print(Path(a.out) / "best.ckpt")
    return EXIT_OK


def _eval(a) -> int:
    policy = a.policy or (AIMAC if a.checkpoint else BASELINE)
    params = None
    if policy == AIMAC:
        if not a.checkpoint:
            raise UsageError("aimac eval: error: --policy aimac needs --checkpoint")
        params = load_checkpoint(a.checkpoint)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = evaluate(a.scenario, policy, params, n_seeds=a.seeds,
                   duration=int(round(a.duration * SECOND_US)), first_seed=a.seed,
                   trace_dir=out if a.trace else None)
    rep.write_csv(out / "report.csv")
    rep.write_json(out / "report.json")
    s = rep.summary()
    for k in s["mean"]:
        print(f"{k:12s} mean {s['mean'][k]:.6g}  std {s['std'][k]:.6g}")
    return EXIT_OK


def _replay(a) -> int:
    with open(a.trace) as fh:
        m = replay_metrics(fh)
    text = json.dumps(asdict(m), indent=2, sort_keys=True)
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
        if a.cmd is None or (a.cmd == "scenario" and a.scmd is None):
            raise UsageError(parser.format_usage() + "aimac: error: a subcommand is required")
        handler = {"scenario": _scenario_gen, "train": _train, "eval": _eval, "replay": _replay}[a.cmd]
        return handler(a)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, OSError, ValueError, RuntimeError) as e:
        print(f"aimac: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
