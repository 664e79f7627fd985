import json

import pytest

from aimac.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


def test_scenario_gen_is_deterministic(tmp_path, capsys):
    assert main(["scenario", "gen", "home", "--seed", "7", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["scenario", "gen", "home", "--seed", "7", "--out", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "home_seed7.json").read_bytes()
    assert a == (tmp_path / "b" / "home_seed7.json").read_bytes()
    assert json.loads(a)["kind"] == "home"


def test_eval_writes_reports(tmp_path):
    out = tmp_path / "ev"
    rc = main(["eval", "--scenario", "home", "--policy", "baseline", "--seeds", "2",
               "--duration", "0.5", "--out", str(out), "--trace"])
    assert rc == EXIT_OK
    assert (out / "report.csv").exists() and (out / "report.json").exists()
    assert (out / "trace_seed1.csv").exists() and (out / "trace_seed2.csv").exists()


def test_eval_from_config_file_and_replay(tmp_path, capsys):
    main(["scenario", "gen", "office", "--seed", "3", "--out", str(tmp_path)])
    cfg = tmp_path / "office_seed3.json"
    assert main(["eval", "--scenario", str(cfg), "--seeds", "1", "--seed", "3", "--duration", "0.5",
                 "--out", str(tmp_path), "--trace"]) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    capsys.readouterr()
    assert main(["replay", str(tmp_path / "trace_seed3.csv"), "--out", str(tmp_path / "m.json")]) == EXIT_OK
    replayed = json.loads((tmp_path / "m.json").read_text())
    assert replayed["latency_ms"] == report["per_seed"][0]["latency_ms"]


@pytest.mark.parametrize("argv", [
    ["eval", "--bogus"],
    [],
    ["scenario"],
    ["scenario", "gen", "stadium"],
    ["eval", "--policy", "aimac"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["eval", "--scenario", str(tmp_path / "missing.json"), "--seeds", "1"]) == EXIT_RUNTIME
    assert main(["replay", str(tmp_path / "missing.csv")]) == EXIT_RUNTIME


def test_train_then_eval_pipeline(tmp_path):
    run = tmp_path / "run1"
    assert main(["train", "--scenario", "home", "--out", str(run), "--steps", "300",
                 "--duration", "0.25", "--eval-seeds", "1", "--eval-seconds", "0.2", "--quiet"]) == EXIT_OK
    assert (run / "best.ckpt").exists() and (run / "curve.csv").exists()
    out = tmp_path / "ev"
    assert main(["eval", "--scenario", "home", "--checkpoint", str(run / "best.ckpt"), "--seeds", "1",
                 "--duration", "0.5", "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "report.json").read_text())["policy"] == "aimac"
