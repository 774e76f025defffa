import json
import subprocess
import sys

import pytest

from gcq.cli import main

TINY = ["--set", "schedule.warmup_steps=50", "--set", "schedule.total_steps=200",
        "--set", "schedule.batch_size=8", "--set", "schedule.episode_horizon=100",
        "--set", "schedule.checkpoint_every=100"]


def test_describe(capsys):
    assert main(["describe"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1] == "total 5091"
    assert any(line.startswith("gcn.W") and "32x32" in line for line in out)


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seeds", "3"]) == 0
    assert capsys.readouterr().out.rstrip().endswith("ok")


def test_bad_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", "random", "--out", "x", "--inflows", "a,b"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2


def test_error_line_format(tmp_path, capsys):
    assert main(["describe", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FileNotFoundError: ")
    bad = tmp_path / "bad.cfg"
    bad.write_text("schedule.no_such_key = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert capsys.readouterr().err.startswith("error: ConfigError: unknown config keys")


def test_train_then_eval_then_describe(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--out", str(out), "--seed", "2", *TINY]) == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    ckpt = info["final_checkpoint"]
    assert (out / "metrics.jsonl").exists() and (out / "checkpoints" / "step_100.ckpt").exists()

    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", ckpt, "--inflows", "0.1,0.3", "--episodes", "2",
                 "--baselines", "rule_based,random", "--out", str(ev)]) == 0
    report = json.loads((ev / "eval_report.json").read_text())
    assert {(c["policy"], c["hdv_inflow"]) for c in report["cells"]} == {
        (p, q) for p in ("gcq", "rule_based", "random") for q in (0.1, 0.3)}
    assert len(report["episodes"]) == 12
    capsys.readouterr()
    assert main(["describe", "--checkpoint", ckpt]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "total 5091"


def test_rollout_outputs(tmp_path, capsys):
    assert main(["rollout", "--policy", "rule_based", "--steps", "30", "--dump-obs",
                 "--inflow", "0.3", "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    rows = (tmp_path / "trajectories.csv").read_text().splitlines()
    assert len(rows) > 1
    obs = [json.loads(x) for x in (tmp_path / "observations.jsonl").read_text().splitlines()]
    assert len(obs) == summary["steps"] and obs[0]["step"] == 0
    assert (tmp_path / "events.jsonl").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gcq", "describe"], capture_output=True, text=True)
    assert proc.returncode == 0 and "total 5091" in proc.stdout
