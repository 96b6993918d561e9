import csv
import json
import subprocess
import sys

import pytest

from savedrl import cli, config
from savedrl.trainer import read_metrics


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_cfg_file(tiny, tmp_path):
    def make(**kw):
        cfg = tiny(**kw)
        path = tmp_path / f"cfg_{cfg.mode}_{cfg.task_id}_{len(cfg.seeds)}.json"
        path.write_text(cfg.to_json())
        return path

    return make


def test_print_config_roundtrip(capsys, tmp_path):
    code, out, _ = _run(capsys, "print-config", "--profile", "ci", "--task", "3", "--mode", "petsfd")
    assert code == 0
    path = tmp_path / "c.json"
    path.write_text(out)
    code, out2, _ = _run(capsys, "print-config", "--config", str(path))
    assert code == 0 and out2 == out
    assert config.load_config(path).to_dict() == json.loads(out)


def test_repro_defaults_echoed(capsys):
    _, out, _ = _run(capsys, "print-config", "--task", "2", "--alpha", "3", "--beta", "1")
    d = json.loads(out)
    assert d["alpha"] == 3.0 and d["beta"] == 1.0 and d["task_id"] == 2
    assert d["dynamics"]["hidden"] == [500, 500, 500] and d["dynamics"]["n_members"] == 5
    assert d["cem"]["horizon"] == 15 and d["cem"]["population"] == 400 and d["cem"]["n_particles"] == 20
    assert d["value"]["epochs_init"] == 30 and d["value"]["epochs_iter"] == 15
    assert d["dynamics"]["learning_rate"] == 0.00075


def test_petsfd_horizon_default(capsys):
    for task, h in ((1, 25), (2, 30), (3, 30), (4, 35)):
        _, out, _ = _run(capsys, "print-config", "--task", str(task), "--mode", "petsfd")
        assert json.loads(out)["cem"]["horizon"] == h


def test_unknown_keys_all_listed(capsys, tmp_path):
    d = config.profile_config("ci").to_dict()
    d["bogus"] = 1
    d["cem"]["popsize"] = 3
    d["alpha"] = "wide"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    code, _, err = _run(capsys, "print-config", "--config", str(path))
    assert code == 2
    assert err.count("\n") == 1 and err.startswith("error: config:")
    for key in ("bogus", "cem.popsize", "alpha"):
        assert key in err


def test_bad_override_rejected(capsys):
    code, _, err = _run(capsys, "print-config", "--set", "cem.population=many", "--set", "nope=1")
    assert code == 2 and "cem.population" in err and "nope" in err


def test_gen_demos(capsys, tmp_path):
    code, out, _ = _run(capsys, "gen-demos", "--task", "1", "--count", "50", "--out", str(tmp_path / "a"))
    assert code == 0
    mean = float(out.split("mean cost ")[1].split(",")[0])
    assert abs(mean - 73.9) <= 10
    lines = (tmp_path / "a" / "demos_task1.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines[1:]]
    assert len(recs) == 50 and all(r["success"] for r in recs)
    _run(capsys, "gen-demos", "--task", "1", "--count", "50", "--out", str(tmp_path / "b"))
    assert (tmp_path / "a" / "demos_task1.jsonl").read_bytes() == (tmp_path / "b" / "demos_task1.jsonl").read_bytes()


def test_gen_demos_zero_count(capsys, tmp_path):
    code, _, err = _run(capsys, "gen-demos", "--task", "1", "--count", "0", "--out", str(tmp_path))
    assert code == 2 and err.startswith("error: usage:")
    assert not list(tmp_path.iterdir())


def test_usage_errors_are_single_line(capsys):
    code, _, err = _run(capsys, "train", "--task", "9", "--out", "x")
    assert code == 2 and err.count("\n") == 1 and err.startswith("error: usage:")
    code, _, err = _run(capsys, "frobnicate")
    assert code == 2 and err.startswith("error: usage:")


def test_train_eval_and_gate(capsys, tmp_path, tiny_cfg_file):
    cfg_path = tiny_cfg_file(task_id=2, iterations=2, seeds=(0, 1, 2))
    out = tmp_path / "run"
    code, _, err = _run(capsys, "train", "--config", str(cfg_path), "--out", str(out))
    assert code == 0, err
    files = sorted(out.glob("seed_*/metrics.csv"))
    assert len(files) == 3 and all(len(read_metrics(f)) == 2 for f in files)
    assert (out / "aggregate.csv").exists()
    # files only inside --out
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(["run", cfg_path.name])

    code, out_json, _ = _run(capsys, "eval", "--out", str(out), "--episodes", "1")
    assert code == 0
    s = json.loads(out_json)
    assert s["episodes"] == 3
    code, _, err = _run(capsys, "eval", "--out", str(out), "--episodes", "1", "--max-cost", "-1")
    assert code == 4 and err.startswith("error: gate:")

    # a different configuration in the same directory is refused without --force
    code, _, err = _run(capsys, "train", "--config", str(cfg_path), "--out", str(out), "--alpha", "5")
    assert code == 2 and "--force" in err


def test_sweep_rows_and_refusal(capsys, tmp_path, tiny_cfg_file):
    cfg_path = tiny_cfg_file(task_id=2, iterations=1)
    out = tmp_path / "sw"
    code, _, err = _run(capsys, "sweep", "--config", str(cfg_path), "--param", "alpha", "--values", "1,3,10", "--out", str(out))
    assert code == 0, err
    with open(out / "sweep_alpha.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["value"] for r in rows] == ["1", "3", "10"]
    for label, alpha in (("alpha_1", 1.0), ("alpha_3", 3.0), ("alpha_10", 10.0)):
        assert json.loads((out / label / "config.json").read_text())["alpha"] == alpha
    code, _, err = _run(capsys, "sweep", "--config", str(cfg_path), "--param", "alpha", "--values", "1", "--out", str(out))
    assert code == 2 and "--force" in err
    code, _, _ = _run(capsys, "sweep", "--config", str(cfg_path), "--param", "alpha", "--values", "1", "--out", str(out), "--force")
    assert code == 0


def test_sweep_value_mapping():
    assert cli.sweep_override("demo_count", "20")[1] == ["demos.count=20"]
    label, sets = cli.sweep_override("demo_quality", "2")
    assert sets == ["demos.noise_std=0.4", "demos.detour_scale=2.0"]
    with pytest.raises(config.ConfigError):
        cli.sweep_override("demo_count", "2.5")


def test_export_plots(capsys, tmp_path, tiny_cfg_file):
    root = tmp_path / "runs"
    for mode in ("saved", "petsfd"):
        cfg_path = tiny_cfg_file(mode=mode, iterations=2, seeds=(0, 1, 2) if mode == "saved" else (0,))
        assert _run(capsys, "train", "--config", str(cfg_path), "--out", str(root / mode))[0] == 0
    code, _, _ = _run(capsys, "export-plots", "--metrics", str(root), "--out", str(tmp_path / "plots"))
    assert code == 0
    with open(tmp_path / "plots" / "long.csv") as fh:
        long_rows = list(csv.DictReader(fh))
    assert len(long_rows) == (3 + 1) * 2 * len(cli.EXPORT_METRICS)
    with open(tmp_path / "plots" / "summary.csv") as fh:
        summary = {r["mode"]: r for r in csv.DictReader(fh)}
    assert set(summary) == {"saved", "petsfd"}
    raw = [r for f in sorted((root / "saved").glob("seed_*/metrics.csv")) for r in read_metrics(f)]
    assert float(summary["saved"]["success_rate"]) == pytest.approx(sum(r.success for r in raw) / len(raw))
    assert int(summary["saved"]["episodes"]) == 6


def test_export_plots_malformed_row(capsys, tmp_path):
    d = tmp_path / "seed_0"
    d.mkdir()
    (d / "metrics.csv").write_text("iteration,cost,success,violation,wall_time_s\n1,x,0,0,1\n")
    code, _, err = _run(capsys, "export-plots", "--metrics", str(tmp_path), "--out", str(tmp_path / "o"))
    assert code == 3 and "metrics.csv:2" in err


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "savedrl", "print-config", "--profile", "ci"], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["profile"] == "ci"
