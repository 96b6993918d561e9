import csv
import json
import shutil

import numpy as np
import pytest

from savedrl import envs, nn, trainer
from savedrl.trainer import MetricsRow


def _rows(path):
    return trainer.read_metrics(path)


def test_metrics_row_invariants():
    MetricsRow(1, 60, False, True, 0.1).check(60)
    MetricsRow(2, 28, True, False, 0.1).check(60)
    with pytest.raises(AssertionError):
        MetricsRow(3, 12, False, True, 0.1).check(60)
    with pytest.raises(AssertionError):
        MetricsRow(4, 60, True, True, 0.1).check(60)


def test_violating_episode_row():
    spec = envs.default_task(2)
    traj = envs.rollout_episode(spec, lambda x, t: np.array([1.0, 0.0]), np.random.default_rng(0))
    row = trainer.trajectory_row(traj, 7)
    assert (row.cost, row.success, row.violation) == (spec.T, False, True)
    row.check(spec.T)


def test_successful_episode_row():
    spec = envs.default_task(1)
    states = np.zeros((spec.T + 1, 4))
    states[:28, 0] = -10.0
    row = trainer.trajectory_row(envs.make_trajectory(spec, states, np.zeros((spec.T, 2))), 1)
    assert row.cost == 28 and row.success


def test_initialize_run_accounting(tiny):
    cfg = tiny()
    demos = trainer.obtain_demos(cfg, cfg.task_spec, 0)
    state = trainer.initialize_run(cfg, demos, 0)
    assert len(state.buffer) == sum(len(t) for t in demos.trajectories) == state.demo_transitions
    assert len(state.safeset) == sum(len(t.states) for t in demos.trajectories)
    assert state.safeset.density_positive(np.array(cfg.task_spec.start))
    assert state.value is not None and state.clone is None


def test_training_accounting_and_safe_set(tiny):
    cfg = tiny(iterations=4)
    demos = trainer.obtain_demos(cfg, cfg.task_spec, 0)
    state = trainer.initialize_run(cfg, demos, 0)
    for _ in range(cfg.n_iterations):
        before = len(state.safeset)
        row = trainer.training_iteration(state)
        row.check(cfg.task_spec.T)
        assert row.violation is False  # task 1 has no obstacles
        assert len(state.buffer) == state.demo_transitions + sum(state.episode_lengths)
        assert row.diagnostics["buffer_size"] == len(state.buffer)
        grew = len(state.safeset) > before
        assert grew == row.success
    # every stored state came from a demo or a successful episode
    assert set(np.unique(state.safeset.tags)) <= {0} | {i for i in range(1, 5)}


def test_controller_error_recorded_as_failure(tiny, monkeypatch):
    cfg = tiny()
    state = trainer.initialize_run(cfg, trainer.obtain_demos(cfg, cfg.task_spec, 0), 0)

    def boom(*a, **k):
        raise RuntimeError("planner exploded")

    monkeypatch.setattr("savedrl.controller.plan", boom)
    row = trainer.training_iteration(state)
    assert row.cost == cfg.task_spec.T and not row.success and not row.violation
    assert "planner exploded" in row.diagnostics["controller_error"]


def test_clone_mode_trains_policy(tiny):
    cfg = tiny(mode="clone", iterations=1)
    state = trainer.initialize_run(cfg, trainer.obtain_demos(cfg, cfg.task_spec, 0), 0)
    assert state.clone is not None and state.dynamics is None
    trainer.training_iteration(state).check(cfg.task_spec.T)


def test_run_experiment_files_and_aggregate(tiny, tmp_path):
    cfg = tiny(iterations=2, seeds=(0, 1, 2))
    out = trainer.run_experiment(cfg, tmp_path)
    assert len(out["metrics"]) == 3
    per_seed = [_rows(p) for p in out["metrics"]]
    assert all(len(r) == 2 for r in per_seed)
    with open(out["aggregate"]) as fh:
        agg = list(csv.DictReader(fh))
    assert list(agg[0]) == trainer.AGGREGATE_HEADER
    for k, rec in enumerate(agg):
        succ = [r[k].success for r in per_seed]
        costs = [r[k].cost for r in per_seed]
        assert float(rec["success_rate"]) == pytest.approx(sum(succ) / 3)
        assert float(rec["mean_cost"]) == pytest.approx(np.mean(costs))
        assert float(rec["std_cost"]) == pytest.approx(np.std(costs))
    seed_dir = tmp_path / "seed_0"
    assert (seed_dir / "demos.jsonl").exists()
    assert json.loads((seed_dir / "manifest.json").read_text())["iteration"] == 2
    assert len((seed_dir / "diagnostics.jsonl").read_text().splitlines()) == 2
    with open(seed_dir / "metrics.csv") as fh:
        assert next(csv.reader(fh)) == trainer.METRICS_HEADER


def test_resume_reproduces_uninterrupted_run(tiny, tmp_path):
    cfg = tiny(iterations=5)
    full = trainer.run_seed(cfg, 0, tmp_path / "full")
    trainer.run_seed(cfg, 0, tmp_path / "part", stop_after=3)
    # iteration 3 is not a checkpoint boundary; the resumed run restarts from iteration 2
    resumed = trainer.run_seed(cfg, 0, tmp_path / "part")
    a, b = _rows(full), _rows(resumed)
    assert [(r.iteration, r.cost, r.success, r.violation) for r in a] == [(r.iteration, r.cost, r.success, r.violation) for r in b]
    assert len(b) == 5
    # the learned models agree bit for bit, not just the coarse metrics
    sa = trainer.load_run_state(cfg, tmp_path / "full" / "seed_0")
    sb = trainer.load_run_state(cfg, tmp_path / "part" / "seed_0")
    assert sa.iteration == sb.iteration == 5
    for x, y in zip(sa.dynamics.params.arrays() + sa.value.params.arrays(), sb.dynamics.params.arrays() + sb.value.params.arrays()):
        assert np.array_equal(x, y)
    assert np.array_equal(sa.buffer.states, sb.buffer.states)


def test_corrupt_checkpoint_is_reported(tiny, tmp_path):
    cfg = tiny(iterations=2)
    trainer.run_seed(cfg, 0, tmp_path)
    ckpt = trainer.latest_checkpoint(tmp_path / "seed_0")
    (ckpt / "dynamics.zip").write_bytes(b"garbage")
    with pytest.raises(nn.CheckpointError, match="corrupt"):
        trainer.load_run_state(cfg, tmp_path / "seed_0")


def test_checkpoint_rejects_other_config(tiny, tmp_path):
    cfg = tiny(iterations=2)
    trainer.run_seed(cfg, 0, tmp_path)
    other = tiny(iterations=2)
    other.alpha = 5.0
    with pytest.raises(nn.CheckpointError, match="different configuration"):
        trainer.load_run_state(other, tmp_path / "seed_0")


def test_read_metrics_reports_line(tmp_path):
    p = tmp_path / "metrics.csv"
    p.write_text("iteration,cost,success,violation,wall_time_s\n1,60,0,0,0.1\n2,sixty,0,0,0.1\n")
    with pytest.raises(ValueError, match=r"metrics.csv:3"):
        trainer.read_metrics(p)


def test_evaluate_does_not_touch_models(tiny):
    cfg = tiny()
    state = trainer.initialize_run(cfg, trainer.obtain_demos(cfg, cfg.task_spec, 0), 0)
    n = len(state.buffer)
    rows = trainer.evaluate(state, 2)
    assert len(rows) == 2 and len(state.buffer) == n
    for r in rows:
        r.check(cfg.task_spec.T)
