"""The training loop: seed models from demos, then alternate episodes and refits.

Every random draw inside iteration ``i`` of seed ``s`` comes from streams keyed
by ``(s, i, ...)``, so a run resumed from a checkpoint at iteration ``k``
reproduces iterations ``k+1, ...`` of an uninterrupted run exactly.

Per-seed output directory layout::

    seed_<s>/demos.jsonl
    seed_<s>/metrics.csv          iteration,cost,success,violation,wall_time_s
    seed_<s>/diagnostics.jsonl    one JSON object per iteration
    seed_<s>/manifest.json        config hash, seed, last completed iteration
    seed_<s>/checkpoints/iter_<k>/{dynamics.zip,value.zip,safeset.npz,buffer.npz,clone.npz,manifest.json}
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import ConfigError, RunConfig
from .controller import CloneController, ClonePolicy, MPCController, Models, clone_train
from .demos import DemoParams, DemoSet, generate_demos, load_demos, save_demos
from .envs import ControllerError, TaskSpec, Trajectory, rollout_episode
from .models import (
    DynamicsEnsemble,
    ReplayBuffer,
    ValueEnsemble,
    fit_dynamics,
    fit_value_from_demos,
    fit_value_td1,
    load_ensemble,
    save_ensemble,
)
from .safeset import SafeSetStore

log = logging.getLogger(__name__)

METRICS_HEADER = ["iteration", "cost", "success", "violation", "wall_time_s"]
AGGREGATE_HEADER = ["iteration", "mean_cost", "std_cost", "success_rate", "violation_rate"]
EVAL_OFFSET = 1_000_000  # eval episodes draw from streams disjoint from training


class RunError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    iteration: int
    cost: int
    success: bool
    violation: bool
    wall_time_s: float
    diagnostics: dict = field(default_factory=dict)

    def check(self, T: int) -> None:
        if self.violation and self.cost != T:
            raise AssertionError(f"iteration {self.iteration}: violation with cost {self.cost} != {T}")
        if self.success and self.violation:
            raise AssertionError(f"iteration {self.iteration}: success and violation both set")
        if not 0 <= self.cost <= T:
            raise AssertionError(f"iteration {self.iteration}: cost {self.cost} outside [0, {T}]")

    def csv_row(self) -> list:
        return [self.iteration, self.cost, int(self.success), int(self.violation), f"{self.wall_time_s:.3f}"]


@dataclass
class RunState:
    config: RunConfig
    spec: TaskSpec
    seed: int
    demos: DemoSet
    buffer: ReplayBuffer
    dynamics: DynamicsEnsemble | None = None
    value: ValueEnsemble | None = None
    safeset: SafeSetStore | None = None
    clone: ClonePolicy | None = None
    iteration: int = 0
    demo_transitions: int = 0
    episode_lengths: list = field(default_factory=list)

    @property
    def uses_value(self) -> bool:
        return self.config.mode in ("saved", "saved_no_ss")

    def controller(self, verbose: bool = False):
        if self.config.mode == "clone":
            return CloneController(self.clone)
        models = Models(self.dynamics, self.value if self.uses_value else None, self.safeset)
        return MPCController(self.config.cem_config(), models, self.spec, seed=self.seed, verbose=verbose)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def obtain_demos(cfg: RunConfig, spec: TaskSpec, seed: int) -> DemoSet:
    """Load ``cfg.demos.path`` or generate demos for this seed."""
    if cfg.demos.path:
        demos = load_demos(cfg.demos.path, spec, strict=True)
        if cfg.demos.count is not None:
            demos.trajectories = demos.trajectories[: cfg.demos.count]
        return demos
    params = DemoParams.for_task(spec, detour_scale=cfg.demos.detour_scale, noise_std=cfg.demos.noise_std)
    return generate_demos(spec, cfg.demo_count, params, seed=cfg.demos.seed + seed)


def initialize_run(cfg: RunConfig, demos: DemoSet, seed: int) -> RunState:
    """Fill the buffer and safe set with the demos and fit the models to them."""
    spec = cfg.task_spec
    for i, t in enumerate(demos.trajectories):
        if t.states.shape[1:] != (4,) or t.controls.shape[1:] != (2,):
            raise ConfigError(f"demo {i}: expected 4-d states and 2-d controls")
    rng = _rng(seed, 0)
    buffer = ReplayBuffer(capacity=cfg.buffer_capacity)
    for t in demos.trajectories:
        buffer.add_trajectory(spec, t)
    state = RunState(cfg, spec, seed, demos, buffer, demo_transitions=len(buffer))
    if cfg.mode == "clone":
        c = cfg.clone
        state.clone = clone_train(demos, c.hidden, c.epochs, rng, c.learning_rate, c.batch_size, spec.u_max)
        return state
    d = cfg.dynamics
    state.dynamics = DynamicsEnsemble(4, 2, d.hidden, d.n_members, rng)
    fit_dynamics(state.dynamics, buffer, d.epochs_init, rng, d.learning_rate, d.batch_size)
    if state.uses_value:
        v = cfg.value
        state.value = ValueEnsemble(4, v.hidden, v.n_members, spec.T, rng, v.loss)
        fit_value_from_demos(state.value, demos, v.epochs_init, rng, v.learning_rate, v.batch_size)
    state.safeset = SafeSetStore(cfg.alpha, cfg.safeset_buffer_size, cfg.position_only)
    for t in demos.trajectories:
        state.safeset.add_successful_trajectory(t, 0)
    return state


def run_episode(state: RunState, episode: int, rng: np.random.Generator, verbose: bool = False):
    ctl = state.controller(verbose)
    ctl.reset(episode)
    try:
        traj = rollout_episode(state.spec, ctl, rng)
        error = None
    except ControllerError as e:
        log.warning("%s", e)
        traj, error = None, str(e)
    history = getattr(ctl, "history", [])
    diag = {
        "fallback_steps": int(sum(h["fallback"] for h in history)),
        "mean_feasible": float(np.mean([h["feasible_count"] for h in history])) if history else None,
        "chance_rejections": int(sum(h["chance_rejections"] for h in history)),
        "density_rejections": int(sum(h["density_rejections"] for h in history)),
    }
    if error:
        diag["controller_error"] = error
    return traj, diag


def training_iteration(state: RunState, verbose: bool = False) -> MetricsRow:
    """One episode with the current models, then buffer, safe set and model updates."""
    cfg = state.config
    i = state.iteration + 1
    t0 = time.perf_counter()
    traj, diag = run_episode(state, i, _rng(state.seed, i, 1), verbose)
    T = state.spec.T
    if traj is None:
        row = MetricsRow(i, T, False, False, 0.0, diag)
    else:
        if cfg.mode != "clone":
            state.buffer.add_trajectory(state.spec, traj)
            state.episode_lengths.append(len(traj))
            if traj.success:
                state.safeset.add_successful_trajectory(traj, i)
            rng = _rng(state.seed, i, 2)
            d = cfg.dynamics
            fit_dynamics(state.dynamics, state.buffer, d.epochs_iter, rng, d.learning_rate, d.batch_size)
            if state.uses_value:
                v = cfg.value
                fit_value_td1(state.value, state.buffer, v.epochs_iter, rng, v.learning_rate, v.batch_size)
        diag["episode_length"] = len(traj)
        row = MetricsRow(i, traj.iteration_cost, bool(traj.success), bool(traj.violation), 0.0, diag)
    diag["buffer_size"] = len(state.buffer)
    diag["safeset_size"] = len(state.safeset) if state.safeset is not None else 0
    row.wall_time_s = time.perf_counter() - t0
    row.check(T)
    state.iteration = i
    return row


def evaluate(state: RunState, episodes: int) -> list[MetricsRow]:
    """Exploration-free evaluation episodes; models are not updated."""
    rows = []
    for k in range(episodes):
        t0 = time.perf_counter()
        traj, diag = run_episode(state, EVAL_OFFSET + k, _rng(state.seed, EVAL_OFFSET + k, 1))
        T = state.spec.T
        if traj is None:
            row = MetricsRow(k + 1, T, False, False, 0.0, diag)
        else:
            row = MetricsRow(k + 1, traj.iteration_cost, bool(traj.success), bool(traj.violation), 0.0, diag)
        row.wall_time_s = time.perf_counter() - t0
        row.check(T)
        rows.append(row)
    return rows


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(state: RunState, directory) -> Path:
    """Write the full run state; the manifest is written last and marks completeness."""
    path = Path(directory)
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    if state.dynamics is not None:
        save_ensemble(state.dynamics, path / "dynamics.zip")
    if state.value is not None:
        save_ensemble(state.value, path / "value.zip")
    if state.safeset is not None:
        state.safeset.save(path / "safeset.npz")
    np.savez(path / "buffer.npz", **state.buffer.state_dict())
    if state.clone is not None:
        np.savez(
            path / "clone.npz",
            params=np.frombuffer(nn.mlp_to_bytes(state.clone.params), dtype=np.uint8),
            in_mean=state.clone.in_mean,
            in_std=state.clone.in_std,
            u_max=state.clone.u_max,
        )
    manifest = {
        "config_hash": state.config.config_hash(),
        "seed": state.seed,
        "iteration": state.iteration,
        "mode": state.config.mode,
        "demo_transitions": state.demo_transitions,
        "episode_lengths": state.episode_lengths,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(cfg: RunConfig, demos: DemoSet, directory) -> RunState:
    path = Path(directory)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise nn.CheckpointError(f"corrupt checkpoint {path}: unreadable manifest ({e})") from None
    if manifest.get("config_hash") != cfg.config_hash():
        raise nn.CheckpointError(f"checkpoint {path} was written by a different configuration")
    try:
        with np.load(path / "buffer.npz") as d:
            buffer = ReplayBuffer.from_state_dict(dict(d))
        state = RunState(
            cfg, cfg.task_spec, int(manifest["seed"]), demos, buffer,
            iteration=int(manifest["iteration"]),
            demo_transitions=int(manifest["demo_transitions"]),
            episode_lengths=list(manifest["episode_lengths"]),
        )
        if (path / "dynamics.zip").exists():
            state.dynamics = load_ensemble(path / "dynamics.zip")
        if (path / "value.zip").exists():
            state.value = load_ensemble(path / "value.zip")
        if (path / "safeset.npz").exists():
            state.safeset = SafeSetStore.load(path / "safeset.npz")
        if (path / "clone.npz").exists():
            with np.load(path / "clone.npz") as d:
                params = nn.mlp_from_bytes(d["params"].tobytes())
                state.clone = ClonePolicy(params, d["in_mean"], d["in_std"], float(d["u_max"]))
    except (OSError, ValueError, KeyError) as e:
        raise nn.CheckpointError(f"corrupt checkpoint {path}: {e}") from None
    return state


def latest_checkpoint(seed_dir) -> Path | None:
    root = Path(seed_dir) / "checkpoints"
    if not root.is_dir():
        return None
    done = sorted(p for p in root.glob("iter_*") if (p / "manifest.json").exists())
    return done[-1] if done else None


# --- metrics files ----------------------------------------------------------------


def read_metrics(path) -> list[MetricsRow]:
    """Parse a metrics CSV; malformed rows raise with ``file:line``."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(METRICS_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                it, c, s, v, w = rec
                rows.append(MetricsRow(int(it), int(c), bool(int(s)), bool(int(v)), float(w)))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed metrics row {rec!r}") from None
    return rows


def _write_metrics(path: Path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.csv_row())


def _append_metrics(path: Path, row: MetricsRow) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow(row.csv_row())
        fh.flush()


def run_seed(cfg: RunConfig, seed: int, out_dir, resume: bool = True, verbose: bool = False, stop_after: int | None = None) -> Path:
    """Train one seed for ``cfg.n_iterations`` iterations, resuming when possible.

    ``stop_after`` ends the run early after that iteration (used to simulate
    interruptions).
    """
    seed_dir = Path(out_dir) / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    spec = cfg.task_spec
    metrics_path = seed_dir / "metrics.csv"
    diag_path = seed_dir / "diagnostics.jsonl"
    demos_path = seed_dir / "demos.jsonl"
    ckpt = latest_checkpoint(seed_dir) if resume else None
    if ckpt is not None and demos_path.exists():
        demos = load_demos(demos_path, spec, strict=True)
        state = load_checkpoint(cfg, demos, ckpt)
        rows = [r for r in read_metrics(metrics_path) if r.iteration <= state.iteration] if metrics_path.exists() else []
        if len(rows) != state.iteration:
            raise nn.CheckpointError(f"{metrics_path}: has {len(rows)} rows, checkpoint is at iteration {state.iteration}")
        _write_metrics(metrics_path, rows)
        if diag_path.exists():
            lines = diag_path.read_text().splitlines()[: state.iteration]
            diag_path.write_text("".join(line + "\n" for line in lines))
        log.info("seed %d: resuming from %s", seed, ckpt)
    else:
        demos = obtain_demos(cfg, spec, seed)
        save_demos(demos, demos_path)
        state = initialize_run(cfg, demos, seed)
        _write_metrics(metrics_path, [])
        diag_path.write_text("")
        save_checkpoint(state, seed_dir / "checkpoints" / "iter_0000")
    last = cfg.n_iterations if stop_after is None else min(stop_after, cfg.n_iterations)
    while state.iteration < last:
        row = training_iteration(state, verbose)
        _append_metrics(metrics_path, row)
        with open(diag_path, "a") as fh:
            fh.write(json.dumps({"iteration": row.iteration, **row.diagnostics}) + "\n")
        log.info("seed %d iteration %d: cost=%d success=%s violation=%s (%.1fs)", seed, row.iteration, row.cost, row.success, row.violation, row.wall_time_s)
        if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.n_iterations:
            save_checkpoint(state, seed_dir / "checkpoints" / f"iter_{state.iteration:04d}")
    manifest = {"config_hash": cfg.config_hash(), "seed": seed, "iteration": state.iteration, "mode": cfg.mode, "task_id": cfg.task_id}
    (seed_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return metrics_path


def aggregate(metrics_files: list, path=None) -> list[dict]:
    """Per-iteration mean/std cost and success/violation rates across seeds."""
    per_seed = [read_metrics(p) for p in metrics_files]
    if not per_seed:
        raise ValueError("no metrics files to aggregate")
    n = min(len(r) for r in per_seed)
    out = []
    for k in range(n):
        rows = [r[k] for r in per_seed]
        costs = np.array([r.cost for r in rows], dtype=float)
        out.append(
            {
                "iteration": rows[0].iteration,
                "mean_cost": float(costs.mean()),
                "std_cost": float(costs.std()),
                "success_rate": float(np.mean([r.success for r in rows])),
                "violation_rate": float(np.mean([r.violation for r in rows])),
            }
        )
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, AGGREGATE_HEADER)
            w.writeheader()
            w.writerows(out)
    return out


def _run_seed_job(args):
    cfg_dict, seed, out_dir, resume, verbose = args
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)
    return str(run_seed(RunConfig.from_dict(cfg_dict), seed, out_dir, resume, verbose))


def run_experiment(cfg: RunConfig, out_dir=None, jobs: int = 1, resume: bool = True, verbose: bool = False) -> dict:
    """Train every seed and write ``aggregate.csv``; returns the written paths."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    args = [(cfg.to_dict(), s, str(out), resume, verbose) for s in cfg.seeds]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            files = list(ex.map(_run_seed_job, args))
    else:
        files = [str(run_seed(cfg, s, out, resume, verbose)) for s in cfg.seeds]
    agg_path = out / "aggregate.csv"
    aggregate(files, agg_path)
    return {"metrics": files, "aggregate": str(agg_path)}


def load_run_state(cfg: RunConfig, seed_dir) -> RunState:
    """Latest checkpointed state of a finished or partial seed run."""
    seed_dir = Path(seed_dir)
    ckpt = latest_checkpoint(seed_dir)
    if ckpt is None:
        raise RunError(f"{seed_dir}: no checkpoint found")
    demos = load_demos(seed_dir / "demos.jsonl", cfg.task_spec, strict=True)
    return load_checkpoint(cfg, demos, ckpt)


def summarize(rows: list[MetricsRow]) -> dict:
    if not rows:
        return {"episodes": 0}
    return {
        "episodes": len(rows),
        "mean_cost": float(np.mean([r.cost for r in rows])),
        "success_rate": float(np.mean([r.success for r in rows])),
        "violation_rate": float(np.mean([r.violation for r in rows])),
    }


def trajectory_row(traj: Trajectory, iteration: int) -> MetricsRow:
    return MetricsRow(iteration, traj.iteration_cost, bool(traj.success), bool(traj.violation), 0.0)
