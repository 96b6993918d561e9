"""Chance-constrained CEM model-predictive control and baseline controllers.

Candidate control sequences are scored by rolling particles through the
dynamics ensemble. A candidate is discarded when more than ``100 (1 - beta)%``
of its particles enter an obstacle anywhere along the horizon, or (in
``saved`` mode) when any particle ends outside the safe set's support.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import kernels, nn
from .envs import TaskSpec, in_goal
from .models import DynamicsEnsemble, ValueEnsemble, fit_ensemble, ts_inf_rollout
from .safeset import SafeSetStore

log = logging.getLogger(__name__)

MODES = ("saved", "saved_no_ss", "petsfd", "petsfd_dense", "clone")
SAVED_HORIZON = 15
PETSFD_HORIZONS = {1: 25, 2: 30, 3: 30, 4: 35}


def default_horizon(mode: str, task_id: int) -> int:
    if mode == "petsfd":
        return PETSFD_HORIZONS[task_id]
    return SAVED_HORIZON


@dataclass
class CemConfig:
    horizon: int = SAVED_HORIZON
    population: int = 400
    elites: int = 40
    cem_iterations: int = 5
    initial_std: float | None = None  # None: u_max / 2
    n_particles: int = 20
    beta: float = 1.0
    mode: str = "saved"
    keep_elites: bool = True
    action: str = "elite_mean"  # or "best"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if min(self.horizon, self.population, self.cem_iterations, self.n_particles) < 1:
            raise ValueError("horizon, population, cem_iterations and n_particles must be positive")
        if not 2 <= self.elites <= self.population:
            raise ValueError("need 2 <= elites <= population")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.action not in ("elite_mean", "best"):
            raise ValueError("action must be 'elite_mean' or 'best'")


def chance_ok(violating, n_particles: int, beta: float):
    """Keep a candidate unless more than 100(1-beta)% of its particles violate."""
    violating = np.asarray(violating)
    # the small slack keeps e.g. 4/20 at beta=0.8 on the boundary despite 1-0.8 != 0.2 in binary
    return violating <= n_particles * (1.0 - beta) + 1e-9


@dataclass
class ScoreBatch:
    expected_cost: np.ndarray
    violating: np.ndarray  # particles per candidate touching an obstacle
    density_fail: np.ndarray  # particles per candidate ending outside the safe set
    nan: np.ndarray  # candidate produced non-finite model output


@dataclass
class PlanResult:
    best_controls: np.ndarray
    feasible_count: int
    scores: np.ndarray
    diagnostics: dict = field(default_factory=dict)


class Models:
    """The learned pieces a planner consults."""

    def __init__(self, dynamics: DynamicsEnsemble, value: ValueEnsemble | None = None, safeset: SafeSetStore | None = None):
        self.dynamics = dynamics
        self.value = value
        self.safeset = safeset


def score_candidates(
    cfg: CemConfig, models: Models, spec: TaskSpec, state: np.ndarray, controls: np.ndarray, rng: np.random.Generator
) -> ScoreBatch:
    """Score a batch ``(P, H, m)`` of control sequences from ``state``."""
    paths = ts_inf_rollout(models.dynamics, state, controls, cfg.n_particles, rng)  # (P, N, H+1, n)
    finite = np.isfinite(paths).all(axis=(1, 2, 3))
    paths = np.where(np.isfinite(paths), paths, 0.0)
    H = controls.shape[1]
    visited = paths[:, :, :H]
    if cfg.mode == "petsfd_dense":
        step_cost = np.sqrt((visited[..., :2] ** 2).sum(-1)).sum(-1)
    else:
        step_cost = (~np.asarray(in_goal(spec, visited))).sum(-1).astype(float)
    per_particle = step_cost
    terminal = paths[:, :, H]
    if cfg.mode in ("saved", "saved_no_ss"):
        if models.value is None:
            raise ValueError(f"mode {cfg.mode} needs a value function")
        per_particle = per_particle + models.value.predict(terminal)
    expected = per_particle.mean(axis=1)
    violating = kernels.count_violations(paths[:, :, 1:], spec.obstacle_array)
    if cfg.mode == "saved":
        if models.safeset is None:
            raise ValueError("saved mode needs a safe set")
        dens = models.safeset.density_positive(terminal)
        density_fail = (~dens).sum(axis=1)
    else:
        density_fail = np.zeros(len(controls), dtype=int)
    expected = np.where(finite, expected, np.inf)
    return ScoreBatch(expected, violating, density_fail, ~finite)


def score_candidate(cfg: CemConfig, models: Models, spec: TaskSpec, state, controls, rng):
    """Single-sequence form: ``(expected_cost, chance_ok, density_ok)``."""
    b = score_candidates(cfg, models, spec, np.asarray(state, dtype=float), np.asarray(controls, dtype=float)[None], rng)
    ok = bool(chance_ok(b.violating[0], cfg.n_particles, cfg.beta)) and not b.nan[0]
    return float(b.expected_cost[0]), ok, bool(b.density_fail[0] == 0) and not b.nan[0]


def cem_optimize(
    cfg: CemConfig,
    score_fn: Callable[[np.ndarray], ScoreBatch],
    init_mean: np.ndarray,
    u_max: float,
    rng: np.random.Generator,
) -> PlanResult:
    """Cross-entropy search over control sequences with feasibility filtering."""
    mean = np.clip(np.asarray(init_mean, dtype=float), -u_max, u_max)
    H, m = mean.shape
    std0 = u_max / 2.0 if cfg.initial_std is None else cfg.initial_std
    std = np.full_like(mean, std0)
    n_particles = cfg.n_particles
    prev_elites = None
    diag = {"chance_rejections": [], "density_rejections": [], "nan_rejections": [], "feasible": [], "elite_cost": []}
    fallback_best, fallback_key = None, None
    last_good = None
    scores = np.zeros(cfg.population)
    n_feas = 0
    for it in range(cfg.cem_iterations):
        samples = np.clip(mean + std * rng.standard_normal((cfg.population, H, m)), -u_max, u_max)
        if cfg.keep_elites and prev_elites is not None:
            samples[-len(prev_elites) :] = prev_elites
        b = score_fn(samples)
        ch = chance_ok(b.violating, n_particles, cfg.beta)
        dn = b.density_fail == 0
        nan = np.asarray(b.nan, dtype=bool)
        feas = ch & dn & ~nan
        # each rejected candidate is attributed to one reason
        diag["nan_rejections"].append(int(nan.sum()))
        diag["chance_rejections"].append(int((~ch & ~nan).sum()))
        diag["density_rejections"].append(int((ch & ~dn & ~nan).sum()))
        n_feas = int(feas.sum())
        diag["feasible"].append(n_feas)
        scores = b.expected_cost

        # least-unsafe ordering: violation fraction, density failures, cost
        key = np.lexsort((b.expected_cost, b.density_fail, b.violating / n_particles, nan))
        if fallback_key is None or _fallback_better(b, key[0], n_particles, fallback_key):
            fallback_best = samples[key[0]].copy()
            fallback_key = (bool(nan[key[0]]), b.violating[key[0]] / n_particles, int(b.density_fail[key[0]]), float(b.expected_cost[key[0]]))

        if n_feas >= 2:
            idx = np.flatnonzero(feas)
            elite_idx = idx[np.argsort(b.expected_cost[idx], kind="stable")[: cfg.elites]]
        else:
            elite_idx = key[: cfg.elites]
        elites = samples[elite_idx]
        diag["elite_cost"].append(float(np.mean(b.expected_cost[elite_idx])))
        if n_feas >= 1:
            good = elite_idx if n_feas >= 2 else np.flatnonzero(feas)
            best = good[np.argmin(b.expected_cost[good])]
            last_good = elites.mean(axis=0) if cfg.action == "elite_mean" and n_feas >= 2 else samples[best]
            if cfg.action == "best":
                last_good = samples[best]
        mean = elites.mean(axis=0)
        std = elites.std(axis=0)
        prev_elites = elites.copy()

    diag["fallback"] = last_good is None
    out = fallback_best if last_good is None else last_good
    return PlanResult(np.clip(out, -u_max, u_max), n_feas, scores, diag)


def _fallback_better(b: ScoreBatch, i: int, n: int, current: tuple) -> bool:
    cand = (bool(b.nan[i]), b.violating[i] / n, int(b.density_fail[i]), float(b.expected_cost[i]))
    return cand < current


def plan(cfg: CemConfig, models: Models, spec: TaskSpec, state, rng: np.random.Generator, init_mean=None) -> PlanResult:
    """Solve the finite-horizon problem at ``state`` with CEM."""
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise ValueError("state must be finite")
    m = models.dynamics.control_dim
    if init_mean is None:
        init_mean = np.zeros((cfg.horizon, m))
    return cem_optimize(cfg, lambda s: score_candidates(cfg, models, spec, state, s, rng), init_mean, spec.u_max, rng)


class MPCController:
    """Receding-horizon controller: plan, execute the first control, warm-start.

    Each timestep draws from its own stream ``(seed, episode, t)``.
    """

    def __init__(self, cfg: CemConfig, models: Models, spec: TaskSpec, seed: int = 0, verbose: bool = False):
        self.cfg = cfg
        self.models = models
        self.spec = spec
        self.seed = seed
        self.verbose = verbose
        self.episode = 0
        self.mean = None
        self.fallbacks = 0
        self.history: list[dict] = []

    def reset(self, episode: int) -> None:
        self.episode = episode
        self.mean = None
        self.fallbacks = 0
        self.history = []

    def __call__(self, state: np.ndarray, t: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, self.episode, t])
        res = plan(self.cfg, self.models, self.spec, state, rng, self.mean)
        self.mean = np.concatenate([res.best_controls[1:], res.best_controls[-1:]])
        d = res.diagnostics
        self.fallbacks += int(d["fallback"])
        rec = {
            "t": t,
            "feasible_count": res.feasible_count,
            "chance_rejections": int(sum(d["chance_rejections"])),
            "density_rejections": int(sum(d["density_rejections"])),
            "nan_rejections": int(sum(d["nan_rejections"])),
            "elite_mean_cost": d["elite_cost"][-1],
            "fallback": d["fallback"],
        }
        self.history.append(rec)
        if self.verbose:
            log.info("plan %s", json.dumps(rec))
        return res.best_controls[0]


# --- behavior cloning -----------------------------------------------------------


@dataclass
class ClonePolicy:
    params: nn.MlpParams
    in_mean: np.ndarray
    in_std: np.ndarray
    u_max: float = 1.0


def clone_train(
    demos,
    hidden=(200, 200, 200),
    epochs: int = 50,
    rng: np.random.Generator | None = None,
    learning_rate: float = 3e-3,
    batch_size: int = 32,
    u_max: float = 1.0,
) -> ClonePolicy:
    """Regress demo controls on demo states (mse)."""
    trajs = getattr(demos, "trajectories", demos)
    if not trajs:
        raise ValueError("no demonstrations")
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.concatenate([t.states[: len(t)] for t in trajs])
    Y = np.concatenate([t.controls for t in trajs])
    mu = X.mean(0)
    sd = np.where(X.std(0) < 1e-12, 1.0, X.std(0))
    params = nn.init_mlp([X.shape[1], *hidden, Y.shape[1]], rng)
    # one network trained on a plain shuffle: stack it as a single-member ensemble
    stacked = nn.MlpParams.stack([params])
    Xn = (X - mu) / sd
    adam = nn.AdamState.like(stacked, learning_rate)
    for epoch in range(epochs):
        # linear decay: the goal hold needs precise controls near the origin
        adam.learning_rate = learning_rate * (1.0 - epoch / epochs)
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch_size):
            sl = order[s : s + batch_size]
            nn.backward_and_step(stacked, adam, Xn[sl][None], Y[sl][None], "mse")
    return ClonePolicy(stacked.member(0), mu, sd, u_max)


def clone_act(policy: ClonePolicy, state) -> np.ndarray:
    x = (np.asarray(state, dtype=float) - policy.in_mean) / policy.in_std
    return np.clip(nn.forward(policy.params, x), -policy.u_max, policy.u_max)


class CloneController:
    def __init__(self, policy: ClonePolicy):
        self.policy = policy

    def reset(self, episode: int) -> None:
        pass

    def __call__(self, state, t):
        return clone_act(self.policy, state)


def config_dict(cfg: CemConfig) -> dict:
    return asdict(cfg)
