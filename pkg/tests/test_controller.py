import json
import logging
from fractions import Fraction

import numpy as np
import pytest

from savedrl import controller as ctl
from savedrl import demos, envs, models
from savedrl.controller import CemConfig, Models, ScoreBatch
from savedrl.safeset import SafeSetStore


class ExactPointbot:
    """Zero-variance ensemble whose members all equal the true noiseless dynamics."""

    state_dim, control_dim = 4, 2

    def __init__(self, n_members=2, psi=0.2):
        self.n_members = n_members
        self.A, self.B = demos.pointbot_matrices(psi)

    def predict(self, x, u):
        mean = x @ self.A.T + np.clip(u, -1, 1) @ self.B.T
        return mean, np.zeros_like(mean)


class JumpTo:
    """Every member sends every particle to ``target`` in one step."""

    state_dim, control_dim, n_members = 4, 2, 2

    def __init__(self, target):
        self.target = np.asarray(target, dtype=float)

    def predict(self, x, u):
        return np.broadcast_to(self.target, x.shape).copy(), np.zeros(x.shape)


class ConstValue:
    def __init__(self, v=0.0):
        self.v = v

    def predict(self, states):
        return np.full(np.shape(states)[:-1], self.v)


def _quadratic_score(target):
    def score(samples):
        P = len(samples)
        return ScoreBatch(((samples - target) ** 2).sum(axis=(1, 2)), np.zeros(P, int), np.zeros(P, int), np.zeros(P, bool))

    return score


# --- chance rule ---


def test_chance_examples():
    assert not ctl.chance_ok(1, 20, 1.0)
    assert ctl.chance_ok(0, 20, 1.0)
    assert ctl.chance_ok(4, 20, 0.8)
    assert not ctl.chance_ok(5, 20, 0.8)


@pytest.mark.parametrize("n", [10, 20])
@pytest.mark.parametrize("beta", ["0", "0.5", "0.8", "1"])
def test_chance_rule_exhaustive(n, beta):
    b = Fraction(beta)
    for v in range(n + 1):
        discard = Fraction(v, n) > 1 - b
        assert bool(ctl.chance_ok(v, n, float(b))) is (not discard), (v, n, beta)


# --- scoring ---


def test_zero_variance_all_goal_costs_nothing():
    spec = envs.default_task(1)
    cfg = CemConfig(horizon=10, population=4, elites=2, n_particles=4, mode="saved_no_ss")
    cost, chance, dens = ctl.score_candidate(cfg, Models(ExactPointbot(), ConstValue(0.0)), spec, np.zeros(4), np.zeros((10, 2)), np.random.default_rng(0))
    assert cost == 0.0 and chance and dens


def test_expected_cost_counts_steps_and_value():
    spec = envs.default_task(1)
    cfg = CemConfig(horizon=5, population=4, elites=2, n_particles=2, mode="saved_no_ss")
    # from (-3, 0) at full throttle: positions -2, -0.2, ... reaching the goal after two steps
    cost, _, _ = ctl.score_candidate(
        cfg, Models(ExactPointbot(), ConstValue(2.5)), spec, np.array([-3.0, 0, 0, 0]), np.tile([1.0, 0.0], (5, 1)), np.random.default_rng(0)
    )
    x = np.array([-3.0, 0, 0, 0])
    A, B = demos.pointbot_matrices(0.2)
    outside = 0
    for _ in range(5):
        outside += np.hypot(x[0], x[1]) > 1
        x = A @ x + B @ np.array([1.0, 0.0])
    assert cost == pytest.approx(outside + 2.5)


def test_dense_cost_mode():
    spec = envs.default_task(1)
    cfg = CemConfig(horizon=3, population=4, elites=2, n_particles=2, mode="petsfd_dense")
    cost, _, _ = ctl.score_candidate(cfg, Models(ExactPointbot()), spec, np.array([3.0, 4.0, 0, 0]), np.zeros((3, 2)), np.random.default_rng(0))
    assert cost == pytest.approx(15.0)


def test_density_and_chance_flags():
    spec = envs.default_task(2)
    store = SafeSetStore(alpha=1.0)
    store.add_states(np.zeros((1, 4)), 0)
    cfg = CemConfig(horizon=2, population=4, elites=2, n_particles=2, mode="saved")
    inside = Models(JumpTo([-50.0, 0, 0, 0]), ConstValue(), store)
    _, chance, dens = ctl.score_candidate(cfg, inside, spec, np.array([-100.0, 0, 0, 0]), np.zeros((2, 2)), np.random.default_rng(0))
    assert not chance and not dens
    home = Models(JumpTo([0.5, 0, 0, 0]), ConstValue(), store)
    _, chance, dens = ctl.score_candidate(cfg, home, spec, np.array([-100.0, 0, 0, 0]), np.zeros((2, 2)), np.random.default_rng(0))
    assert chance and dens


def test_nan_model_output_marks_candidate_infeasible():
    class Broken(ExactPointbot):
        def predict(self, x, u):
            m, v = super().predict(x, u)
            return np.where(u[..., :1] > 0.5, np.nan, m), v

    spec = envs.default_task(1)
    cfg = CemConfig(horizon=3, population=4, elites=2, n_particles=2, mode="petsfd")
    controls = np.zeros((2, 3, 2))
    controls[1, :, 0] = 1.0
    b = ctl.score_candidates(cfg, Models(Broken()), spec, np.array([-5.0, 0, 0, 0]), controls, np.random.default_rng(0))
    assert b.nan.tolist() == [False, True]
    assert np.isinf(b.expected_cost[1]) and np.isfinite(b.expected_cost[0])


# --- CEM ---


def test_quadratic_surrogate_recovers_minimizer():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        target = rng.uniform(-0.8, 0.8, (5, 2))
        cfg = CemConfig(horizon=5, population=400, elites=40, cem_iterations=25)
        res = ctl.cem_optimize(cfg, _quadratic_score(target), np.zeros((5, 2)), 1.0, rng)
        assert np.max(np.abs(res.best_controls - target)) < 1e-2, seed


def test_elite_objective_non_increasing():
    rng = np.random.default_rng(3)
    target = rng.uniform(-0.5, 0.5, (8, 2))
    cfg = CemConfig(horizon=8, population=100, elites=10, cem_iterations=12)
    res = ctl.cem_optimize(cfg, _quadratic_score(target), np.zeros((8, 2)), 1.0, rng)
    costs = res.diagnostics["elite_cost"]
    assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))


def test_all_blocked_falls_back():
    spec = envs.default_task(2)
    cfg = CemConfig(horizon=4, population=30, elites=5, cem_iterations=3, n_particles=4, beta=1.0, mode="petsfd")
    res = ctl.plan(cfg, Models(JumpTo([-50.0, 0, 0, 0])), spec, np.array([-100.0, 0, 0, 0]), np.random.default_rng(0))
    d = res.diagnostics
    assert d["fallback"] is True
    assert sum(d["chance_rejections"]) == cfg.population * cfg.cem_iterations
    assert res.feasible_count == 0
    assert np.all(np.abs(res.best_controls) <= spec.u_max)


def test_filter_soundness_and_rejection_accounting():
    rng = np.random.default_rng(4)
    P, N = 200, 10
    viol = rng.integers(0, 3, P) * (rng.random(P) < 0.5)
    dens = rng.integers(0, 2, P) * (rng.random(P) < 0.5)
    nan = rng.random(P) < 0.05

    def score(samples):
        return ScoreBatch(rng.random(P), viol, dens, nan)

    for beta in (0.0, 0.5, 0.8, 1.0):
        cfg = CemConfig(horizon=2, population=P, elites=10, cem_iterations=1, n_particles=N, beta=beta)
        d = ctl.cem_optimize(cfg, score, np.zeros((2, 2)), 1.0, rng).diagnostics
        clean = (viol == 0) & (dens == 0) & ~nan
        expected = ctl.chance_ok(viol, N, beta) & (dens == 0) & ~nan
        assert d["feasible"][0] == expected.sum() >= clean.sum()
        assert d["nan_rejections"][0] + d["chance_rejections"][0] + d["density_rejections"][0] + d["feasible"][0] == P


def test_controls_stay_in_box():
    rng = np.random.default_rng(5)
    target = np.full((6, 2), 3.0)  # optimum outside the box
    cfg = CemConfig(horizon=6, population=50, elites=5, cem_iterations=4, initial_std=5.0)
    res = ctl.cem_optimize(cfg, _quadratic_score(target), np.full((6, 2), 7.0), 1.0, rng)
    assert np.all(np.abs(res.best_controls) <= 1.0)
    assert np.all(res.best_controls > 0.5)


def test_saved_matches_no_ss_when_safe_set_is_vacuous():
    spec = envs.default_task(2)
    store = SafeSetStore(alpha=1e6)
    store.add_states(np.zeros((1, 4)), 0)
    mods = Models(ExactPointbot(), ConstValue(3.0), store)
    start = np.array([-100.0, 0, 0, 0])
    out = {}
    for mode in ("saved", "saved_no_ss"):
        cfg = CemConfig(horizon=6, population=40, elites=5, cem_iterations=3, n_particles=4, mode=mode)
        out[mode] = ctl.plan(cfg, mods, spec, start, np.random.default_rng(9))
    assert np.array_equal(out["saved"].best_controls, out["saved_no_ss"].best_controls)
    assert out["saved"].diagnostics == out["saved_no_ss"].diagnostics


def test_petsfd_smoke_on_task1():
    spec = envs.default_task(1)
    cfg = CemConfig(horizon=ctl.default_horizon("petsfd", 1), population=32, elites=4, cem_iterations=2, n_particles=4, mode="petsfd")
    assert cfg.horizon == 25
    rng = np.random.default_rng(0)
    ens = models.DynamicsEnsemble(4, 2, hidden=(16,), n_members=2, rng=rng)
    buf = models.ReplayBuffer()
    buf.add_trajectory(spec, demos.generate_demo(spec, demos.DemoParams.for_task(spec), rng))
    ens.fit(buf, 1, rng)
    res = ctl.plan(cfg, Models(ens), spec, np.array(spec.start), rng)
    assert np.all(np.isfinite(res.best_controls[0])) and np.all(np.abs(res.best_controls[0]) <= 1)


def test_default_horizons():
    assert [ctl.default_horizon("petsfd", k) for k in (1, 2, 3, 4)] == [25, 30, 30, 35]
    assert ctl.default_horizon("saved", 3) == 15


def test_config_validation():
    with pytest.raises(ValueError):
        CemConfig(elites=1)
    with pytest.raises(ValueError):
        CemConfig(beta=1.5)
    with pytest.raises(ValueError):
        CemConfig(mode="greedy")


def test_mpc_warm_start_and_verbose_log(caplog):
    spec = envs.default_task(1)
    cfg = CemConfig(horizon=5, population=20, elites=4, cem_iterations=2, n_particles=2, mode="saved_no_ss")
    mpc = ctl.MPCController(cfg, Models(ExactPointbot(), ConstValue()), spec, seed=1, verbose=True)
    mpc.reset(0)
    with caplog.at_level(logging.INFO, logger="savedrl.controller"):
        u0 = mpc(np.array([-5.0, 0, 0, 0]), 0)
        mpc(np.array([-4.0, 0, 0, 0]), 1)
    assert u0.shape == (2,)
    assert mpc.mean.shape == (5, 2)
    recs = [json.loads(r.getMessage().split(" ", 1)[1]) for r in caplog.records if r.getMessage().startswith("plan ")]
    assert [r["t"] for r in recs] == [0, 1]
    assert {"feasible_count", "chance_rejections", "density_rejections", "elite_mean_cost"} <= set(recs[0])
    # same seed, episode and step give the same control
    mpc.reset(0)
    assert np.array_equal(mpc(np.array([-5.0, 0, 0, 0]), 0), u0)


# --- behavior cloning ---


def _constant_control_demos(u, n=5):
    spec = envs.ci_task(1)
    rng = np.random.default_rng(0)
    out = []
    for _ in range(n):
        out.append(envs.rollout_episode(spec, lambda x, t: np.array(u), rng, start=np.array([-30.0, rng.uniform(-3, 3), 0, 0])))
    return out


def test_clone_reproduces_constant_control():
    trajs = _constant_control_demos([0.3, -0.6])
    pol = ctl.clone_train(trajs, hidden=(32, 32), epochs=100, rng=np.random.default_rng(1), learning_rate=3e-3)
    states = np.concatenate([t.states[: len(t)] for t in trajs])
    acts = np.array([ctl.clone_act(pol, s) for s in states])
    assert np.max(np.abs(acts - [0.3, -0.6])) < 0.05


def test_clone_output_clipped():
    trajs = _constant_control_demos([0.3, -0.6], n=1)
    pol = ctl.clone_train(trajs, hidden=(4,), epochs=1)
    pol.params.biases[-1][:] = [7.0, -9.0]
    for w in pol.params.weights:
        w[...] = 0.0
    assert ctl.clone_act(pol, np.zeros(4)).tolist() == [1.0, -1.0]


def test_clone_needs_demos():
    with pytest.raises(ValueError):
        ctl.clone_train([])
