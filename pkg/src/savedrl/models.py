"""Probabilistic ensembles for dynamics and value, plus the replay buffer."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .envs import TaskSpec, Trajectory, in_goal, feasible


class ModelError(RuntimeError):
    pass


# --- replay buffer ------------------------------------------------------------


class ReplayBuffer:
    """Append-only transition store with optional FIFO capacity.

    Each transition is ``(x, u, c, x', goal_done, violation)`` where
    ``goal_done`` marks an ``x'`` inside the goal of an episode that ended in
    success, and ``violation`` marks an infeasible ``x'``.
    """

    _fields = ("states", "controls", "costs", "next_states", "goal_done", "violation")

    def __init__(self, state_dim: int = 4, control_dim: int = 2, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((0, state_dim))
        self.controls = np.zeros((0, control_dim))
        self.costs = np.zeros(0)
        self.next_states = np.zeros((0, state_dim))
        self.goal_done = np.zeros(0, dtype=bool)
        self.violation = np.zeros(0, dtype=bool)

    def __len__(self) -> int:
        return len(self.costs)

    def add(self, x, u, c, x_next, goal_done=False, violation=False) -> None:
        self.extend(
            np.atleast_2d(x), np.atleast_2d(u), np.atleast_1d(c), np.atleast_2d(x_next),
            np.atleast_1d(goal_done), np.atleast_1d(violation),
        )

    def extend(self, states, controls, costs, next_states, goal_done, violation) -> None:
        new = (states, controls, costs, next_states, goal_done, violation)
        for name, arr in zip(self._fields, new):
            cur = getattr(self, name)
            setattr(self, name, np.concatenate([cur, np.asarray(arr, dtype=cur.dtype)]))
        if self.capacity is not None and len(self) > self.capacity:
            drop = len(self) - self.capacity
            for name in self._fields:
                setattr(self, name, getattr(self, name)[drop:])

    def add_trajectory(self, spec: TaskSpec, traj: Trajectory) -> int:
        """Append every transition of ``traj``; returns how many were added."""
        n = len(traj)
        if n == 0:
            return 0
        nxt = traj.states[1 : n + 1]
        goal_done = np.asarray(in_goal(spec, nxt)) & bool(traj.success)
        viol = ~np.asarray(feasible(spec, nxt))
        self.extend(traj.states[:n], traj.controls, traj.costs[:n], nxt, goal_done, viol)
        return n

    def state_dict(self) -> dict:
        d = {name: getattr(self, name) for name in self._fields}
        d["capacity"] = np.array(-1 if self.capacity is None else self.capacity)
        return d

    @classmethod
    def from_state_dict(cls, d) -> "ReplayBuffer":
        cap = int(d["capacity"])
        buf = cls(d["states"].shape[1], d["controls"].shape[1], None if cap < 0 else cap)
        for name in cls._fields:
            setattr(buf, name, np.array(d[name]))
        return buf


# --- ensemble training ----------------------------------------------------------


@dataclass
class FitReport:
    initial_loss: np.ndarray
    final_loss: np.ndarray
    bootstrap_indices: np.ndarray = field(repr=False)
    epochs: int = 0

    def to_dict(self) -> dict:
        return {
            "initial_loss": self.initial_loss.tolist(),
            "final_loss": self.final_loss.tolist(),
            "epochs": self.epochs,
        }


def _check_losses(losses: np.ndarray, where: str) -> None:
    bad = ~np.isfinite(losses)
    if bad.any():
        m = int(np.flatnonzero(bad)[0])
        raise nn.TrainingDivergenceError(f"{where}: loss diverged for ensemble member {m}", member=m)


def _member_losses(params: nn.MlpParams, X: np.ndarray, Y: np.ndarray, idx: np.ndarray, loss: str, chunk: int = 4096):
    """Mean loss of each member on its own bootstrap sample."""
    E, N = idx.shape
    total = np.zeros(E)
    for s in range(0, N, chunk):
        sl = idx[:, s : s + chunk]
        out = nn.forward(params, X[sl])
        if loss == "nll":
            mean, var = out
            per = ((Y[sl] - mean) ** 2 / (2.0 * var) + 0.5 * np.log(var)).sum(-1)
        else:
            pred = out[0] if isinstance(out, tuple) else out
            per = ((Y[sl] - pred) ** 2).sum(-1)
        total += per.sum(-1)
    return total / N


def fit_ensemble(
    params: nn.MlpParams,
    X: np.ndarray,
    Y: np.ndarray,
    epochs: int,
    rng: np.random.Generator,
    learning_rate: float,
    batch_size: int = 32,
    loss: str = "nll",
    where: str = "ensemble",
) -> FitReport:
    """Train each stacked member on its own with-replacement resample of (X, Y)."""
    E = params.n_members
    N = len(X)
    if N == 0:
        raise ModelError(f"{where}: no training data")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    boot = rng.integers(0, N, size=(E, N))
    init = _member_losses(params, X, Y, boot, loss)
    adam = nn.AdamState.like(params, learning_rate)
    rows = np.arange(E)[:, None]
    for _ in range(epochs):
        order = boot[rows, rng.permuted(np.tile(np.arange(N), (E, 1)), axis=1)]
        for s in range(0, N, batch_size):
            sl = order[:, s : s + batch_size]
            try:
                losses = nn.backward_and_step(params, adam, X[sl], Y[sl], loss)
            except nn.TrainingDivergenceError as e:
                raise nn.TrainingDivergenceError(f"{where}: {e}", layer=e.layer, member=e.member) from None
            _check_losses(np.asarray(losses), where)
    final = _member_losses(params, X, Y, boot, loss)
    _check_losses(final, where)
    return FitReport(init, final, boot, epochs)


def _norm_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    return mu, sd


# --- dynamics -------------------------------------------------------------------


class DynamicsEnsemble:
    """``n`` Gaussian MLPs mapping normalized (x, u) to the next-state distribution."""

    def __init__(
        self,
        state_dim: int,
        control_dim: int,
        hidden=(500, 500, 500),
        n_members: int = 5,
        rng: np.random.Generator | None = None,
        predict_delta: bool = True,
        params: nn.MlpParams | None = None,
    ):
        if n_members < 2:
            raise ValueError("an ensemble needs at least two members")
        self.state_dim = state_dim
        self.control_dim = control_dim
        self.predict_delta = predict_delta
        sizes = [state_dim + control_dim, *hidden, 2 * state_dim]
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = nn.init_mlp(sizes, rng, nn.GAUSSIAN, n_members)
        self.params = params
        self.in_mean = np.zeros(state_dim + control_dim)
        self.in_std = np.ones(state_dim + control_dim)

    @property
    def n_members(self) -> int:
        return self.params.n_members

    def _inputs(self, states, controls):
        return (np.concatenate([states, controls], axis=-1) - self.in_mean) / self.in_std

    def predict(self, states: np.ndarray, controls: np.ndarray):
        """Per-member next-state mean and variance for stacked inputs ``(E, B, .)``."""
        mean, var = nn.forward(self.params, self._inputs(states, controls))
        if self.predict_delta:
            mean = mean + states
        return mean, var

    def predict_mean(self, states, controls) -> np.ndarray:
        """Ensemble-mean next state for unstacked inputs ``(B, .)``."""
        states = np.asarray(states, dtype=float)
        controls = np.asarray(controls, dtype=float)
        E = self.n_members
        m, _ = self.predict(np.broadcast_to(states, (E,) + states.shape), np.broadcast_to(controls, (E,) + controls.shape))
        return m.mean(axis=0)

    def training_data(self, buffer: ReplayBuffer):
        X = np.concatenate([buffer.states, buffer.controls], axis=1)
        Y = buffer.next_states - buffer.states if self.predict_delta else buffer.next_states
        return X, Y

    def fit(self, buffer: ReplayBuffer, epochs: int, rng, learning_rate: float = 7.5e-4, batch_size: int = 32) -> FitReport:
        return fit_dynamics(self, buffer, epochs, rng, learning_rate, batch_size)

    def copy(self) -> "DynamicsEnsemble":
        out = DynamicsEnsemble(self.state_dim, self.control_dim, predict_delta=self.predict_delta, params=self.params.copy())
        out.in_mean, out.in_std = self.in_mean.copy(), self.in_std.copy()
        return out


def fit_dynamics(
    ensemble: DynamicsEnsemble,
    buffer: ReplayBuffer,
    epochs: int,
    rng: np.random.Generator,
    learning_rate: float = 7.5e-4,
    batch_size: int = 32,
) -> FitReport:
    if len(buffer) == 0:
        raise ModelError("cannot fit dynamics on an empty buffer")
    X, Y = ensemble.training_data(buffer)
    ensemble.in_mean, ensemble.in_std = _norm_stats(X)
    Xn = (X - ensemble.in_mean) / ensemble.in_std
    return fit_ensemble(ensemble.params, Xn, Y, epochs, rng, learning_rate, batch_size, "nll", "dynamics")


def ts_inf_rollout(
    dynamics: DynamicsEnsemble,
    start: np.ndarray,
    controls: np.ndarray,
    n_particles: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample particle trajectories with fixed member assignment (TS-inf).

    ``controls`` is ``(H, m)`` or a batch ``(P, H, m)``. Particle ``j`` of every
    candidate is propagated by member ``j // (n_particles // E)`` for the whole
    horizon. Returns ``(n_particles, H+1, n)`` or ``(P, n_particles, H+1, n)``.
    """
    controls = np.asarray(controls, dtype=float)
    single = controls.ndim == 2
    if single:
        controls = controls[None]
    P, H, m = controls.shape
    E = dynamics.n_members
    if n_particles % E:
        raise ValueError(f"n_particles={n_particles} is not a multiple of the ensemble size {E}")
    k = n_particles // E
    n = dynamics.state_dim
    start = np.asarray(start, dtype=float)
    x = np.broadcast_to(start, (E, P * k, n)).copy() if start.ndim == 1 else np.broadcast_to(
        np.repeat(start, k, axis=0), (E, P * k, n)
    ).copy()
    u_rows = np.repeat(controls, k, axis=0)  # (P*k, H, m)
    out = np.empty((E, P * k, H + 1, n))
    out[:, :, 0] = x
    for t in range(H):
        u = np.broadcast_to(u_rows[:, t], (E, P * k, m))
        mean, var = dynamics.predict(x, u)
        x = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        out[:, :, t + 1] = x
    out = out.reshape(E, P, k, H + 1, n).transpose(1, 0, 2, 3, 4).reshape(P, n_particles, H + 1, n)
    return out[0] if single else out


# --- value ----------------------------------------------------------------------


class ValueEnsemble:
    """Gaussian MLP ensemble estimating cost-to-go; point estimate is the clipped member mean.

    Networks regress targets divided by ``clip_max`` so that outputs stay O(1).
    """

    def __init__(
        self,
        state_dim: int,
        hidden=(500, 500, 500),
        n_members: int = 5,
        clip_max: float = 100.0,
        rng: np.random.Generator | None = None,
        loss: str = "nll",
        params: nn.MlpParams | None = None,
    ):
        if n_members < 2:
            raise ValueError("an ensemble needs at least two members")
        if loss not in ("nll", "mse"):
            raise ValueError(f"unknown value loss {loss!r}")
        self.state_dim = state_dim
        self.clip_max = float(clip_max)
        self.loss = loss
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = nn.init_mlp([state_dim, *hidden, 2], rng, nn.GAUSSIAN, n_members)
        self.params = params
        self.in_mean = np.zeros(state_dim)
        self.in_std = np.ones(state_dim)

    @property
    def n_members(self) -> int:
        return self.params.n_members

    def member_means(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        flat = states.reshape(-1, self.state_dim)
        xn = (flat - self.in_mean) / self.in_std
        mean, _ = nn.forward(self.params, np.broadcast_to(xn, (self.n_members,) + xn.shape))
        return (mean[..., 0] * self.clip_max).reshape((self.n_members,) + states.shape[:-1])

    def predict(self, states) -> np.ndarray:
        """Clipped ensemble-mean cost-to-go, shape ``states.shape[:-1]``."""
        return np.clip(self.member_means(states).mean(axis=0), 0.0, self.clip_max)

    def fit_targets(self, states, targets, epochs, rng, learning_rate=1e-3, batch_size=32) -> FitReport:
        states = np.asarray(states, dtype=float)
        targets = np.clip(np.asarray(targets, dtype=float), 0.0, self.clip_max)
        if len(states) == 0:
            raise ModelError("cannot fit value on empty data")
        self.in_mean, self.in_std = _norm_stats(states)
        Xn = (states - self.in_mean) / self.in_std
        Y = (targets / self.clip_max)[:, None]
        return fit_ensemble(self.params, Xn, Y, epochs, rng, learning_rate, batch_size, self.loss, "value")

    def copy(self) -> "ValueEnsemble":
        out = ValueEnsemble(self.state_dim, clip_max=self.clip_max, loss=self.loss, params=self.params.copy())
        out.in_mean, out.in_std = self.in_mean.copy(), self.in_std.copy()
        return out


def cost_to_go(traj: Trajectory) -> np.ndarray:
    """Remaining out-of-goal steps from every state of ``traj`` (0 at the last state)."""
    c = np.asarray(traj.costs, dtype=float)
    out = np.zeros(len(c) + 1)
    out[:-1] = np.cumsum(c[::-1])[::-1]
    return out


def fit_value_from_demos(value: ValueEnsemble, demos, epochs: int = 30, rng=None, learning_rate=1e-3, batch_size=32) -> FitReport:
    trajs = getattr(demos, "trajectories", demos)
    if not trajs:
        raise ModelError("no demonstrations")
    if not all(t.success for t in trajs):
        raise ModelError("value initialization needs successful demonstrations")
    states = np.concatenate([t.states for t in trajs])
    targets = np.concatenate([cost_to_go(t) for t in trajs])
    rng = rng if rng is not None else np.random.default_rng(0)
    return value.fit_targets(states, targets, epochs, rng, learning_rate, batch_size)


def td1_targets(value: ValueEnsemble, buffer: ReplayBuffer) -> np.ndarray:
    """``c + V(x')`` with V the current ensemble mean; 0 continuation at goal-done
    states, and the maximum cost for transitions into an infeasible state."""
    v_next = value.predict(buffer.next_states)
    targets = buffer.costs + np.where(buffer.goal_done, 0.0, v_next)
    targets = np.where(buffer.violation, value.clip_max, targets)
    return np.clip(targets, 0.0, value.clip_max)


def fit_value_td1(value: ValueEnsemble, buffer: ReplayBuffer, epochs: int = 15, rng=None, learning_rate=1e-3, batch_size=32) -> FitReport:
    if len(buffer) == 0:
        raise ModelError("cannot fit value on an empty buffer")
    targets = td1_targets(value, buffer)
    rng = rng if rng is not None else np.random.default_rng(0)
    return value.fit_targets(buffer.states, targets, epochs, rng, learning_rate, batch_size)


# --- checkpoints ----------------------------------------------------------------


def save_ensemble(model, path) -> None:
    """Zip container: manifest.json, member_<i>.mlp (nn checkpoint format), norm.npz."""
    kind = "dynamics" if isinstance(model, DynamicsEnsemble) else "value"
    meta = {"kind": kind, "n_members": model.n_members, "state_dim": model.state_dim}
    if kind == "dynamics":
        meta.update(control_dim=model.control_dim, predict_delta=model.predict_delta)
    else:
        meta.update(clip_range=[0.0, model.clip_max], loss=model.loss)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(meta, sort_keys=True))
        for i in range(model.n_members):
            zf.writestr(f"member_{i}.mlp", nn.mlp_to_bytes(model.params.member(i)))
        buf = io.BytesIO()
        np.savez(buf, in_mean=model.in_mean, in_std=model.in_std)
        zf.writestr("norm.npz", buf.getvalue())


def load_ensemble(path):
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("manifest.json"))
            members = [nn.mlp_from_bytes(zf.read(f"member_{i}.mlp")) for i in range(meta["n_members"])]
            norm = np.load(io.BytesIO(zf.read("norm.npz")))
            in_mean, in_std = norm["in_mean"], norm["in_std"]
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, nn.CheckpointError) as e:
        raise nn.CheckpointError(f"corrupt ensemble checkpoint {path}: {e}") from None
    params = nn.MlpParams.stack(members)
    if meta["kind"] == "dynamics":
        model = DynamicsEnsemble(meta["state_dim"], meta["control_dim"], predict_delta=meta["predict_delta"], params=params)
    else:
        model = ValueEnsemble(meta["state_dim"], clip_max=meta["clip_range"][1], loss=meta["loss"], params=params)
    model.in_mean, model.in_std = in_mean, in_std
    return model
