"""Suboptimal demonstrations: waypoint tracking, then finite-horizon LQR.

For the first half of the episode a PD controller follows a deliberately
indirect list of waypoints; afterwards time-varying LQR gains computed on a
quadratic stand-in for the goal cost drive the point mass into the goal.
Gaussian noise is added to every control before clipping. Episodes are
re-drawn until one succeeds without touching an obstacle.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs import CONTROL_DIM, STATE_DIM, TaskSpec, Trajectory, feasible, in_goal, make_trajectory, step

DEMO_FORMAT = "savedrl-demos"
DEMO_VERSION = 1


class DemoGenerationError(RuntimeError):
    pass


class DemoFormatError(ValueError):
    pass


class DemoVersionError(DemoFormatError):
    pass


class TaskMismatchError(DemoFormatError):
    pass


def lqr_gain_sequence(A, B, Q, R, horizon: int, Qf=None) -> list[np.ndarray]:
    """Finite-horizon discrete LQR gains ``K_0 .. K_{horizon-1}``.

    Minimizes ``sum_t x_t'Q x_t + u_t'R u_t + x_H' Qf x_H`` with ``u_t = -K_t x_t``;
    ``Qf`` defaults to ``Q``.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    n, m = B.shape
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise ValueError(f"inconsistent shapes A{A.shape} B{B.shape} Q{Q.shape} R{R.shape}")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    P = Q.copy() if Qf is None else np.atleast_2d(np.asarray(Qf, dtype=float))
    gains = [None] * horizon
    for t in range(horizon - 1, -1, -1):
        S = R + B.T @ P @ B
        if np.linalg.cond(S) > 1e12:
            raise np.linalg.LinAlgError(f"R + B'PB is singular at step {t}")
        K = np.linalg.solve(S, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        gains[t] = K
    return gains


def pointbot_matrices(psi: float) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free navigation dynamics written as x' = A x + B u."""
    a = 1.0 - psi
    A = np.array(
        [
            [1.0, 0.0, a, 0.0],
            [0.0, 1.0, 0.0, a],
            [0.0, 0.0, a, 0.0],
            [0.0, 0.0, 0.0, a],
        ]
    )
    B = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    return A, B


# Waypoints at repro scale; tasks run at other scales get them scaled with the start.
DEFAULT_WAYPOINTS = {
    # zig-zags make the demos slow; the last point stages a gentle LQR approach
    1: ((-100.0, 30.0), (-80.0, 50.0), (-60.0, 30.0), (-40.0, 50.0), (-6.0, 0.0)),
    2: ((-95.0, 30.0), (-75.0, 40.0), (-55.0, 25.0), (-35.0, 40.0), (-6.0, 0.0)),
    3: ((-60.0, 20.0), (-72.0, -12.0), (-55.0, -18.0), (-45.0, 0.0), (-6.0, 0.0)),
    4: ((-55.0, 25.0), (-72.0, 8.0), (-60.0, -18.0), (-72.0, -8.0), (-45.0, 0.0), (-6.0, 0.0)),
}
DEFAULT_COUNTS = {1: 50, 2: 50, 3: 50, 4: 100}


@dataclass
class DemoParams:
    waypoints: list = field(default_factory=list)
    switch_step: int | None = None  # latest LQR start; None: 15 steps before the horizon
    noise_std: float = 0.2  # as a fraction of u_max
    kp: float = 0.2
    kd: float = 0.5
    waypoint_radius: float = 1.0
    q_diag: tuple = (1.0, 1.0, 0.1, 0.1)
    r_scale: float = 0.1
    max_retries: int = 50

    @classmethod
    def for_task(cls, spec: TaskSpec, detour_scale: float = 1.0, **kw) -> "DemoParams":
        """Default waypoints for ``spec``, stretched away from the start by ``detour_scale``."""
        ref = {1: 100.0, 2: 100.0, 3: 50.0, 4: 50.0}[spec.task_id]
        scale = abs(spec.start[0]) / ref if spec.start[0] else 1.0
        sx, sy = spec.start[0], spec.start[1]
        wps = []
        for wx, wy in DEFAULT_WAYPOINTS[spec.task_id]:
            wx, wy = wx * scale, wy * scale
            wps.append((sx + detour_scale * (wx - sx), sy + detour_scale * (wy - sy)))
        return cls(waypoints=wps, **kw)


class DemoPolicy:
    """Waypoint PD tracking, then LQR toward the goal.

    The phase depends on the state only: the target advances to the next
    waypoint once the current one is within ``waypoint_radius``, and the LQR
    phase starts when the last waypoint is reached (or at ``switch_step`` if
    that comes first, so that a stalled demo still heads home).
    """

    def __init__(self, spec: TaskSpec, params: DemoParams, rng: np.random.Generator):
        self.spec = spec
        self.params = params
        self.rng = rng
        self.deadline = spec.T - 15 if params.switch_step is None else params.switch_step
        A, B = pointbot_matrices(spec.psi)
        Q = np.diag(params.q_diag)
        R = params.r_scale * np.eye(CONTROL_DIM)
        # a long horizon makes the first gain the stationary one
        self.gain = lqr_gain_sequence(A, B, Q, R, 200)[0]
        self.goal = np.array([*spec.goal_center, 0.0, 0.0])
        self.wp_index = 0

    def tracking(self, x: np.ndarray, t: int) -> bool:
        p = self.params
        wps = p.waypoints
        while self.wp_index < len(wps) and np.linalg.norm(x[:2] - wps[self.wp_index]) < p.waypoint_radius:
            self.wp_index += 1
        return self.wp_index < len(wps) and t < self.deadline

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        p = self.params
        if self.tracking(x, t):
            err = np.asarray(p.waypoints[self.wp_index]) - x[:2]
            u = p.kp * err - p.kd * x[2:]
        else:
            u = -self.gain @ (x - self.goal)
        u = np.clip(u, -self.spec.u_max, self.spec.u_max)
        # the demonstrator is noisy in transit but settles once inside the goal
        if p.noise_std > 0 and not in_goal(self.spec, x):
            u = u + p.noise_std * self.spec.u_max * self.rng.standard_normal(CONTROL_DIM)
        return np.clip(u, -self.spec.u_max, self.spec.u_max)


def _run_policy(spec: TaskSpec, policy: DemoPolicy, rng: np.random.Generator) -> Trajectory:
    x = np.asarray(spec.start, dtype=float)
    states, controls = [x], []
    for t in range(spec.T):
        u = policy(x, t)
        x = step(spec, x, u, rng)
        states.append(x)
        controls.append(u)
        if not feasible(spec, x):
            break
    return make_trajectory(spec, np.asarray(states), np.asarray(controls))


def generate_demo(spec: TaskSpec, params: DemoParams, rng: np.random.Generator) -> Trajectory:
    """One successful, constraint-satisfying demonstration."""
    for attempt in range(params.max_retries):
        policy = DemoPolicy(spec, params, rng)
        traj = _run_policy(spec, policy, rng)
        if traj.success and not traj.violation:
            traj.info["attempts"] = attempt + 1
            return traj
    raise DemoGenerationError(
        f"no successful demo for task {spec.task_id} after {params.max_retries} attempts; "
        "check that the waypoints avoid the obstacles and leave time for the LQR phase"
    )


@dataclass
class DemoSet:
    trajectories: list[Trajectory]
    task_id: int
    generator: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def mean_cost(self) -> float:
        return float(np.mean([t.iteration_cost for t in self.trajectories]))

    def costs(self) -> np.ndarray:
        return np.array([t.iteration_cost for t in self.trajectories])

    def validate(self, spec: TaskSpec) -> None:
        for i, t in enumerate(self.trajectories):
            re = make_trajectory(spec, t.states, t.controls)
            if not re.success or re.violation:
                raise DemoFormatError(f"demo {i} is not a successful, feasible trajectory for task {spec.task_id}")


def generate_demos(
    spec: TaskSpec, count: int, params: DemoParams | None = None, seed: int = 0
) -> DemoSet:
    """``count`` demos, each drawn from its own stream ``(seed, index)``."""
    if count < 1:
        raise ValueError("count must be positive")
    params = params or DemoParams.for_task(spec)
    trajs = [generate_demo(spec, params, np.random.default_rng([seed, i])) for i in range(count)]
    gen = asdict(params)
    gen["seed"] = seed
    return DemoSet(trajs, spec.task_id, gen)


def save_demos(demos: DemoSet, path) -> None:
    """JSON lines: a header line, then one trajectory per line."""
    header = {
        "format": DEMO_FORMAT,
        "version": DEMO_VERSION,
        "task_id": demos.task_id,
        "count": len(demos),
        "mean_cost": demos.mean_cost,
        "generator": demos.generator,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t in demos.trajectories:
            row = {
                "task_id": demos.task_id,
                "states": t.states.tolist(),
                "controls": t.controls.tolist(),
                "costs": t.costs.astype(int).tolist(),
                "success": bool(t.success),
                "violation": bool(t.violation),
                "horizon": int(t.horizon),
            }
            fh.write(json.dumps(row) + "\n")


def load_demos(path, spec: TaskSpec | None = None, strict: bool = False) -> DemoSet:
    """Read a demo file; with ``spec`` the trajectories are re-validated.

    A task id that differs from ``spec.task_id`` warns, or raises
    ``TaskMismatchError`` when ``strict`` is set.
    """
    data = Path(path).read_bytes()
    offset = 0
    lines = data.split(b"\n")
    header = None
    trajs = []
    for line in lines:
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DemoFormatError(f"{path}: malformed JSON at byte offset {start + e.pos}: {e.msg}") from None
        if header is None:
            header = obj
            if header.get("format") != DEMO_FORMAT:
                raise DemoFormatError(f"{path}: not a demo file (byte offset 0)")
            if header.get("version") != DEMO_VERSION:
                raise DemoVersionError(f"{path}: demo schema version {header.get('version')} != {DEMO_VERSION}")
            continue
        try:
            states = np.asarray(obj["states"], dtype=float).reshape(-1, STATE_DIM)
            controls = np.asarray(obj["controls"], dtype=float).reshape(-1, CONTROL_DIM)
            trajs.append(
                Trajectory(
                    states,
                    controls,
                    np.asarray(obj["costs"], dtype=int),
                    bool(obj["success"]),
                    bool(obj["violation"]),
                    int(obj["task_id"]),
                    int(obj.get("horizon", len(controls))),
                )
            )
        except (KeyError, ValueError, TypeError) as e:
            raise DemoFormatError(f"{path}: bad trajectory record at byte offset {start}: {e}") from None
    if header is None:
        raise DemoFormatError(f"{path}: empty demo file")
    if len(trajs) != header["count"]:
        raise DemoFormatError(
            f"{path}: truncated, header promises {header['count']} trajectories but found {len(trajs)} "
            f"(file ends at byte offset {len(data)})"
        )
    demos = DemoSet(trajs, int(header["task_id"]), header.get("generator", {}))
    if spec is not None:
        if demos.task_id != spec.task_id:
            msg = f"{path}: demos were generated for task {demos.task_id}, run is task {spec.task_id}"
            if strict:
                raise TaskMismatchError(msg)
            warnings.warn(msg, stacklevel=2)
        else:
            demos.validate(spec)
    return demos

