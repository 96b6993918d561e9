"""Point-mass navigation tasks with drag, process noise and box obstacles.

State is ``(x, y, vx, vy)``, control is a force in ``[-u_max, u_max]^2``.
One step is::

    v' = (1 - psi) * v + u + z,   z ~ N(0, sigma^2 I)
    p' = p + v'

The cost is 0 inside the closed goal ball and 1 elsewhere. A state is
infeasible when its position lies in any obstacle rectangle (closed).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

STATE_DIM = 4
CONTROL_DIM = 2

# (x_min, x_max, y_min, y_max)
Rect = tuple[float, float, float, float]


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    start: tuple[float, float, float, float]
    obstacles: tuple[Rect, ...] = ()
    goal_center: tuple[float, float] = (0.0, 0.0)
    goal_radius: float = 1.0
    T: int = 100
    psi: float = 0.2
    sigma: float = 0.05
    u_max: float = 1.0
    start_jitter_std: float = 0.0

    def __post_init__(self) -> None:
        if self.task_id not in (1, 2, 3, 4):
            raise ValueError(f"task_id must be 1..4, got {self.task_id}")
        if len(self.start) != STATE_DIM:
            raise ValueError("start must have 4 entries (x, y, vx, vy)")
        if not self.goal_radius > 0 or self.T < 1 or not 0 <= self.psi < 1:
            raise ValueError("need goal_radius > 0, T >= 1 and 0 <= psi < 1")
        if self.sigma < 0 or not self.u_max > 0:
            raise ValueError("need sigma >= 0 and u_max > 0")
        for r in self.obstacles:
            if len(r) != 4 or r[0] > r[1] or r[2] > r[3]:
                raise ValueError(f"bad obstacle {r}; expected (x_min, x_max, y_min, y_max)")
        if not feasible(self, np.asarray(self.start, dtype=float)):
            raise ValueError("start state lies inside an obstacle")

    @property
    def obstacle_array(self) -> np.ndarray:
        return np.asarray(self.obstacles, dtype=float).reshape(-1, 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start"] = list(self.start)
        d["goal_center"] = list(self.goal_center)
        d["obstacles"] = [list(r) for r in self.obstacles]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown task keys: {sorted(unknown)}")
        d = dict(d)
        d["start"] = tuple(float(v) for v in d["start"])
        if "goal_center" in d:
            d["goal_center"] = tuple(float(v) for v in d["goal_center"])
        d["obstacles"] = tuple(tuple(float(v) for v in r) for r in d.get("obstacles", ()))
        return cls(**d)

    def scaled(self, factor: float, **overrides) -> "TaskSpec":
        """Same layout with start and obstacles scaled about the origin."""
        sx, sy, vx, vy = self.start
        return replace(
            self,
            start=(sx * factor, sy * factor, vx, vy),
            obstacles=tuple(tuple(c * factor for c in r) for r in self.obstacles),
            **overrides,
        )


def _ring(outer: float, inner: float, gap: float) -> tuple[Rect, ...]:
    # box ring around the origin with an entry gap of half-width `gap` on the -x side
    return (
        (-outer, outer, inner, outer),
        (-outer, outer, -outer, -inner),
        (inner, outer, -inner, inner),
        (-outer, -inner, gap, inner),
        (-outer, -inner, -inner, -gap),
    )


def default_task(task_id: int, **overrides) -> TaskSpec:
    """The four navigation layouts at full (repro) scale."""
    if task_id == 1:
        spec = TaskSpec(1, (-100.0, 0.0, 0.0, 0.0))
    elif task_id == 2:
        spec = TaskSpec(2, (-100.0, 0.0, 0.0, 0.0), ((-70.0, -30.0, -15.0, 15.0),))
    elif task_id == 3:
        spec = TaskSpec(
            3,
            (-50.0, 0.0, 0.0, 0.0),
            ((-35.0, -15.0, 2.0, 30.0), (-35.0, -15.0, -30.0, -2.0)),
        )
    elif task_id == 4:
        spec = TaskSpec(4, (-50.0, 0.0, 0.0, 0.0), _ring(15.0, 12.0, 2.0))
    else:
        raise ValueError(f"task_id must be 1..4, got {task_id}")
    return replace(spec, **overrides) if overrides else spec


def ci_task(task_id: int) -> TaskSpec:
    """Desk-scale variant: start moved to (-30, 0), geometry scaled alike, T=60."""
    full = default_task(task_id)
    return full.scaled(30.0 / abs(full.start[0]), T=60)


def step(spec: TaskSpec, state, control, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """One transition. ``noise`` overrides the sampled velocity noise when given."""
    state = np.asarray(state, dtype=float)
    u = np.clip(np.asarray(control, dtype=float), -spec.u_max, spec.u_max)
    if noise is None:
        noise = spec.sigma * rng.standard_normal(CONTROL_DIM) if spec.sigma > 0 else np.zeros(CONTROL_DIM)
    v = (1.0 - spec.psi) * state[2:] + u + noise
    return np.concatenate([state[:2] + v, v])


def in_goal(spec: TaskSpec, states) -> np.ndarray | bool:
    states = np.asarray(states, dtype=float)
    d = states[..., :2] - np.asarray(spec.goal_center)
    inside = np.sqrt((d * d).sum(axis=-1)) <= spec.goal_radius
    return bool(inside) if np.ndim(inside) == 0 else inside


def cost(spec: TaskSpec, state, control=None):
    """Indicator of being outside the goal set; ignores ``control``."""
    out = ~np.asarray(in_goal(spec, state))
    return int(out) if out.ndim == 0 else out.astype(int)


def feasible(spec: TaskSpec, states) -> np.ndarray | bool:
    """True where the position is outside every obstacle (boundaries collide)."""
    states = np.asarray(states, dtype=float)
    rects = spec.obstacle_array
    x = states[..., 0, None]
    y = states[..., 1, None]
    hit = (x >= rects[:, 0]) & (x <= rects[:, 1]) & (y >= rects[:, 2]) & (y <= rects[:, 3])
    ok = ~hit.any(axis=-1)
    return bool(ok) if np.ndim(ok) == 0 else ok


@dataclass
class Trajectory:
    """One episode: ``states`` has one more row than ``controls``.

    ``costs`` are the per-step indicator costs C(x_t) for t < len(controls).
    """

    states: np.ndarray
    controls: np.ndarray
    costs: np.ndarray
    success: bool
    violation: bool
    task_id: int = 0
    horizon: int = 0
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.controls)

    @property
    def iteration_cost(self) -> int:
        """Steps spent outside the goal; the horizon T for any failed episode."""
        return int(self.costs.sum()) if self.success else int(self.horizon)


class ControllerError(RuntimeError):
    pass


def episode_outcome(spec: TaskSpec, states: np.ndarray, violation: bool) -> tuple[bool, int]:
    """Success flag and reported iteration cost for a finished episode.

    Success needs the goal to be first reached at some step k < T with every
    later state, through step T, inside it; the reported cost is then k.
    Everything else reports the maximum cost T.
    """
    if violation or len(states) != spec.T + 1:
        return False, spec.T
    inside = np.asarray(in_goal(spec, states))
    hits = np.flatnonzero(inside)
    if hits.size == 0:
        return False, spec.T
    first = int(hits[0])
    if first >= spec.T or not inside[first:].all():
        return False, spec.T
    return True, first


def rollout_episode(
    spec: TaskSpec,
    controller: Callable[[np.ndarray, int], np.ndarray],
    rng: np.random.Generator,
    start=None,
) -> Trajectory:
    """Run up to ``T`` steps, stopping early on a constraint violation.

    ``controller(state, t)`` returns a control.
    """
    x = np.asarray(spec.start if start is None else start, dtype=float).copy()
    if start is None and spec.start_jitter_std > 0:
        x = x + spec.start_jitter_std * rng.standard_normal(STATE_DIM)
    states, controls = [x], []
    violation = False
    for t in range(spec.T):
        try:
            u = np.asarray(controller(x, t), dtype=float)
        except Exception as e:  # noqa: BLE001 - re-raised with context
            raise ControllerError(f"controller failed at step {t} of task {spec.task_id}: {e}") from e
        u = np.clip(u, -spec.u_max, spec.u_max)
        x = step(spec, x, u, rng)
        controls.append(u)
        states.append(x)
        if not feasible(spec, x):
            violation = True
            break
    return make_trajectory(spec, np.asarray(states), np.asarray(controls), violation)


def make_trajectory(spec: TaskSpec, states: np.ndarray, controls: np.ndarray, violation: bool | None = None) -> Trajectory:
    states = np.asarray(states, dtype=float).reshape(-1, STATE_DIM)
    controls = np.asarray(controls, dtype=float).reshape(-1, CONTROL_DIM)
    if violation is None:
        violation = not bool(np.all(feasible(spec, states)))
    success, _ = episode_outcome(spec, states, violation)
    costs = np.asarray(cost(spec, states[:-1])).reshape(-1)
    return Trajectory(states, controls, costs, success, violation, spec.task_id, spec.T)


def save_task(spec: TaskSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2)


def load_task(path) -> TaskSpec:
    with open(path) as fh:
        return TaskSpec.from_dict(json.load(fh))
