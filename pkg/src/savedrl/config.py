"""Run configuration: profiles, JSON (de)serialization and dotted overrides.

A configuration is a tree of dataclasses. ``RunConfig.to_dict`` produces the
JSON written by ``print-config``; feeding that JSON back through
``RunConfig.from_dict`` reproduces the same effective configuration.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields, is_dataclass

from .controller import CemConfig, MODES, default_horizon
from .demos import DEFAULT_COUNTS
from .envs import TaskSpec, ci_task, default_task

PROFILES = ("repro", "ci")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: list[str] | str):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class EnsembleConfig:
    hidden: tuple = (500, 500, 500)
    n_members: int = 5
    epochs_init: int = 5
    epochs_iter: int = 5
    learning_rate: float = 7.5e-4
    batch_size: int = 32
    loss: str = "nll"


@dataclass
class DemoConfig:
    count: int | None = None  # None: the task's default count
    noise_std: float = 0.2
    detour_scale: float = 1.0
    seed: int = 1000
    path: str | None = None  # load instead of generating


@dataclass
class CloneConfig:
    hidden: tuple = (200, 200, 200)
    epochs: int = 50
    learning_rate: float = 3e-3
    batch_size: int = 32


@dataclass
class RunConfig:
    profile: str = "repro"
    task_id: int = 1
    mode: str = "saved"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_iterations: int = 50
    alpha: float = 3.0
    beta: float = 1.0
    safeset_buffer_size: int | None = None
    position_only: bool = False
    buffer_capacity: int | None = None
    checkpoint_every: int = 10
    eval_episodes: int = 20
    out_dir: str = "runs"
    task: dict = field(default_factory=dict)
    demos: DemoConfig = field(default_factory=DemoConfig)
    dynamics: EnsembleConfig = field(default_factory=EnsembleConfig)
    value: EnsembleConfig = field(
        default_factory=lambda: EnsembleConfig(epochs_init=30, epochs_iter=15, learning_rate=1e-3)
    )
    cem: CemConfig = field(default_factory=CemConfig)
    clone: CloneConfig = field(default_factory=CloneConfig)

    # --- derived views -----------------------------------------------------------

    @property
    def task_spec(self) -> TaskSpec:
        return TaskSpec.from_dict(self.task)

    @property
    def demo_count(self) -> int:
        return DEFAULT_COUNTS[self.task_id] if self.demos.count is None else self.demos.count

    def cem_config(self) -> CemConfig:
        return dataclasses.replace(self.cem, mode=self.mode, beta=self.beta)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        problems: list[str] = []
        cfg = _from_dict(cls, d, "", problems)
        if problems:
            raise ConfigError(problems)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        problems = []
        if self.profile not in PROFILES:
            problems.append(f"profile: must be one of {PROFILES}")
        if self.task_id not in (1, 2, 3, 4):
            problems.append("task_id: must be 1..4")
        if self.mode not in MODES:
            problems.append(f"mode: must be one of {MODES}")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            problems.append("seeds: need a non-empty list of non-negative integers")
        if self.n_iterations < 0:
            problems.append("n_iterations: must be non-negative")
        if not self.alpha > 0:
            problems.append("alpha: must be positive")
        if not 0 <= self.beta <= 1:
            problems.append("beta: must lie in [0, 1]")
        if self.checkpoint_every < 1:
            problems.append("checkpoint_every: must be positive")
        if self.demos.count is not None and self.demos.count < 1:
            problems.append("demos.count: must be positive")
        for name in ("dynamics", "value"):
            ens = getattr(self, name)
            if ens.n_members < 2:
                problems.append(f"{name}.n_members: need at least 2")
            if ens.loss not in ("nll", "mse"):
                problems.append(f"{name}.loss: must be 'nll' or 'mse'")
        if self.cem.n_particles % self.dynamics.n_members:
            problems.append("cem.n_particles: must be a multiple of dynamics.n_members")
        try:
            spec = self.task_spec
            if spec.task_id != self.task_id:
                problems.append("task.task_id: differs from task_id")
        except (ValueError, KeyError, TypeError) as e:
            problems.append(f"task: {e}")
        try:
            self.cem_config()
        except ValueError as e:
            problems.append(f"cem: {e}")
        if problems:
            raise ConfigError(problems)


def _to_jsonable(obj):
    if is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(value, tp, key: str, problems: list[str]):
    """Check ``value`` against annotation ``tp``; returns the converted value."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key, problems)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{key}: expected an object")
            return tp()
        return _from_dict(tp, value, key + ".", problems)
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    elif tp is tuple or origin is tuple:
        if isinstance(value, (list, tuple)) and all(isinstance(v, int) and v > 0 for v in value):
            return tuple(value)
    elif tp is list or origin is list:
        if isinstance(value, (list, tuple)):
            return list(value)
    elif tp is dict or origin is dict:
        if isinstance(value, dict):
            return dict(value)
    else:
        return value
    problems.append(f"{key}: expected {getattr(tp, '__name__', tp)}, got {value!r}")
    return value


def _from_dict(cls, d: dict, prefix: str, problems: list[str]):
    types = _field_types(cls)
    unknown = sorted(set(d) - set(types))
    problems.extend(f"{prefix}{k}: unknown key" for k in unknown)
    kwargs = {}
    for k, v in d.items():
        if k in types:
            kwargs[k] = _coerce(v, types[k], prefix + k, problems)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        problems.append(f"{prefix.rstrip('.') or cls.__name__}: {e}")
        return cls()


def profile_config(profile: str = "repro", task_id: int = 1, mode: str = "saved") -> RunConfig:
    """Built-in profile defaults for one task and mode."""
    if profile not in PROFILES:
        raise ConfigError(f"profile: must be one of {PROFILES}")
    if mode not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}")
    if task_id not in (1, 2, 3, 4):
        raise ConfigError("task_id: must be 1..4")
    horizon = default_horizon(mode, task_id)
    if profile == "repro":
        spec = default_task(task_id)
        cfg = RunConfig(profile=profile, task_id=task_id, mode=mode, task=spec.to_dict())
        cfg.cem = CemConfig(horizon=horizon, mode=mode)
    else:
        spec = ci_task(task_id)
        cfg = RunConfig(profile=profile, task_id=task_id, mode=mode, task=spec.to_dict(), n_iterations=10)
        small = dict(hidden=(128, 128), n_members=5)
        cfg.dynamics = EnsembleConfig(**small)
        cfg.value = EnsembleConfig(**small, epochs_init=30, epochs_iter=15, learning_rate=1e-3)
        # positions shrink with the geometry but the control box does not, so explore less
        cfg.cem = CemConfig(horizon=horizon, population=128, elites=13, n_particles=10, initial_std=0.25, mode=mode)
        cfg.clone = CloneConfig(hidden=(128, 128, 128))
        cfg.eval_episodes = 5
    cfg.validate()
    return cfg


def parse_value(text: str):
    """Parse an override value: JSON when it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key.sub=value`` overrides; all bad keys are reported together."""
    d = cfg.to_dict()
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"{item}: expected key=value")
            continue
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                problems.append(f"{key}: unknown key")
                node = None
                break
            node = node[p]
        if node is None:
            continue
        if parts[-1] not in node and parts[0] != "task":
            problems.append(f"{key}: unknown key")
            continue
        node[parts[-1]] = parse_value(raw)
    try:
        cfg = RunConfig.from_dict(d)
    except ConfigError as e:
        raise ConfigError(problems + e.problems) from None
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(d)
