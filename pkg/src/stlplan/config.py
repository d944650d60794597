"""Run configuration: one JSON document covering every module's settings."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .controller import ControllerConfig
from .planner import PlannerConfig
from .sim import EnvConfig
from .tasks import TASK_NAMES

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    name: str = "Cover"
    T: int = 20
    M: int = 3

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.name!r}")


@dataclass(frozen=True)
class ScheduleConfig:
    controller_steps: int = 50_000
    planner_updates: int = 200
    budget: int = 2_000_000
    map_pool: int = 1000
    probe_episodes: int = 100
    probe_every: int = 1
    threshold: float = 0.85
    converge_window: int = 3
    converge_tol: float = 0.05
    stop_on_convergence: bool = True
    eval_episodes: int = 200

    def __post_init__(self):
        if self.controller_steps <= 0 or self.planner_updates <= 0:
            raise ValueError("phase lengths must be positive")
        if self.budget < 0 or self.map_pool < 1 or self.probe_every < 1:
            raise ValueError("invalid schedule sizes")


@dataclass(frozen=True)
class MapConfig:
    path: str | None = None
    extent_m: tuple | None = None


SECTIONS = {
    "task": TaskConfig,
    "env": EnvConfig,
    "planner": PlannerConfig,
    "controller": ControllerConfig,
    "schedule": ScheduleConfig,
    "map": MapConfig,
}


@dataclass(frozen=True)
class RunConfig:
    task: TaskConfig = TaskConfig()
    env: EnvConfig = EnvConfig(border_walls=True)
    planner: PlannerConfig = PlannerConfig()
    controller: ControllerConfig = ControllerConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    map: MapConfig = MapConfig()
    seeds: tuple = (0, 1, 2, 3, 4)
    schema_version: int = SCHEMA_VERSION
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if self.planner.T != self.task.T:
            raise ConfigError("planner.T must equal task.T")
        if tuple(self.planner.extent) != tuple(self.env.extent):
            raise ConfigError("planner.extent must equal env.extent")

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["seeds"] = list(self.seeds)
        d["schema_version"] = self.schema_version
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def resolve(self, path: str | None) -> str | None:
        if path is None or os.path.isabs(path):
            return path
        return os.path.normpath(os.path.join(self.base_dir, path))


def _section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def desk_config(**overrides) -> RunConfig:
    """Default desk-scale setup (Cover task, 2.42 m maps, 5 obstacles)."""
    return replace(RunConfig(), **overrides)


def from_dict(data: dict, base_dir: str = ".") -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    allowed = set(SECTIONS) | {"seeds", "schema_version"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    base = RunConfig()
    kw = {}
    for name, cls in SECTIONS.items():
        if name in data:
            merged = asdict(getattr(base, name))
            merged.update(data[name] if isinstance(data[name], dict) else {"?": None})
            kw[name] = _section(cls, merged, name) if isinstance(data[name], dict) \
                else _section(cls, data[name], name)
    if "seeds" in data:
        seeds = data["seeds"]
        if not (isinstance(seeds, list) and all(isinstance(s, int) for s in seeds) and seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        kw["seeds"] = tuple(seeds)
    # keep horizon and extent consistent unless both were given explicitly
    task = kw.get("task", base.task)
    planner = kw.get("planner", base.planner)
    env = kw.get("env", base.env)
    if "planner" not in data or "T" not in data.get("planner", {}):
        planner = replace(planner, T=task.T)
    if "planner" not in data or "extent" not in data.get("planner", {}):
        planner = replace(planner, extent=env.extent)
    kw["planner"] = planner
    try:
        return RunConfig(base_dir=base_dir, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
