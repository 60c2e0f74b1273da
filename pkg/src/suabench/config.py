"""Run configuration: TOML file + command-line overrides -> validated nested configs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli

from .bounds import BoundConfig
from .experiments import TASKS, ExperimentConfig
from .perturb import PerturbConfig
from .prob import ContractError
from .sua import SuaConfig
from .train import TRAIN_METHODS, Method, TrainConfig
from .world import TASK_PRESETS, TaskSpec, task_spec

SECTIONS = ("task", "train", "perturb", "sua", "bounds")
ROOT_KEYS = ("seeds", "tasks", "methods", "coverages", "K_self", "output_dir")
# experiment-scale defaults; the dataclass defaults stay the library defaults
TRAIN_DEFAULTS = {"learning_rate": 0.5, "epochs": 30, "init_scale": 0.5}


class ConfigError(ContractError):
    """Malformed or inconsistent run configuration (CLI exit code 2)."""


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls) if f.init}


def _build(cls, values: dict, section: str):
    unknown = set(values) - _field_names(cls)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    tasks: tuple[str, ...] = TASKS
    task_overrides: dict = field(default_factory=dict, hash=False)
    methods: tuple[Method, ...] = TRAIN_METHODS
    seeds: tuple[int, ...] = (0, 1, 2)
    train: TrainConfig = TrainConfig(**TRAIN_DEFAULTS)
    perturb: PerturbConfig = PerturbConfig()
    sua: SuaConfig = SuaConfig()
    bounds: BoundConfig = BoundConfig()
    coverages: tuple[float, ...] = (0.7, 0.8, 0.9)
    K_self: int = 10
    output_dir: str = "runs"

    def task_specs(self) -> dict[str, TaskSpec]:
        return {t: task_spec(t, **self.task_overrides) for t in self.tasks}

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(tasks=self.tasks, methods=self.methods, seeds=self.seeds,
                                train=self.train, perturb=self.perturb, sua=self.sua,
                                coverages=self.coverages, K_self=self.K_self,
                                task_overrides=dict(self.task_overrides))

    def to_dict(self) -> dict:
        d = self.experiment().to_dict()
        d["bounds"] = self.bounds.to_dict()
        return d

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form; output_dir is not part of the identity."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"bad TOML in {path}: {exc}") from exc


def build_config(raw: dict | None = None, *, seed: int | None = None, out: str | None = None,
                 method: str | None = None, task: str | None = None,
                 coverage: float | None = None, tau: float | None = None, k: int | None = None,
                 lam: float | None = None) -> RunConfig:
    """Merge a parsed TOML mapping with flag overrides (flags win)."""
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS) - set(ROOT_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    sec = {s: dict(raw.get(s, {})) for s in SECTIONS}
    for s in SECTIONS:
        if not isinstance(raw.get(s, {}), dict):
            raise ConfigError(f"[{s}] must be a table")

    task_sec = sec["task"]
    tasks = raw.get("tasks")
    if "name" in task_sec:
        tasks = [task_sec.pop("name")]
    if task is not None:
        tasks = [task]
    tasks = tuple(tasks) if tasks else TASKS
    for t in tasks:
        if t not in TASK_PRESETS:
            raise ConfigError(f"unknown task {t!r}; choose from {sorted(TASK_PRESETS)}")
    unknown = set(task_sec) - _field_names(TaskSpec)
    if unknown:
        raise ConfigError(f"unknown key(s) in [task]: {sorted(unknown)}")
    task_overrides = {k_: (list(v) if isinstance(v, tuple) else v) for k_, v in task_sec.items()}

    methods = raw.get("methods")
    if method is not None:
        methods = [method]
    try:
        methods = tuple(Method(m) for m in methods) if methods else TRAIN_METHODS
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    seeds = (seed,) if seed is not None else tuple(int(s) for s in raw.get("seeds", (0, 1, 2)))
    if not seeds:
        raise ConfigError("at least one seed is required")

    train_vals = {**TRAIN_DEFAULTS, **sec["train"]}
    sua_vals = sec["sua"]
    bound_vals = sec["bounds"]
    perturb_vals = sec["perturb"]
    if k is not None:
        train_vals["K"] = k
        sua_vals["K"] = k
        perturb_vals["K"] = k
    if lam is not None:
        train_vals["lam"] = lam
        sua_vals["lam"] = lam
        bound_vals["lam"] = lam
    if tau is not None:
        sua_vals["tau"] = tau

    coverages = raw.get("coverages", (0.7, 0.8, 0.9))
    if coverage is not None:
        coverages = (coverage,)
    coverages = tuple(float(c) for c in coverages)
    if any(not 0.0 < c <= 1.0 for c in coverages):
        raise ConfigError("coverages must lie in (0, 1]")

    cfg = RunConfig(
        tasks=tasks, task_overrides=task_overrides, methods=methods, seeds=seeds,
        train=_build(TrainConfig, train_vals, "train"),
        perturb=_build(PerturbConfig, perturb_vals, "perturb"),
        sua=_build(SuaConfig, sua_vals, "sua"),
        bounds=_build(BoundConfig, bound_vals, "bounds"),
        coverages=coverages, K_self=int(raw.get("K_self", 10)),
        output_dir=out or raw.get("output_dir", "runs"),
    )
    try:
        cfg.task_specs()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [task]: {exc}") from exc
    return cfg


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, seeds=(seed,))
