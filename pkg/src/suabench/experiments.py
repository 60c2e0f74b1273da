"""Experiment matrix, ablations and score-stability sweeps.

A *cell* is one (task, method, seed) triple: build the world, sample data,
train, fit a temperature on validation, score the evaluation split.  Cells are
independent: each draws from its own named streams of its own seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .evaluate import (DEFAULT_COVERAGES, ScoreTable, baseline_scores, metrics_from_table,
                       robust_accuracy)
from .model import ModelParams
from .perturb import PerturbConfig
from .rng import stream
from .sua import SuaConfig, score_batch
from .train import Method, TRAIN_METHODS, TrainConfig, TrainHistory, fit_temperature, train
from .world import Example, Split, World, build_world, by_split, eval_split, sample_dataset, task_spec

TASKS = ("factual", "ambiguous", "shifted")
# failure score reported in each method's own row
METHOD_SCORE = {Method.STANDARD: "entropy", Method.ADVERSARIAL: "entropy", Method.SUA_TR: "sua",
                Method.SUA_TR_MINUS_ENT: "sua", Method.SUA_TR_MINUS_CONS: "sua"}
METRIC_KEYS = ("accuracy", "robust_accuracy", "ece", "auroc")


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[str, ...] = TASKS
    methods: tuple[Method, ...] = TRAIN_METHODS
    seeds: tuple[int, ...] = (0, 1, 2)
    train: TrainConfig = TrainConfig(learning_rate=0.5, epochs=30, init_scale=0.5)
    perturb: PerturbConfig = PerturbConfig()
    sua: SuaConfig = SuaConfig()
    coverages: tuple[float, ...] = DEFAULT_COVERAGES
    K_self: int = 10
    task_overrides: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))

    def to_dict(self) -> dict:
        return {"tasks": list(self.tasks), "methods": [m.value for m in self.methods],
                "seeds": list(self.seeds), "train": self.train.to_dict(),
                "perturb": {"epsilon": self.perturb.epsilon, "weights": list(self.perturb.weights),
                            "K": self.perturb.K, "semantic_tv_threshold": self.perturb.semantic_tv_threshold,
                            "adv_search_budget": self.perturb.adv_search_budget},
                "sua": {"lam": self.sua.lam, "divergence": self.sua.divergence.value, "K": self.sua.K},
                "coverages": list(self.coverages), "K_self": self.K_self,
                "task_overrides": self.task_overrides}


def prepare_task(task: str, seed: int, **overrides) -> tuple[World, list[Example]]:
    spec = task_spec(task, **overrides)
    world = build_world(spec, seed)
    return world, sample_dataset(world, rng=stream(seed, "data"))


@dataclass
class CellResult:
    task: str
    method: Method
    seed: int
    params: ModelParams
    history: TrainHistory
    temperature: float
    table: ScoreTable
    eval_examples: list[Example]
    rows: list[dict]


def evaluate_cell(world: World, dataset: Sequence[Example], params: ModelParams, temperature: float,
                  task: str, method: Method, seed: int, cfg: ExperimentConfig,
                  ) -> tuple[ScoreTable, list[Example], list[dict]]:
    """Score the evaluation split and build this cell's metric rows."""
    examples = by_split(dataset, eval_split(world.spec))
    rng = stream(seed, "eval")
    rob = robust_accuracy(params, world, examples, cfg.perturb, rng)
    table = baseline_scores(params, world, examples, rng, temperature, cfg.sua, cfg.perturb,
                            cfg.K_self)
    common = dict(task=task, seed=seed, robust_acc=rob, coverages=cfg.coverages)
    rows = [metrics_from_table(table, method=method.value, score=METHOD_SCORE[method], **common)]
    if method is Method.STANDARD:
        rows.append(metrics_from_table(table, method="temp_scale", score="temp_scaled_conf",
                                       use_temp=True, **common))
        rows.append(metrics_from_table(table, method="self_consistency", score="self_consistency",
                                       calibrated=False, **common))
    return table, examples, [r.row(cfg.coverages) for r in rows]


def run_cell(task: str, method: Method | str, seed: int, cfg: ExperimentConfig,
             prepared: tuple[World, list[Example]] | None = None) -> CellResult:
    method = Method(method)
    world, dataset = prepared or prepare_task(task, seed, **cfg.task_overrides)
    tcfg = replace(cfg.train, method=method, seed=seed)
    params, hist = train(world, dataset, tcfg, cfg.perturb)
    temp = fit_temperature(params, by_split(dataset, Split.VALID)).temperature
    table, examples, rows = evaluate_cell(world, dataset, params, temp, task, method, seed, cfg)
    return CellResult(task, method, seed, params, hist, temp, table, examples, rows)


@dataclass
class MatrixResult:
    config: ExperimentConfig
    cells: dict[tuple[str, str, int], CellResult]
    worlds: dict[tuple[str, int], World]

    @property
    def rows(self) -> list[dict]:
        return [r for key in sorted(self.cells) for r in self.cells[key].rows]

    def cell(self, task: str, method: Method | str, seed: int) -> CellResult:
        return self.cells[(task, Method(method).value, seed)]


def run_matrix(cfg: ExperimentConfig,
               on_cell: Callable[[CellResult], None] | None = None) -> MatrixResult:
    cells, worlds = {}, {}
    for task in cfg.tasks:
        for seed in cfg.seeds:
            prepared = prepare_task(task, seed, **cfg.task_overrides)
            worlds[(task, seed)] = prepared[0]
            for method in cfg.methods:
                res = run_cell(task, method, seed, cfg, prepared)
                cells[(task, method.value, seed)] = res
                if on_cell is not None:
                    on_cell(res)
    return MatrixResult(cfg, cells, worlds)


def seed_average(rows: Sequence[dict], keys: Sequence[str] = METRIC_KEYS) -> list[dict]:
    """Mean, min and max over seeds for each (task, method) pair, in first-seen order."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["task"], r["method"]), []).append(r)
    out = []
    for (task, method), rs in groups.items():
        row = {"task": task, "method": method, "n_seeds": len(rs)}
        for k in keys:
            vals = np.array([r[k] for r in rs], dtype=np.float64)
            row[k] = float(np.mean(vals))
            row[f"{k}_min"] = float(np.min(vals))
            row[f"{k}_max"] = float(np.max(vals))
        out.append(row)
    return out


def sel_keys(coverages: Sequence[float]) -> list[str]:
    return [f"sel_acc_{round(c * 100)}" for c in coverages]


# --- score-level sweeps ------------------------------------------------------

def k_spearman(params: ModelParams, world: World, examples: Sequence[Example],
               Ks: Sequence[int] = (1, 2, 4, 8), K_oracle: int = 64,
               sua_config: SuaConfig = SuaConfig(), perturb_config: PerturbConfig = PerturbConfig(),
               seed: int = 0) -> list[dict]:
    """Spearman correlation of SUA scores at each K against a large-K reference."""
    seqs = [e.tokens for e in examples]
    rng = stream(seed, "eval")
    oracle = [e.score for e in score_batch(params, world, seqs, replace(sua_config, K=K_oracle),
                                           perturb_config, rng)]
    rows = []
    for K in Ks:
        est = [e.score for e in score_batch(params, world, seqs, replace(sua_config, K=K),
                                            perturb_config, rng)]
        rows.append({"K": int(K), "spearman": float(spearmanr(est, oracle).statistic),
                     "K_oracle": int(K_oracle)})
    return rows


def coverage_sweep(table: ScoreTable, coverages: Sequence[float] = DEFAULT_COVERAGES,
                   scores: Sequence[str] = ("sua", "entropy")) -> list[dict]:
    from .evaluate import selective_accuracy
    return [{"coverage": c, "score": s, "selective_accuracy": selective_accuracy(
        table.score(s), table.correct, c)} for c in coverages for s in scores]


def is_nonincreasing(values: Sequence[float], tol: float = 0.0) -> bool:
    return all(b <= a + tol for a, b in zip(values, values[1:]))


def is_nondecreasing(values: Sequence[float], tol: float = 0.0) -> bool:
    return all(b >= a - tol for a, b in zip(values, values[1:]))


def mean_finite(values: Sequence[float]) -> float:
    v = [x for x in values if not math.isnan(x)]
    return float(np.mean(v)) if v else float("nan")


def collapsed_params(world: World, rng: np.random.Generator, label: int = 0,
                     margin: float = 30.0) -> ModelParams:
    """A model that puts almost all mass on one label whatever the input."""
    from .model import init_params
    params = init_params(world.vocab_size, world.num_labels, rng)
    params.out_weights[...] = 0.0
    params.out_bias[...] = 0.0
    params.out_bias[label] = margin
    return params


def lemma1_setup(seed: int, n: int = 1000, ambiguous_fraction: float = 0.6
                 ) -> tuple[World, list[Example], ModelParams]:
    """Deterministic-emission world whose ambiguous cues carry ln 3 nats, plus a collapsed model."""
    spec = task_spec("ambiguous", ambiguous_fraction=ambiguous_fraction,
                     interpretation_set_sizes=(3,), ambiguity_level=math.log(3.0),
                     emission_noise=0.0, sizes=(10, 10, n, 10))
    world = build_world(spec, seed)
    examples = by_split(sample_dataset(world, rng=stream(seed, "data")), Split.TEST)
    return world, examples, collapsed_params(world, stream(seed, "init"))
