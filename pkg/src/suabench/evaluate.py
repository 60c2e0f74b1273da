"""Metrics, failure scores and abstention-threshold calibration.

Every failure score is oriented so that larger means "more likely wrong";
AUROC and selective accuracy share that convention.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .model import ModelParams, predict_batch
from .perturb import PerturbConfig, sample_perturbations
from .prob import ContractError, entropy_rows
from .sua import SuaConfig, score_batch
from .world import Example, World

DEFAULT_COVERAGES = (0.7, 0.8, 0.9)
SCORE_NAMES = ("entropy", "self_consistency", "temp_scaled_conf", "sua")


def ece(confidences: Sequence[float], correct: Sequence[bool], bins: int = 15) -> float:
    """Expected calibration error with equal-width bins on [0, 1].

    Bins are left-inclusive, except the last which also includes 1.0.

    Parameters
    ----------
    confidences : sequence of float
        Confidence of each prediction, in [0, 1].
    correct : sequence of bool
        Whether each prediction was right.
    bins : int
        Number of bins.

    Returns
    -------
    float
        ``sum_b |B_b|/n * |acc(B_b) - conf(B_b)|``.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ContractError("ece of empty input")
    if conf.shape != hit.shape:
        raise ContractError("confidences and correct must have equal lengths")
    if bins < 1:
        raise ContractError("bins must be >= 1")
    if conf.min() < 0.0 or conf.max() > 1.0:
        raise ContractError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    gap = np.abs(np.bincount(idx, weights=hit, minlength=bins)
                 - np.bincount(idx, weights=conf, minlength=bins))
    return float(min(gap.sum() / conf.size, 1.0))


def auroc(scores: Sequence[float], is_failure: Sequence[bool]) -> float:
    """Probability that a random failure outscores a random success (ties count 1/2).

    Raises
    ------
    ContractError
        If only one class is present; AUROC is undefined there.
    """
    s = np.asarray(scores, dtype=np.float64)
    f = np.asarray(is_failure, dtype=bool)
    if s.shape != f.shape or s.size == 0:
        raise ContractError("scores and labels must be non-empty and of equal length")
    if np.isnan(s).any():
        raise ContractError("NaN score")
    n_fail = int(f.sum())
    n_ok = f.size - n_fail
    if n_fail == 0 or n_ok == 0:
        raise ContractError("AUROC undefined: only one class present")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[f].sum() - n_fail * (n_fail + 1) / 2.0
    return float(u / (n_fail * n_ok))


def selective_accuracy(scores: Sequence[float], correct: Sequence[bool], coverage: float) -> float:
    """Accuracy over the ``ceil(c * n)`` lowest-scoring inputs (stable on ties)."""
    s = np.asarray(scores, dtype=np.float64)
    hit = np.asarray(correct, dtype=bool)
    if s.size == 0:
        raise ContractError("selective accuracy of empty input")
    if s.shape != hit.shape:
        raise ContractError("scores and correct must have equal lengths")
    if not 0.0 < coverage <= 1.0:
        raise ContractError("coverage must lie in (0, 1]")
    m = max(1, math.ceil(coverage * s.size - 1e-9))
    keep = np.argsort(s, kind="stable")[:m]
    return float(hit[keep].mean())


def calibrate_tau(scores: Sequence[float], target_coverage: float) -> float:
    """Lower empirical quantile, so that answering ``score <= tau`` covers about ``c``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ContractError("calibrate_tau of empty scores")
    if not 0.0 < target_coverage < 1.0:
        raise ContractError("target coverage must lie in (0, 1)")
    return float(np.quantile(s, target_coverage, method="lower"))


def coverage_at(scores: Sequence[float], tau: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return float(np.mean(s <= tau))


def robust_accuracy(model_params: ModelParams, world: World, examples: Sequence[Example],
                    perturb_config: PerturbConfig, rng: np.random.Generator) -> float:
    """Accuracy when each input is replaced by one draw from the perturbation mixture."""
    if not examples:
        raise ContractError("empty split")
    seqs = [e.tokens for e in examples]
    P = predict_batch(model_params, seqs)
    perturbed = [sample_perturbations(world, model_params, s, perturb_config, rng,
                                      base_probs=P[i], K=1)[0].tokens
                 for i, s in enumerate(seqs)]
    pred = np.argmax(predict_batch(model_params, perturbed), axis=1)
    return float(np.mean(pred == np.array([e.y for e in examples])))


@dataclass(frozen=True)
class ConfidenceMap:
    """``g(h) = 1 - h / h_max``: entropy mapped to a confidence in [0, 1]."""

    h_max: float

    def __post_init__(self):
        if not self.h_max > 0:
            raise ContractError("h_max must be positive")

    @classmethod
    def for_labels(cls, k: int) -> "ConfidenceMap":
        return cls(math.log(k))

    def __call__(self, h):
        return np.clip(1.0 - np.asarray(h, dtype=np.float64) / self.h_max, 0.0, 1.0)


@dataclass(frozen=True)
class CollapseThresholds:
    alpha_collapse: float
    beta_collapse: float

    def __post_init__(self):
        if not self.alpha_collapse > self.beta_collapse >= 0:
            raise ContractError("need alpha_collapse > beta_collapse >= 0")


@dataclass
class ScoreTable:
    """Per-input model outputs and all four failure scores for one split."""

    probs: np.ndarray
    labels: np.ndarray
    entropy: np.ndarray
    sensitivity: np.ndarray
    self_consistency: np.ndarray
    temp_scaled_conf: np.ndarray
    sua: np.ndarray
    temp_probs: np.ndarray

    @property
    def pred(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    @property
    def correct(self) -> np.ndarray:
        return self.pred == self.labels

    def score(self, name: str) -> np.ndarray:
        if name not in SCORE_NAMES:
            raise ContractError(f"unknown score {name!r}")
        return getattr(self, name)

    def subset(self, mask: np.ndarray) -> "ScoreTable":
        return ScoreTable(*(getattr(self, f)[mask] for f in self.__dataclass_fields__))


def self_consistency_scores(P: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """``1 - agreement``: share of K sampled labels that differ from their majority vote."""
    if K < 1:
        raise ContractError("K must be >= 1")
    n, k = P.shape
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    u = rng.random((n, K))
    draws = (u[:, :, None] >= cum[:, None, :]).sum(axis=2)
    counts = np.zeros((n, k))
    np.add.at(counts, (np.repeat(np.arange(n), K), draws.ravel()), 1.0)
    return 1.0 - counts.max(axis=1) / K


def baseline_scores(model_params: ModelParams, world: World, examples: Sequence[Example],
                    rng: np.random.Generator, temperature: float = 1.0,
                    sua_config: SuaConfig = SuaConfig(),
                    perturb_config: PerturbConfig = PerturbConfig(),
                    K_self: int = 10) -> ScoreTable:
    """Entropy, self-consistency, temperature-scaled confidence and SUA for every input."""
    if not examples:
        raise ContractError("empty split")
    seqs = [e.tokens for e in examples]
    P = predict_batch(model_params, seqs)
    PT = predict_batch(model_params.with_temperature(model_params.temperature * temperature), seqs)
    est = score_batch(model_params, world, seqs, sua_config, perturb_config, rng)
    return ScoreTable(
        probs=P,
        labels=np.array([e.y for e in examples]),
        entropy=entropy_rows(P),
        sensitivity=np.array([e.sensitivity_hat for e in est]),
        self_consistency=self_consistency_scores(P, K_self, rng),
        temp_scaled_conf=1.0 - PT.max(axis=1),
        sua=np.array([e.score for e in est]),
        temp_probs=PT,
    )


@dataclass
class MetricsReport:
    task: str
    method: str
    seed: int
    accuracy: float
    robust_accuracy: float
    ece: float  # NaN when the row has no calibrated distribution (self-consistency)
    auroc: float
    score: str
    selective_accuracy_at: dict[float, float] = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.accuracy, self.robust_accuracy, self.ece, self.auroc,
                  *self.selective_accuracy_at.values()):
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ContractError(f"metric {v} outside [0, 1]")

    def row(self, coverages: Sequence[float] = DEFAULT_COVERAGES) -> dict:
        out = {"task": self.task, "method": self.method, "seed": self.seed,
               "score": self.score, "accuracy": self.accuracy,
               "robust_accuracy": self.robust_accuracy, "ece": self.ece, "auroc": self.auroc}
        for c in coverages:
            out[f"sel_acc_{round(c * 100)}"] = self.selective_accuracy_at.get(c, float("nan"))
        return out


def metrics_from_table(table: ScoreTable, *, task: str, method: str, seed: int, score: str,
                       robust_acc: float, calibrated: bool = True, use_temp: bool = False,
                       coverages: Sequence[float] = DEFAULT_COVERAGES) -> MetricsReport:
    """Assemble one Table-2 row from a score table."""
    correct = table.correct
    s = table.score(score)
    probs = table.temp_probs if use_temp else table.probs
    e = ece(probs.max(axis=1), correct) if calibrated else float("nan")
    fail = ~correct
    a = auroc(s, fail) if 0 < fail.sum() < fail.size else float("nan")
    sel = {c: selective_accuracy(s, correct, c) for c in coverages}
    return MetricsReport(task, method, seed, float(correct.mean()), robust_acc, e, a, score, sel)


def rows_to_csv(rows: Sequence[dict]) -> str:
    """Stable CSV: columns in first-row order, floats with 10 significant digits."""
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
