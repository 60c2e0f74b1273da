"""Sensitivity estimation, the SUA score, SUA risk and threshold abstention."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .model import ModelParams, predict_batch, predict_label
from .perturb import PerturbConfig, Perturbation, gen_paraphrase, sample_perturbations
from .prob import ContractError, Divergence, divergence_rows, entropy, entropy_rows
from .world import World


@dataclass(frozen=True)
class SuaConfig:
    lam: float = 1.0
    divergence: Divergence = Divergence.JS
    K: int = 4
    tau: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "divergence", Divergence(self.divergence))
        if not self.lam > 0:
            raise ContractError("lambda must be positive")
        if self.K < 1:
            raise ContractError("K must be >= 1")


@dataclass(frozen=True)
class SuaEstimate:
    sensitivity_hat: float
    entropy: float
    score: float
    k_used: int
    per_perturbation_divergences: tuple[float, ...] = field(default=())


@dataclass(frozen=True)
class AbstentionOutcome:
    abstain: bool
    label: int | None
    diagnostics: SuaEstimate

    @property
    def decision(self) -> str:
        return "abstain" if self.abstain else f"answer({self.label})"


def sensitivity_hat(model_params: ModelParams, tokens: Sequence[int],
                    perturbations: Sequence[Perturbation | Sequence[int]],
                    divergence: Divergence = Divergence.JS,
                    base_probs: np.ndarray | None = None) -> tuple[float, list[float]]:
    """Mean divergence from the base output to each perturbed output."""
    if len(perturbations) == 0:
        raise ContractError("sensitivity needs at least one perturbation")
    seqs = [p.tokens if isinstance(p, Perturbation) else tuple(p) for p in perturbations]
    if base_probs is None:
        base_probs = predict_batch(model_params, [tokens])[0]
    divs = divergence_rows(divergence, base_probs, predict_batch(model_params, seqs))
    return float(divs.mean()), [float(d) for d in divs]


def sua_score(est_sensitivity: float, entropy_value: float, lam: float) -> float:
    if not lam > 0:
        raise ContractError("lambda must be positive")
    return est_sensitivity - lam * entropy_value


def sua_risk(scores: Sequence[float]) -> float:
    """Mean positive part of the SUA scores."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ContractError("sua_risk of an empty list")
    return float(np.maximum(s, 0.0).mean())


def estimate(model_params: ModelParams, world: World, tokens: Sequence[int], config: SuaConfig,
             perturb_config: PerturbConfig, rng: np.random.Generator) -> SuaEstimate:
    p = predict_batch(model_params, [tokens])[0]
    h = entropy(p)
    perts = sample_perturbations(world, model_params, tokens, perturb_config, rng, base_probs=p,
                                 K=config.K)
    s, divs = sensitivity_hat(model_params, tokens, perts, config.divergence, base_probs=p)
    return SuaEstimate(s, h, sua_score(s, h, config.lam), len(perts), tuple(divs))


def infer_with_abstention(model_params: ModelParams, world: World, tokens: Sequence[int],
                          config: SuaConfig, perturb_config: PerturbConfig,
                          rng: np.random.Generator) -> AbstentionOutcome:
    """Answer with the argmax label unless the estimated SUA score exceeds ``tau``."""
    est = estimate(model_params, world, tokens, config, perturb_config, rng)
    if est.score > config.tau:
        return AbstentionOutcome(True, None, est)
    label = predict_label(predict_batch(model_params, [tokens])[0])
    return AbstentionOutcome(False, label, est)


def score_batch(model_params: ModelParams, world: World, seqs: Sequence[Sequence[int]],
                config: SuaConfig, perturb_config: PerturbConfig,
                rng: np.random.Generator) -> list[SuaEstimate]:
    """SUA estimates for many inputs, one perturbation set per input."""
    P = predict_batch(model_params, seqs)
    H = entropy_rows(P)
    out = []
    for i, toks in enumerate(seqs):
        perts = sample_perturbations(world, model_params, toks, perturb_config, rng,
                                     base_probs=P[i], K=config.K)
        s, divs = sensitivity_hat(model_params, toks, perts, config.divergence, base_probs=P[i])
        out.append(SuaEstimate(s, float(H[i]), sua_score(s, float(H[i]), config.lam), len(perts),
                               tuple(divs)))
    return out


class ProxyMode(str, Enum):
    RESAMPLE = "resample"
    PARAPHRASE = "paraphrase"


def _hist_entropy(labels: np.ndarray, k: int) -> float:
    counts = np.bincount(labels, minlength=k).astype(float)
    return entropy(counts / counts.sum())


def ambiguity_proxy(model_params: ModelParams, world: World, tokens: Sequence[int],
                    K_samples: int, rng: np.random.Generator,
                    mode: ProxyMode | str = ProxyMode.PARAPHRASE,
                    perturb_config: PerturbConfig = PerturbConfig()) -> float:
    """Entropy of the empirical label histogram under resampling or paraphrasing."""
    if K_samples < 2:
        raise ContractError("ambiguity proxy needs K_samples >= 2")
    mode = ProxyMode(mode)
    k = model_params.num_labels
    if mode is ProxyMode.RESAMPLE:
        p = predict_batch(model_params, [tokens])[0]
        return _hist_entropy(rng.choice(k, size=K_samples, p=p), k)
    paras = [gen_paraphrase(world, tokens, rng, perturb_config).tokens for _ in range(K_samples)]
    labels = np.argmax(predict_batch(model_params, paras), axis=1)
    return _hist_entropy(labels, k)


SCORE_FIELDS = ("input_id", "sensitivity", "entropy", "score", "decision")


def score_rows_csv(rows: Sequence[tuple[int, SuaEstimate, str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_FIELDS)
    for input_id, est, decision in rows:
        w.writerow([input_id, f"{est.sensitivity_hat:.10g}", f"{est.entropy:.10g}",
                    f"{est.score:.10g}", decision])
    return buf.getvalue()


def decide(score: float, tau: float) -> bool:
    """True means abstain. The threshold is exclusive: only ``score > tau`` abstains."""
    if math.isnan(score):
        raise ContractError("NaN score")
    return score > tau
