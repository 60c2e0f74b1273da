"""Empirical checks of the robustness, selective-risk, collapse and smoothing bounds.

Each verifier returns a :class:`BoundReport` with one row per checked item.
Worst-case perturbed risk is estimated by a bounded search (the true supremum
is not computable), so small excesses of the left side over the right side are
logged rather than counted, as controlled by ``BoundConfig.search_slack``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .evaluate import CollapseThresholds, ConfidenceMap, ece
from .model import ModelParams, model_risk_rows, predict_batch
from .perturb import PerturbConfig, random_candidates, sample_perturbations
from .prob import ContractError, Divergence, divergence_rows, entropy_rows, js, smooth
from .world import Example, World, ground_truth


def psi_default(h):
    """``1 - exp(-h)``: concave, nondecreasing, zero at zero."""
    return 1.0 - np.exp(-np.asarray(h, dtype=np.float64))


@dataclass(frozen=True)
class BoundConfig:
    L_D: float = 1.0
    lam: float = 1.0
    divergence: Divergence = Divergence.TV
    tolerance: float = 1e-6
    search_slack: float = 0.05
    max_violation_rate: float = 0.01
    psi: Callable = field(default=psi_default, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "divergence", Divergence(self.divergence))
        if not self.lam > 0:
            raise ContractError("lambda must be positive")
        if self.L_D <= 0:
            raise ContractError("L_D must be positive")
        h = np.linspace(0.0, 5.0, 51)
        v = self.psi(h)
        if abs(float(v[0])) > 1e-12 or np.any(np.diff(v) < -1e-12) or np.any(np.diff(v, 2) > 1e-12):
            raise ContractError("psi must vanish at 0 and be nondecreasing and concave")

    def to_dict(self) -> dict:
        return {"L_D": self.L_D, "lam": self.lam, "divergence": self.divergence.value,
                "tolerance": self.tolerance, "search_slack": self.search_slack,
                "max_violation_rate": self.max_violation_rate}


@dataclass
class BoundReport:
    """Rows of per-item checks plus the aggregate verdict.

    ``violation_rate`` counts items whose slack is below ``-search_slack``
    (or ``-tolerance`` for exact identities); ``strict_violation_rate`` counts
    every item below ``-tolerance``.  ``asserted`` marks identity-level checks
    whose failure is a bug rather than an empirical finding.
    """

    theorem: str
    rows: list[dict]
    n_checked: int
    n_excluded: int
    n_violations: int
    n_logged: int
    asserted: bool
    threshold: float
    extras: dict = field(default_factory=dict)

    @property
    def violation_rate(self) -> float:
        return self.n_violations / self.n_checked if self.n_checked else 0.0

    @property
    def strict_violation_rate(self) -> float:
        return (self.n_violations + self.n_logged) / self.n_checked if self.n_checked else 0.0

    @property
    def passed(self) -> bool:
        return self.violation_rate <= self.threshold

    def summary(self) -> dict:
        return {"theorem": self.theorem, "n_checked": self.n_checked,
                "n_excluded": self.n_excluded, "n_violations": self.n_violations,
                "n_logged": self.n_logged, "violation_rate": self.violation_rate,
                "strict_violation_rate": self.strict_violation_rate,
                "threshold": self.threshold, "asserted": self.asserted, "passed": self.passed,
                **self.extras}

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


def _classify(slack: np.ndarray, tol: float, search_slack: float) -> tuple[int, int]:
    """(violations, logged residuals) under the search-slack policy."""
    below = slack < -tol
    counted = slack < -max(search_slack, tol)
    return int(counted.sum()), int((below & ~counted).sum())


@dataclass
class _PointwiseTerms:
    risk: np.ndarray
    entropy: np.ndarray
    sensitivity: np.ndarray
    sua: np.ndarray
    kappa: np.ndarray
    worst_risk: np.ndarray
    lam_ok: np.ndarray


def _pointwise_terms(model_params: ModelParams, world: World, examples: Sequence[Example],
                     bound_config: BoundConfig, perturb_config: PerturbConfig,
                     rng: np.random.Generator) -> _PointwiseTerms:
    seqs = [e.tokens for e in examples]
    P = predict_batch(model_params, seqs)
    R = model_risk_rows(P)
    H = entropy_rows(P)
    S = np.empty(len(seqs))
    worst = np.empty(len(seqs))
    kap = np.empty(len(seqs))
    for i, toks in enumerate(seqs):
        perts = sample_perturbations(world, model_params, toks, perturb_config, rng,
                                     base_probs=P[i])
        Q = predict_batch(model_params, [p.tokens for p in perts])
        S[i] = divergence_rows(bound_config.divergence, P[i], Q).mean()
        cands, tvs = random_candidates(world, toks, perturb_config.adv_search_budget,
                                       perturb_config.epsilon, rng)
        cands = cands[tvs <= perturb_config.semantic_tv_threshold]
        risks = [R[i], model_risk_rows(Q).max()]
        if len(cands):
            risks.append(model_risk_rows(predict_batch(model_params, cands)).max())
        worst[i] = max(risks)
        kap[i] = max(ground_truth(world, toks).bayes_risk - R[i], 0.0)
    lam = bound_config.lam
    lam_ok = lam * H >= bound_config.psi(H) - 1e-12
    return _PointwiseTerms(R, H, S, S - lam * H, kap, worst, lam_ok)


def verify_theorem1(model_params: ModelParams, world: World, examples: Sequence[Example],
                    bound_config: BoundConfig = BoundConfig(),
                    perturb_config: PerturbConfig = PerturbConfig(),
                    rng: np.random.Generator | None = None,
                    terms: _PointwiseTerms | None = None) -> BoundReport:
    """Pointwise robustness bound: worst perturbed risk <= R + L_D * SUA + kappa.

    The worst perturbed risk is the maximum model risk over ``x`` itself, the
    mixture draws used for the sensitivity estimate and ``adv_search_budget``
    random in-budget candidates that pass the semantic check.
    """
    if bound_config.divergence is not Divergence.TV:
        raise ContractError("the robustness bound is checked with total variation")
    rng = rng if rng is not None else np.random.default_rng(0)
    t = terms or _pointwise_terms(model_params, world, examples, bound_config, perturb_config, rng)
    rhs = t.risk + bound_config.L_D * t.sua + t.kappa
    slack = rhs - t.worst_risk
    ok = t.lam_ok
    n_viol, n_log = _classify(slack[ok], bound_config.tolerance, bound_config.search_slack)
    rows = [{"input_id": e.id, "lhs": float(t.worst_risk[i]), "rhs": float(rhs[i]),
             "slack": float(slack[i]), "risk": float(t.risk[i]), "sensitivity": float(t.sensitivity[i]),
             "entropy": float(t.entropy[i]), "sua": float(t.sua[i]), "kappa": float(t.kappa[i]),
             "lambda_condition": bool(ok[i])}
            for i, e in enumerate(examples)]
    return BoundReport("theorem1", rows, int(ok.sum()), int((~ok).sum()), n_viol, n_log,
                       asserted=False, threshold=bound_config.max_violation_rate,
                       extras={"min_slack": float(slack[ok].min()) if ok.any() else float("nan"),
                               "median_slack": float(np.median(slack[ok])) if ok.any() else float("nan")})


def verify_prop1(model_params: ModelParams, world: World, examples: Sequence[Example],
                 taus: Sequence[float], bound_config: BoundConfig = BoundConfig(),
                 perturb_config: PerturbConfig = PerturbConfig(),
                 rng: np.random.Generator | None = None,
                 terms: _PointwiseTerms | None = None) -> BoundReport:
    """Selective bound per threshold: mean worst risk over covered inputs vs. the bound.

    Covered inputs are those with ``SUA <= tau``; the bound is the covered mean
    of ``R``, plus ``L_D * tau``, plus the covered mean of ``kappa``.  With
    ``tau = inf`` every input is covered and ``tau`` is replaced by the SUA risk.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    t = terms or _pointwise_terms(model_params, world, examples, bound_config, perturb_config, rng)
    ok = t.lam_ok
    rows, slacks = [], []
    for tau in sorted(taus, reverse=True):
        cov = ok & (t.sua <= tau)
        n = int(cov.sum())
        if n == 0:
            rows.append({"tau": float(tau), "coverage": 0.0, "n_covered": 0, "selective_risk": float("nan"),
                         "bound": float("nan"), "slack": float("nan")})
            continue
        lhs = float(t.worst_risk[cov].mean())
        # tau = inf is the population form, where the SUA risk replaces tau
        tau_term = bound_config.L_D * (tau if math.isfinite(tau) else float(np.maximum(t.sua[cov], 0).mean()))
        bound = float(t.risk[cov].mean() + tau_term + t.kappa[cov].mean())
        rows.append({"tau": float(tau), "coverage": n / max(int(ok.sum()), 1), "n_covered": n,
                     "selective_risk": lhs, "bound": bound, "slack": bound - lhs})
        slacks.append(bound - lhs)
    n_viol, n_log = _classify(np.array(slacks), bound_config.tolerance, bound_config.search_slack)
    return BoundReport("prop1", rows, len(slacks), int((~ok).sum()), n_viol, n_log,
                       asserted=False, threshold=bound_config.max_violation_rate)


def verify_lemma1(world: World, model_params: ModelParams, thresholds: CollapseThresholds,
                  examples: Sequence[Example]) -> BoundReport:
    """On collapsed inputs (A > alpha, H < beta): |H - U*| >= alpha - beta - eta."""
    a, b = thresholds.alpha_collapse, thresholds.beta_collapse
    H = entropy_rows(predict_batch(model_params, [e.tokens for e in examples])) if examples else []
    rows = []
    for e, h in zip(examples, H):
        g = ground_truth(world, e.tokens)
        if not (g.ambiguity_A > a and h < b):
            continue
        gap = abs(h - g.true_uncertainty_U)
        need = a - b - g.eta
        rows.append({"input_id": e.id, "ambiguity": g.ambiguity_A, "entropy": float(h),
                     "true_uncertainty": g.true_uncertainty_U, "eta": g.eta, "gap": gap,
                     "required": need, "slack": gap - need})
    n_viol = sum(r["slack"] < -1e-9 for r in rows)
    return BoundReport("lemma1", rows, len(rows), len(examples) - len(rows), n_viol, 0,
                       asserted=True, threshold=0.0)


def verify_lemma2(rng: np.random.Generator, n_trials: int = 10_000,
                  k_range: tuple[int, int] = (2, 8)) -> BoundReport:
    """Uniform smoothing contracts JS by (1 - gamma) and never lowers the 0-1 model risk.

    The empirical ratio ``js' / js`` is compared against ``(1 - gamma)^2`` and
    reported only.
    """
    rows = []
    n_viol = 0
    above_sq = 0
    max_excess_sq = -np.inf
    for _ in range(n_trials):
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        p, q = rng.dirichlet(np.full(k, 0.5)), rng.dirichlet(np.full(k, 0.5))
        g = float(rng.random())
        ps, qs = smooth(p, g), smooth(q, g)
        d, ds = js(p, q), js(ps, qs)
        r, rs = 1.0 - p.max(), 1.0 - ps.max()
        div_ok = ds <= (1.0 - g) * d + 1e-12
        risk_ok = rs >= r - 1e-12
        n_viol += not (div_ok and risk_ok)
        ratio = ds / d if d > 0 else float("nan")
        if d > 0:
            above_sq += int(ratio > (1.0 - g) ** 2 + 1e-12)
            max_excess_sq = max(max_excess_sq, ratio - (1.0 - g) ** 2)
        rows.append({"k": k, "gamma": g, "js": d, "js_smoothed": ds, "ratio": ratio,
                     "risk": r, "risk_smoothed": rs, "div_ok": bool(div_ok), "risk_ok": bool(risk_ok)})
    return BoundReport("lemma2", rows, n_trials, 0, int(n_viol), 0, asserted=True, threshold=0.0,
                       extras={"share_ratio_above_one_minus_gamma_sq": above_sq / n_trials,
                               "max_ratio_minus_one_minus_gamma_sq": float(max_excess_sq)})


def verify_theorem2(model_params: ModelParams, examples: Sequence[Example],
                    sensitivities: Sequence[float], confidence_map: ConfidenceMap,
                    bins: int = 15, lam: float = 1.0) -> BoundReport:
    """Reporting harness: ECE under ``g(H)`` against ``(1/B) sum_b (S_b - lam H_b)_+``.

    Per-bin slack terms have no constructive definition, so the inequality is
    reported with zero slack terms and per-bin residuals; nothing is asserted.
    """
    seqs = [e.tokens for e in examples]
    P = predict_batch(model_params, seqs)
    H = entropy_rows(P)
    S = np.asarray(sensitivities, dtype=np.float64)
    if S.shape != H.shape:
        raise ContractError("one sensitivity per input required")
    conf = confidence_map(H)
    correct = np.argmax(P, axis=1) == np.array([e.y for e in examples])
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    rows = []
    terms = []
    for b in range(bins):
        m = idx == b
        n = int(m.sum())
        s_b = float(S[m].mean()) if n else 0.0
        h_b = float(H[m].mean()) if n else 0.0
        term = max(s_b - lam * h_b, 0.0) if n else 0.0
        gap = float(abs(correct[m].mean() - conf[m].mean())) if n else 0.0
        terms.append(term)
        rows.append({"bin": b, "count": n, "mean_sensitivity": s_b, "mean_entropy": h_b,
                     "bound_term": term, "calibration_gap": gap, "residual": gap - term})
    measured = ece(conf, correct, bins)
    bound = float(np.mean(terms))
    return BoundReport("theorem2", rows, len(examples), 0, 0, 0, asserted=False, threshold=1.0,
                       extras={"ece": measured, "bound_value": bound,
                               "ece_exceeds_bound": bool(measured >= bound)})
