"""Finite-distribution arithmetic: entropy, KL / JS / TV divergences, smoothing.

All quantities are in nats. Scalar functions validate their inputs; the
``*_rows`` variants operate on 2-D arrays of already-valid distributions and
skip validation, for use in hot loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

LN2 = math.log(2.0)
SUM_ATOL = 1e-9


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


class Divergence(str, Enum):
    KL = "kl"
    JS = "js"
    TV = "tv"


@dataclass(frozen=True)
class SmoothingPolicy:
    """Floor applied to ``q`` before taking ``log q`` in KL."""

    floor: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.floor < 1e-3:
            raise ContractError(f"floor must lie in (0, 1e-3), got {self.floor}")


DEFAULT_POLICY = SmoothingPolicy()


def as_dist(p, atol: float = SUM_ATOL) -> np.ndarray:
    """Validate ``p`` as a probability vector and return it as float64."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ContractError(f"distribution must be a 1-D vector with k >= 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
        raise ContractError("distribution has negative or non-finite entries")
    if abs(arr.sum() - 1.0) > atol:
        raise ContractError(f"distribution sums to {arr.sum():.12g}, not 1")
    return arr


def _pair(p, q):
    p, q = as_dist(p), as_dist(q)
    if p.shape != q.shape:
        raise ContractError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return p, q


def _xlogy_ratio(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a * log(a / b) with the 0 * log 0 = 0 convention.  Callers guarantee b > 0
    # wherever a > 0, up to underflow of subnormal a; those terms are dropped.
    out = np.zeros(np.broadcast(a, b).shape)
    mask = (a > 0) & (b > 0)
    np.divide(a, b, out=out, where=mask)
    np.log(out, out=out, where=mask)
    return np.where(mask, a * out, 0.0)


def entropy(p) -> float:
    p = as_dist(p)
    h = float(-np.sum(_xlogy_ratio(p, np.ones_like(p))))
    return min(max(h, 0.0), math.log(p.size))


def kl(p, q, policy: SmoothingPolicy = DEFAULT_POLICY) -> float:
    """KL(p || q). ``q`` is floored and renormalised; ``kl(p, p)`` is exactly 0."""
    p, q = _pair(p, q)
    if np.array_equal(p, q):
        return 0.0
    if np.any(q < policy.floor):
        q = np.maximum(q, policy.floor)
        q = q / q.sum()
    return max(float(np.sum(_xlogy_ratio(p, q))), 0.0)


def js(p, q) -> float:
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    val = 0.5 * float(np.sum(_xlogy_ratio(p, m))) + 0.5 * float(np.sum(_xlogy_ratio(q, m)))
    return min(max(val, 0.0), LN2)


def tv(p, q) -> float:
    p, q = _pair(p, q)
    return min(0.5 * float(np.abs(p - q).sum()), 1.0)


def smooth(p, gamma: float) -> np.ndarray:
    """Mix ``p`` with the uniform distribution: ``(1 - gamma) p + gamma / k``."""
    p = as_dist(p)
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    if gamma == 0.0:
        return p.copy()
    if gamma == 1.0:
        return np.full_like(p, 1.0 / p.size)
    return (1.0 - gamma) * p + gamma / p.size


def divergence(kind: Divergence | str, p, q, policy: SmoothingPolicy = DEFAULT_POLICY) -> float:
    kind = Divergence(kind)
    if kind is Divergence.KL:
        return kl(p, q, policy)
    if kind is Divergence.JS:
        return js(p, q)
    return tv(p, q)


# --- vectorised row-wise variants (no validation) -------------------------

def entropy_rows(P: np.ndarray) -> np.ndarray:
    P = np.atleast_2d(P)
    return np.maximum(-np.sum(_xlogy_ratio(P, np.ones_like(P)), axis=-1), 0.0)


def divergence_rows(kind: Divergence | str, P: np.ndarray, Q: np.ndarray,
                    policy: SmoothingPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Row-wise divergence between broadcastable stacks of distributions."""
    kind = Divergence(kind)
    P, Q = np.broadcast_arrays(np.asarray(P, float), np.asarray(Q, float))
    if kind is Divergence.TV:
        return 0.5 * np.abs(P - Q).sum(axis=-1)
    if kind is Divergence.JS:
        M = 0.5 * (P + Q)
        val = 0.5 * _xlogy_ratio(P, M).sum(axis=-1) + 0.5 * _xlogy_ratio(Q, M).sum(axis=-1)
        return np.clip(val, 0.0, LN2)
    Qf = np.maximum(Q, policy.floor)
    Qf = Qf / Qf.sum(axis=-1, keepdims=True)
    Qf = np.where(np.all(Q >= policy.floor, axis=-1, keepdims=True), Q, Qf)
    val = np.maximum(_xlogy_ratio(P, Qf).sum(axis=-1), 0.0)
    return np.where(np.all(P == Q, axis=-1), 0.0, val)


def divergence_grad_p(kind: Divergence | str, P: np.ndarray, Q: np.ndarray,
                      policy: SmoothingPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Gradient of ``D(p || q)`` with respect to the entries of ``p`` (q held fixed).

    For TV the subgradient ``0.5 * sign(p - q)`` is returned.
    """
    kind = Divergence(kind)
    P, Q = np.broadcast_arrays(np.asarray(P, float), np.asarray(Q, float))
    if kind is Divergence.JS:
        M = 0.5 * (P + Q)
        return 0.5 * np.log(P / M)
    if kind is Divergence.TV:
        return 0.5 * np.sign(P - Q)
    Qf = np.maximum(Q, policy.floor)
    Qf = Qf / Qf.sum(axis=-1, keepdims=True)
    Qf = np.where(np.all(Q >= policy.floor, axis=-1, keepdims=True), Q, Qf)
    return np.log(P / Qf) + 1.0


def divergence_grad_q(kind: Divergence | str, P: np.ndarray, Q: np.ndarray,
                      policy: SmoothingPolicy = DEFAULT_POLICY) -> np.ndarray:
    """Gradient of ``D(p || q)`` with respect to the entries of ``q`` (p held fixed)."""
    kind = Divergence(kind)
    P, Q = np.broadcast_arrays(np.asarray(P, float), np.asarray(Q, float))
    if kind is Divergence.JS:
        M = 0.5 * (P + Q)
        return 0.5 * np.log(Q / M)
    if kind is Divergence.TV:
        return 0.5 * np.sign(Q - P)
    if np.any(Q < policy.floor):
        raise ContractError("KL gradient in q is undefined below the smoothing floor")
    return -P / Q


def entropy_grad(P: np.ndarray) -> np.ndarray:
    """Gradient of the Shannon entropy with respect to the entries of ``p``."""
    return -(np.log(P) + 1.0)
