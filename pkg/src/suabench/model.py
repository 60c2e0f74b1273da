"""Bag-of-embeddings classifier with hand-derived gradients.

Architecture: token embeddings -> mean pooling -> tanh hidden layer -> linear
logits -> ``softmax(logits / temperature)``.  All batch operations take a
list of integer sequences (lengths may differ).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .prob import ContractError

PARAM_NAMES = ("embeddings", "hidden_weights", "hidden_bias", "out_weights", "out_bias")


@dataclass
class ModelParams:
    embeddings: np.ndarray  # (V, d_emb)
    hidden_weights: np.ndarray  # (d_emb, d_hid)
    hidden_bias: np.ndarray  # (d_hid,)
    out_weights: np.ndarray  # (d_hid, k)
    out_bias: np.ndarray  # (k,)
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")

    @property
    def vocab_size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_labels(self) -> int:
        return self.out_bias.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()), temperature=self.temperature)

    def with_temperature(self, t: float) -> "ModelParams":
        return ModelParams(*self.arrays(), temperature=float(t))

    def to_dict(self) -> dict:
        out = {"temperature": self.temperature, "shapes": {}, "arrays": {}}
        for n in PARAM_NAMES:
            a = getattr(self, n)
            out["shapes"][n] = list(a.shape)
            out["arrays"][n] = a.ravel().tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        arrs = [np.array(d["arrays"][n], dtype=np.float64).reshape(d["shapes"][n]) for n in PARAM_NAMES]
        return cls(*arrs, temperature=float(d["temperature"]))


@dataclass
class Gradients:
    embeddings: np.ndarray
    hidden_weights: np.ndarray
    hidden_bias: np.ndarray
    out_weights: np.ndarray
    out_bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(*(np.zeros_like(a) for a in params.arrays()))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def scale(self, c: float) -> "Gradients":
        return Gradients(*(c * a for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


GradientVector = Gradients


@dataclass
class ForwardTrace:
    flat_tokens: np.ndarray  # all tokens concatenated
    segment: np.ndarray  # example index of each flat token
    lengths: np.ndarray  # (n,)
    pooled: np.ndarray  # (n, d_emb)
    pre: np.ndarray  # (n, d_hid)
    post: np.ndarray  # (n, d_hid)
    logits: np.ndarray  # (n, k)
    probs: np.ndarray  # (n, k)
    temperature: float


def init_params(vocab_size: int, num_labels: int, rng: np.random.Generator,
                d_emb: int = 16, d_hid: int = 32, scale: float = 0.1) -> ModelParams:
    u = lambda *shape: rng.uniform(-scale, scale, size=shape)
    return ModelParams(u(vocab_size, d_emb), u(d_emb, d_hid), u(d_hid), u(d_hid, num_labels),
                       u(num_labels))


def _encode(params: ModelParams, seqs: Sequence[Sequence[int]]):
    if len(seqs) == 0:
        raise ContractError("empty batch")
    if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
        n, L = seqs.shape
        if L == 0:
            raise ContractError("empty input sequence")
        lengths = np.full(n, L)
        flat = seqs.ravel().astype(np.int64)
    else:
        lengths = np.fromiter((len(s) for s in seqs), dtype=np.int64, count=len(seqs))
        if lengths.min() == 0:
            raise ContractError("empty input sequence")
        flat = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=int(lengths.sum()))
    if flat.min() < 0 or flat.max() >= params.vocab_size:
        raise ContractError("out-of-vocabulary token")
    segment = np.repeat(np.arange(lengths.size), lengths)
    return flat, segment, lengths


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(params: ModelParams, seqs) -> tuple[np.ndarray, ForwardTrace]:
    flat, segment, lengths = _encode(params, seqs)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    pooled = np.add.reduceat(params.embeddings[flat], offsets, axis=0) / lengths[:, None]
    pre = pooled @ params.hidden_weights + params.hidden_bias
    post = np.tanh(pre)
    logits = post @ params.out_weights + params.out_bias
    probs = softmax_rows(logits / params.temperature)
    return probs, ForwardTrace(flat, segment, lengths, pooled, pre, post, logits, probs,
                               params.temperature)


def predict_batch(params: ModelParams, seqs) -> np.ndarray:
    """Output distributions only (no trace); used wherever gradients are not needed."""
    return forward_batch(params, seqs)[0]


def forward(params: ModelParams, tokens: Sequence[int]) -> tuple[np.ndarray, ForwardTrace]:
    probs, trace = forward_batch(params, [tokens])
    return probs[0], trace


def backward(params: ModelParams, trace: ForwardTrace, dloss_dprobs: np.ndarray) -> Gradients:
    """Gradient of a scalar loss given its gradient with respect to the output probabilities."""
    G = np.asarray(dloss_dprobs, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape != trace.probs.shape:
        raise ContractError(f"dLoss/dDist has shape {G.shape}, expected {trace.probs.shape}")
    P = trace.probs
    dlogits = P * (G - np.sum(G * P, axis=1, keepdims=True)) / trace.temperature
    g_out_w = trace.post.T @ dlogits
    g_out_b = dlogits.sum(axis=0)
    dpre = (dlogits @ params.out_weights.T) * (1.0 - trace.post ** 2)
    g_hid_w = trace.pooled.T @ dpre
    g_hid_b = dpre.sum(axis=0)
    dpooled = dpre @ params.hidden_weights.T
    per_token = dpooled[trace.segment] / trace.lengths[trace.segment, None]
    g_emb = np.zeros_like(params.embeddings)
    np.add.at(g_emb, trace.flat_tokens, per_token)
    return Gradients(g_emb, g_hid_w, g_hid_b, g_out_w, g_out_b)


def apply_update(params: ModelParams, grads: Gradients, lr: float) -> None:
    """In-place plain gradient-descent step."""
    for name, g in zip(PARAM_NAMES, grads.arrays()):
        getattr(params, name)[...] -= lr * g


def predict_label(d) -> int:
    """Argmax with ties broken toward the lowest label index."""
    return int(np.argmax(np.asarray(d)))


def model_risk(d) -> float:
    """Expected 0-1 risk of the argmax prediction under the model's own distribution."""
    d = np.asarray(d, dtype=np.float64)
    return float(1.0 - d[predict_label(d)])


def model_risk_rows(P: np.ndarray) -> np.ndarray:
    return 1.0 - P.max(axis=-1)
