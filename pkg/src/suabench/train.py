"""SUA-TR training and the baseline trainers.

The composite loss is ``L_task + alpha * L_cons + beta * L_ent``.  All three
terms depend on the model only through the base-input output distribution
(the perturbed side is stop-gradient), so one backward pass serves the whole
objective.  Optimisation is plain SGD.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .model import (Gradients, ModelParams, apply_update, backward, forward_batch, init_params,
                    predict_batch, softmax_rows)
from .perturb import PerturbConfig, sample_perturbations, worst_nll_perturbation
from .prob import (ContractError, Divergence, divergence_grad_p, divergence_grad_q,
                   divergence_rows, entropy_grad, entropy_rows)
from .world import Example, Split, World, by_split


class Method(str, Enum):
    STANDARD = "standard"
    ADVERSARIAL = "adversarial"
    SUA_TR = "sua_tr"
    SUA_TR_MINUS_ENT = "sua_tr_minus_ent"
    SUA_TR_MINUS_CONS = "sua_tr_minus_cons"


TRAIN_METHODS = tuple(Method)


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.SUA_TR
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    K: int = 4
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    divergence: Divergence = Divergence.JS
    ent_stop_gradient: bool = True
    d_emb: int = 16
    d_hid: int = 32
    init_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "divergence", Divergence(self.divergence))
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be non-negative")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not self.lam > 0:
            raise ContractError("lambda must be positive")
        if not self.init_scale > 0:
            raise ContractError("init_scale must be positive")
        if self.K < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ContractError("K, epochs and batch_size must be >= 1")

    def effective_weights(self) -> tuple[float, float]:
        """Consistency / entropy-alignment weights after the method's zeroing."""
        m = self.method
        if m in (Method.STANDARD, Method.ADVERSARIAL):
            return 0.0, 0.0
        if m is Method.SUA_TR_MINUS_ENT:
            return self.alpha, 0.0
        if m is Method.SUA_TR_MINUS_CONS:
            return 0.0, self.beta
        return self.alpha, self.beta

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["divergence"] = self.divergence.value
        return d


class TrainingDiverged(RuntimeError):
    pass


HISTORY_FIELDS = ("epoch", "task_loss", "cons_loss", "ent_loss", "total_loss", "train_accuracy")


@dataclass
class TrainHistory:
    task_loss: list[float]
    cons_loss: list[float]
    ent_loss: list[float]
    total_loss: list[float]
    train_accuracy: list[float]

    @classmethod
    def empty(cls) -> "TrainHistory":
        return cls([], [], [], [], [])

    def __len__(self) -> int:
        return len(self.total_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for e in range(len(self)):
            w.writerow([e + 1] + [f"{getattr(self, f)[e]:.10g}" for f in HISTORY_FIELDS[1:]])
        return buf.getvalue()


@dataclass(frozen=True)
class TempScaler:
    temperature: float

    def __post_init__(self):
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")

    def apply(self, params: ModelParams) -> ModelParams:
        return params.with_temperature(self.temperature)


Batch = Sequence[tuple[Sequence[int], int]]


def _unzip(batch) -> tuple[list, np.ndarray]:
    if len(batch) == 0:
        raise ContractError("empty batch")
    if isinstance(batch[0], Example):
        return [e.tokens for e in batch], np.array([e.y for e in batch])
    return [b[0] for b in batch], np.array([b[1] for b in batch])


@dataclass
class LossTerms:
    """Values and output-distribution gradients of the three loss components."""

    task: float
    cons: float
    ent: float
    g_task: np.ndarray
    g_cons: np.ndarray
    g_ent: np.ndarray
    g_ent_perturbed: np.ndarray | None  # (n, K, k) when gradients flow into the perturbed side
    scores: np.ndarray


def task_terms(P: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    n = P.shape[0]
    py = P[np.arange(n), labels]
    G = np.zeros_like(P)
    G[np.arange(n), labels] = -1.0 / (n * py)
    return float(-np.log(py).mean()), G


def alignment_terms(P: np.ndarray, Q: np.ndarray, lam: float, divergence: Divergence,
                    ent_stop_gradient: bool = True):
    """Consistency and entropy-alignment values plus gradients w.r.t. ``P`` (and ``Q``).

    ``P`` is (n, k); ``Q`` is (n, K, k) perturbed outputs treated as constants in the
    consistency term.
    """
    n, K = Q.shape[0], Q.shape[1]
    D = divergence_rows(divergence, P[:, None, :], Q)  # (n, K)
    sens = D.mean(axis=1)
    H = entropy_rows(P)
    dD = divergence_grad_p(divergence, P[:, None, :], Q).mean(axis=1)  # (n, k)
    cons = float(sens.mean())
    g_cons = dD / n
    scores = sens - lam * H
    active = (scores > 0).astype(float)[:, None]  # subgradient 0 at the kink
    ent = float(np.maximum(scores, 0.0).mean())
    g_ent = active * (dD - lam * entropy_grad(P)) / n
    g_q = None
    if not ent_stop_gradient:
        g_q = active[:, :, None] * divergence_grad_q(divergence, P[:, None, :], Q) / (n * K)
    return cons, g_cons, ent, g_ent, g_q, scores


def _perturbed_seqs(perturbations) -> tuple[list, int]:
    K = len(perturbations[0])
    if any(len(p) != K for p in perturbations):
        raise ContractError("every example needs the same number of perturbations")
    seqs = [getattr(p, "tokens", p) for row in perturbations for p in row]
    return seqs, K


def compute_terms(params: ModelParams, seqs, labels, perturbations, lam: float,
                  divergence: Divergence = Divergence.JS, ent_stop_gradient: bool = True):
    P, trace = forward_batch(params, seqs)
    task, g_task = task_terms(P, labels)
    q_trace = None
    if perturbations is None:
        z = np.zeros_like(P)
        return LossTerms(task, math.nan, math.nan, g_task, z, z, None, np.full(len(P), math.nan)), trace, None
    pseqs, K = _perturbed_seqs(perturbations)
    Qf, q_trace = forward_batch(params, pseqs)
    Q = Qf.reshape(len(seqs), K, -1)
    cons, g_cons, ent, g_ent, g_q, scores = alignment_terms(P, Q, lam, divergence,
                                                            ent_stop_gradient)
    return LossTerms(task, cons, ent, g_task, g_cons, g_ent, g_q, scores), trace, q_trace


def loss_task(params: ModelParams, batch) -> tuple[float, Gradients]:
    seqs, labels = _unzip(batch)
    P, trace = forward_batch(params, seqs)
    val, G = task_terms(P, labels)
    return val, backward(params, trace, G)


def loss_cons(params: ModelParams, batch, perturbations,
              divergence: Divergence = Divergence.JS) -> tuple[float, Gradients]:
    seqs, labels = _unzip(batch)
    terms, trace, _ = compute_terms(params, seqs, labels, perturbations, 1.0, divergence)
    return terms.cons, backward(params, trace, terms.g_cons)


def loss_ent(params: ModelParams, batch, perturbations, lam: float,
             divergence: Divergence = Divergence.JS,
             ent_stop_gradient: bool = True) -> tuple[float, Gradients]:
    seqs, labels = _unzip(batch)
    terms, trace, q_trace = compute_terms(params, seqs, labels, perturbations, lam, divergence,
                                          ent_stop_gradient)
    grads = backward(params, trace, terms.g_ent)
    if terms.g_ent_perturbed is not None:
        gq = terms.g_ent_perturbed.reshape(-1, terms.g_ent_perturbed.shape[-1])
        grads = grads + backward(params, q_trace, gq)
    return terms.ent, grads


def _check_finite(value: float, what: str, epoch: int, step: int):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} ({value}) at epoch {epoch}, step {step}")


def _epoch_accuracy(params: ModelParams, examples: Sequence[Example]) -> float:
    P = predict_batch(params, [e.tokens for e in examples])
    return float(np.mean(np.argmax(P, axis=1) == np.array([e.y for e in examples])))


def train(world: World, dataset: Sequence[Example], config: TrainConfig,
          perturb_config: PerturbConfig = PerturbConfig(),
          streams: dict[str, np.random.Generator] | None = None,
          on_epoch: Callable[[int, ModelParams, TrainHistory], None] | None = None,
          ) -> tuple[ModelParams, TrainHistory]:
    """SUA-TR (and its ablations / the NLL baseline) with plain SGD."""
    if config.method is Method.ADVERSARIAL:
        return adversarial_train(world, dataset, config, perturb_config, streams, on_epoch)
    from .rng import streams_for
    streams = streams or streams_for(config.seed)
    examples = by_split(dataset, Split.TRAIN)
    if not examples:
        raise ContractError("dataset has no train split")
    alpha, beta = config.effective_weights()
    use_perturbations = config.method is not Method.STANDARD
    pcfg = replace(perturb_config, K=config.K)
    params = init_params(world.vocab_size, world.num_labels, streams["init"],
                         d_emb=config.d_emb, d_hid=config.d_hid, scale=config.init_scale)
    hist = TrainHistory.empty()
    n = len(examples)
    for epoch in range(1, config.epochs + 1):
        order = streams["data"].permutation(n)
        sums = np.zeros(4)
        steps = 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            seqs = [e.tokens for e in batch]
            labels = np.array([e.y for e in batch])
            perts = None
            if use_perturbations:
                P0 = predict_batch(params, seqs)
                perts = [sample_perturbations(world, params, s, pcfg, streams["perturb"],
                                              base_probs=P0[i])
                         for i, s in enumerate(seqs)]
            terms, trace, q_trace = compute_terms(params, seqs, labels, perts, config.lam,
                                                  config.divergence, config.ent_stop_gradient)
            total = terms.task + (alpha * terms.cons + beta * terms.ent if use_perturbations else 0.0)
            _check_finite(total, "total loss", epoch, step)
            G = terms.g_task + alpha * terms.g_cons + beta * terms.g_ent
            grads = backward(params, trace, G)
            if terms.g_ent_perturbed is not None and beta != 0.0:
                gq = beta * terms.g_ent_perturbed.reshape(-1, world.num_labels)
                grads = grads + backward(params, q_trace, gq)
            if not grads.is_finite():
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, step {step}")
            apply_update(params, grads, config.learning_rate)
            sums += [terms.task, terms.cons, terms.ent, total]
            steps += 1
        means = sums / steps
        hist.task_loss.append(float(means[0]))
        hist.cons_loss.append(float(means[1]))
        hist.ent_loss.append(float(means[2]))
        hist.total_loss.append(float(means[3]))
        hist.train_accuracy.append(_epoch_accuracy(params, examples))
        if on_epoch is not None:
            on_epoch(epoch, params, hist)
    return params, hist


def adversarial_train(world: World, dataset: Sequence[Example], config: TrainConfig,
                      perturb_config: PerturbConfig = PerturbConfig(),
                      streams: dict[str, np.random.Generator] | None = None,
                      on_epoch: Callable[[int, ModelParams, TrainHistory], None] | None = None,
                      ) -> tuple[ModelParams, TrainHistory]:
    """NLL training on the worst-of-budget semantics-preserving perturbation of each example."""
    from .rng import streams_for
    streams = streams or streams_for(config.seed)
    examples = by_split(dataset, Split.TRAIN)
    if not examples:
        raise ContractError("dataset has no train split")
    params = init_params(world.vocab_size, world.num_labels, streams["init"],
                         d_emb=config.d_emb, d_hid=config.d_hid, scale=config.init_scale)
    hist = TrainHistory.empty()
    n = len(examples)
    for epoch in range(1, config.epochs + 1):
        order = streams["data"].permutation(n)
        total, steps = 0.0, 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            adv = [(worst_nll_perturbation(world, params, e.tokens, e.y, perturb_config,
                                           streams["perturb"]).tokens, e.y) for e in batch]
            val, grads = loss_task(params, adv)
            _check_finite(val, "adversarial task loss", epoch, step)
            apply_update(params, grads, config.learning_rate)
            total += val
            steps += 1
        mean = total / steps
        hist.task_loss.append(mean)
        hist.cons_loss.append(math.nan)
        hist.ent_loss.append(math.nan)
        hist.total_loss.append(mean)
        hist.train_accuracy.append(_epoch_accuracy(params, examples))
        if on_epoch is not None:
            on_epoch(epoch, params, hist)
    return params, hist


def _nll_at(logits: np.ndarray, labels: np.ndarray, t: float) -> float:
    P = softmax_rows(logits / t)
    return float(-np.log(P[np.arange(len(labels)), labels]).mean())


def golden_section(f: Callable[[float], float], lo: float, hi: float, iters: int = 80) -> float:
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def fit_temperature_logits(logits: np.ndarray, labels: np.ndarray) -> TempScaler:
    logits, labels = np.asarray(logits, float), np.asarray(labels)
    if logits.shape[0] == 0:
        raise ContractError("empty validation split")
    obj = lambda log_t: _nll_at(logits, labels, math.exp(log_t))
    best = golden_section(obj, -3.0, 3.0)
    if obj(best) > obj(0.0):
        best = 0.0
    return TempScaler(math.exp(best))


def fit_temperature(params: ModelParams, valid_split: Sequence[Example]) -> TempScaler:
    """Scalar temperature minimising validation NLL (golden-section over log T in [-3, 3])."""
    if len(valid_split) == 0:
        raise ContractError("empty validation split")
    _, trace = forward_batch(params.with_temperature(1.0), [e.tokens for e in valid_split])
    return fit_temperature_logits(trace.logits, np.array([e.y for e in valid_split]))
