"""Semantics-preserving perturbations: paraphrase, token edit and adversarial search.

The perturbation ball is a Hamming ball: at most ``epsilon`` positions are
substituted, length is preserved.  Replacements come from the input's own
vocabulary region, so training-time perturbations never expose the held-out
region.  Every emitted perturbation is checked
against the world oracle: the total variation between ``p(z | x')`` and
``p(z | x)`` must not exceed ``semantic_tv_threshold``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .model import ModelParams, predict_batch
from .prob import ContractError, Divergence, divergence_rows
from .world import CUE, CUE_POS, NOISE, World


class Strategy(str, Enum):
    PARAPHRASE = "paraphrase"
    TOKEN_EDIT = "token_edit"
    ADVERSARIAL = "adversarial"


STRATEGIES = tuple(Strategy)


@dataclass(frozen=True)
class PerturbConfig:
    epsilon: int = 2
    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    K: int = 4
    semantic_tv_threshold: float = 0.01
    adv_search_budget: int = 32

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != 3 or min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ContractError(f"mixture weights must be 3 non-negative reals summing to 1, got {self.weights}")
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if self.epsilon < 1:
            raise ContractError("epsilon must be >= 1")
        if self.adv_search_budget < 1:
            raise ContractError("adv_search_budget must be >= 1")


@dataclass(frozen=True)
class Perturbation:
    tokens: tuple[int, ...]
    strategy: Strategy
    semantic_tv: float
    flagged: bool = False  # identity fallback: nothing eligible to edit

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "strategy": self.strategy.value,
                "semantic_tv": self.semantic_tv, "flagged": self.flagged}


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Hamming distance; sequences in the perturbation ball share a length."""
    if len(a) != len(b):
        raise ContractError("perturbations preserve length")
    return int(sum(x != y for x, y in zip(a, b)))


def semantic_tv(world: World, source: Sequence[int], perturbed: Sequence[int]) -> float:
    p, q = world.interpretation_prior(source), world.interpretation_prior(perturbed)
    return float(0.5 * np.abs(p - q).sum())


def _finish(world, tokens, new, strategy, config, flagged=False) -> Perturbation | None:
    tv = semantic_tv(world, tokens, new)
    if tv > config.semantic_tv_threshold:
        return None
    return Perturbation(tuple(int(t) for t in new), strategy, tv, flagged)


def _identity(world, tokens, strategy) -> Perturbation:
    return Perturbation(tuple(int(t) for t in tokens), strategy, 0.0, flagged=True)


def gen_paraphrase(world: World, tokens: Sequence[int], rng: np.random.Generator,
                   config: PerturbConfig = PerturbConfig()) -> Perturbation:
    """Swap up to ``epsilon`` non-cue tokens for other members of their synonym class."""
    arr = np.asarray(tokens, dtype=np.int64)
    allowed = world.same_region(world.region_of(arr))
    options = {i: [t for t in world.class_members[world.token_class[arr[i]]]
                   if t != arr[i] and allowed[t]]
               for i in range(arr.size) if i != CUE_POS}
    eligible = [i for i, opts in options.items() if opts]
    if not eligible:
        return _identity(world, tokens, Strategy.PARAPHRASE)
    n = int(rng.integers(1, min(config.epsilon, len(eligible)) + 1))
    new = arr.copy()
    for i in rng.choice(eligible, size=n, replace=False):
        new[i] = options[i][int(rng.integers(len(options[i])))]
    out = _finish(world, tokens, new, Strategy.PARAPHRASE, config)
    return out if out is not None else _identity(world, tokens, Strategy.PARAPHRASE)


def gen_token_edit(world: World, tokens: Sequence[int], rng: np.random.Generator,
                   config: PerturbConfig = PerturbConfig()) -> Perturbation:
    """Overwrite up to ``epsilon`` non-cue positions with noise tokens."""
    arr = np.asarray(tokens, dtype=np.int64)
    eligible = [i for i in range(arr.size) if i != CUE_POS]
    if not eligible:
        return _identity(world, tokens, Strategy.TOKEN_EDIT)
    noise = world.tokens_of(NOISE)
    n = int(rng.integers(1, min(config.epsilon, len(eligible)) + 1))
    new = arr.copy()
    pos = rng.choice(eligible, size=n, replace=False)
    new[pos] = rng.choice(noise, size=n)
    out = _finish(world, tokens, new, Strategy.TOKEN_EDIT, config)
    return out if out is not None else _identity(world, tokens, Strategy.TOKEN_EDIT)


def random_candidates(world: World, tokens: Sequence[int], n: int, epsilon: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` random in-budget substitutions and the exact semantic TV of each.

    Position 0 may only receive cue tokens; other positions receive any non-cue token
    from the input's vocabulary region.
    Returns the candidate matrix ``(n, L)`` and a ``(n,)`` array of TV distances.
    """
    arr = np.asarray(tokens, dtype=np.int64)
    L = arr.size
    cues = world.tokens_of(CUE)
    others = np.flatnonzero((world.token_kind != CUE) & world.same_region(world.region_of(arr)))
    n_edits = rng.integers(1, min(epsilon, L) + 1, size=n)
    # rank of each position in a random permutation per row; edit the lowest-ranked ones
    ranks = np.argsort(np.argsort(rng.random((n, L)), axis=1), axis=1)
    edit = ranks < n_edits[:, None]
    repl = others[rng.integers(others.size, size=(n, L))]
    repl[:, CUE_POS] = cues[rng.integers(cues.size, size=n)]
    cands = np.where(edit, repl, arr[None, :])
    base = world.interpretation_prior(arr)
    cue_tok = cands[:, CUE_POS]
    is_cue = world.token_kind[cue_tok] == CUE
    priors = np.where(is_cue[:, None], world.cue_prior[world.token_class[cue_tok]],
                      1.0 / world.num_interpretations)
    tvs = 0.5 * np.abs(priors - base).sum(axis=1)
    return cands, tvs


def gen_adversarial(world: World, model_params: ModelParams, tokens: Sequence[int],
                    config: PerturbConfig, rng: np.random.Generator,
                    base_probs: np.ndarray | None = None,
                    divergence: Divergence = Divergence.JS) -> Perturbation:
    """Random search for the semantics-preserving edit that most moves the model output."""
    cands, tvs = random_candidates(world, tokens, config.adv_search_budget, config.epsilon, rng)
    ok = tvs <= config.semantic_tv_threshold
    if not ok.any():
        p = gen_token_edit(world, tokens, rng, config)
        return p
    cands, tvs = cands[ok], tvs[ok]
    if base_probs is None:
        base_probs = predict_batch(model_params, [tokens])[0]
    divs = divergence_rows(divergence, base_probs, predict_batch(model_params, cands))
    best = int(np.argmax(divs))
    return Perturbation(tuple(int(t) for t in cands[best]), Strategy.ADVERSARIAL, float(tvs[best]))


def worst_nll_perturbation(world: World, model_params: ModelParams, tokens: Sequence[int],
                           label: int, config: PerturbConfig,
                           rng: np.random.Generator) -> Perturbation:
    """Inner maximisation of the adversarial-training baseline (worst-of-budget NLL)."""
    cands, tvs = random_candidates(world, tokens, config.adv_search_budget, config.epsilon, rng)
    ok = tvs <= config.semantic_tv_threshold
    if not ok.any():
        return gen_token_edit(world, tokens, rng, config)
    cands, tvs = cands[ok], tvs[ok]
    nll = -np.log(predict_batch(model_params, cands)[:, label])
    best = int(np.argmax(nll))
    return Perturbation(tuple(int(t) for t in cands[best]), Strategy.ADVERSARIAL, float(tvs[best]))


def draw_strategy(config: PerturbConfig, rng: np.random.Generator) -> Strategy:
    u = rng.random()
    cum = 0.0
    for s, w in zip(STRATEGIES, config.weights):
        cum += w
        if u < cum and w > 0:
            return s
    return STRATEGIES[max(i for i, w in enumerate(config.weights) if w > 0)]


def sample_perturbations(world: World, model_params: ModelParams | None, tokens: Sequence[int],
                         config: PerturbConfig, rng: np.random.Generator,
                         base_probs: np.ndarray | None = None,
                         K: int | None = None) -> list[Perturbation]:
    """``K`` independent draws from the three-strategy mixture."""
    K = config.K if K is None else K
    if K < 1:
        raise ContractError("K must be >= 1")
    out = []
    for _ in range(K):
        s = draw_strategy(config, rng)
        if s is Strategy.PARAPHRASE:
            out.append(gen_paraphrase(world, tokens, rng, config))
        elif s is Strategy.TOKEN_EDIT:
            out.append(gen_token_edit(world, tokens, rng, config))
        else:
            if model_params is None:
                raise ContractError("adversarial proposals need model parameters")
            if base_probs is None:
                base_probs = predict_batch(model_params, [tokens])[0]
            out.append(gen_adversarial(world, model_params, tokens, config, rng, base_probs))
    return out


def perturbations_to_jsonl(rows: Sequence[tuple[int, Sequence[Perturbation]]]) -> str:
    lines = []
    for input_id, perts in rows:
        for k, p in enumerate(perts):
            lines.append(json.dumps({"input_id": input_id, "k": k, **p.to_dict()}, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")
