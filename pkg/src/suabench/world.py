"""Synthetic latent-interpretation worlds with exactly computable ground truth.

A world generates short token sequences.  Position 0 holds a *cue* token whose
equivalence class fixes the interpretation prior ``p(z | x)``; the remaining
positions hold *surface* tokens (synonym classes, spuriously correlated with
the cue through per-class topics) and *noise* tokens (ignored by the world).
Labels are emitted from a lookup table ``p(y | z)`` so the label mixture
``p(y | x) = sum_z p(y | z) p(z | x)`` can be enumerated exactly.

Every surface class has members in two disjoint vocabulary regions: region 0
feeds the train/valid/test splits, region 1 the ``shifted_test`` split.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .prob import ContractError, entropy

CUE_POS = 0

CUE, SURFACE, NOISE = 0, 1, 2


class Family(str, Enum):
    FACTUAL = "factual"
    AMBIGUOUS = "ambiguous"
    SHIFTED = "shifted"


class Split(str, Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"
    SHIFTED_TEST = "shifted_test"


SPLITS = tuple(Split)


@dataclass(frozen=True)
class TaskSpec:
    family: Family = Family.FACTUAL
    sizes: tuple[int, int, int, int] = (1000, 300, 1000, 1000)
    ambiguous_fraction: float = 0.03
    ambiguity_level: float = math.log(2.0)
    num_labels: int = 4
    num_interpretations: int = 8
    num_ambiguous_cues: int = 6
    interpretation_set_sizes: tuple[int, ...] = (2, 4)
    cue_synonyms: int = 3
    canonical_weight: float = 0.6
    surface_classes: int = 24
    surface_synonyms: int = 3
    topic_size: int = 3
    spurious_rate: float = 0.6
    noise_tokens: int = 6
    noise_rate: float = 0.15
    length_range: tuple[int, int] = (6, 12)
    emission_noise: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "interpretation_set_sizes", tuple(self.interpretation_set_sizes))
        object.__setattr__(self, "length_range", tuple(self.length_range))
        if len(self.sizes) != 4 or min(self.sizes) < 1:
            raise ContractError("sizes must be four positive split sizes")
        if not 0.0 <= self.ambiguous_fraction <= 1.0:
            raise ContractError("ambiguous_fraction must lie in [0, 1]")
        if self.num_labels < 2 or self.num_interpretations < self.num_labels:
            raise ContractError("need num_labels >= 2 and num_interpretations >= num_labels")
        lo, hi = self.length_range
        if not 4 <= lo <= hi <= 32:
            raise ContractError("length_range must satisfy 4 <= lo <= hi <= 32")
        if any(s < 1 or s > self.num_interpretations for s in self.interpretation_set_sizes):
            raise ContractError("interpretation set sizes must lie in [1, |Z|]")
        if self.ambiguity_level < 0:
            raise ContractError("ambiguity_level must be non-negative")
        if not 0.0 <= self.emission_noise <= 1.0:
            raise ContractError("emission_noise must lie in [0, 1]")
        if not 0.0 < self.canonical_weight <= 1.0:
            raise ContractError("canonical_weight must lie in (0, 1]")

    def size(self, split: Split | str) -> int:
        return self.sizes[SPLITS.index(Split(split))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        d["sizes"] = list(self.sizes)
        d["interpretation_set_sizes"] = list(self.interpretation_set_sizes)
        d["length_range"] = list(self.length_range)
        return d


# Task presets: analogs of the QA / NLI / shifted-classification families.
TASK_PRESETS: dict[str, dict] = {
    "factual": dict(family="factual", num_labels=4, ambiguous_fraction=0.03),
    "ambiguous": dict(family="ambiguous", num_labels=3, num_interpretations=6,
                      ambiguous_fraction=0.3),
    "shifted": dict(family="shifted", num_labels=4, ambiguous_fraction=0.03),
}


def task_spec(name: str, **overrides) -> TaskSpec:
    if name not in TASK_PRESETS:
        raise ContractError(f"unknown task {name!r}; choose from {sorted(TASK_PRESETS)}")
    return TaskSpec(**{**TASK_PRESETS[name], **overrides})


def eval_split(spec: TaskSpec) -> Split:
    """Split used for headline evaluation of a task family."""
    return Split.SHIFTED_TEST if spec.family is Family.SHIFTED else Split.TEST


@dataclass(frozen=True)
class Example:
    id: int
    tokens: tuple[int, ...]
    z: int
    y: int
    split: Split

    def to_dict(self) -> dict:
        return {"id": self.id, "tokens": list(self.tokens), "z": self.z, "y": self.y,
                "split": self.split.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Example":
        return cls(int(d["id"]), tuple(int(t) for t in d["tokens"]), int(d["z"]), int(d["y"]),
                   Split(d["split"]))


@dataclass(frozen=True)
class GroundTruth:
    p_z_given_x: np.ndarray
    p_y_given_x: np.ndarray
    ambiguity_A: float
    true_uncertainty_U: float
    eta: float
    bayes_risk: float
    cond_label_entropy: float  # E_z[H(Y | z, x)]
    posterior_interp_entropy: float  # H(Z | Y, x)

    @property
    def kappa_fn_input(self) -> float:
        return self.bayes_risk


@dataclass(frozen=True, eq=False)
class World:
    spec: TaskSpec
    seed: int
    token_kind: np.ndarray  # (V,) CUE / SURFACE / NOISE
    token_class: np.ndarray  # (V,) equivalence-class id
    token_region: np.ndarray  # (V,) 0 / 1 for surface tokens, -1 otherwise
    token_weight: np.ndarray  # (V,) within-class sampling weight
    cue_prior: np.ndarray  # (n_cue_classes, |Z|)
    cue_ambiguous: np.ndarray  # (n_cue_classes,) bool
    cue_topics: np.ndarray  # (n_cue_classes, topic_size) surface class ids
    emission: np.ndarray  # (|Z|, k)
    class_members: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def vocab_size(self) -> int:
        return int(self.token_kind.size)

    @property
    def num_interpretations(self) -> int:
        return int(self.emission.shape[0])

    @property
    def num_labels(self) -> int:
        return int(self.emission.shape[1])

    @property
    def n_cue_classes(self) -> int:
        return int(self.cue_prior.shape[0])

    @property
    def equivalence_classes(self) -> tuple[tuple[int, ...], ...]:
        return self.class_members

    def tokens_of(self, kind: int, region: int | None = None) -> np.ndarray:
        mask = self.token_kind == kind
        if region is not None:
            mask &= self.token_region == region
        return np.flatnonzero(mask)

    def region_of(self, tokens: Sequence[int]) -> int:
        """Vocabulary region of an input: 1 if any surface token comes from region 1."""
        return int(max(0, self.token_region[np.asarray(tokens, dtype=np.int64)].max()))

    def same_region(self, region: int) -> np.ndarray:
        """(V,) mask of tokens usable alongside an input of ``region`` (non-surface included)."""
        return (self.token_region == -1) | (self.token_region == region)

    def check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise ContractError("token sequence must be a non-empty 1-D sequence")
        if arr.min() < 0 or arr.max() >= self.vocab_size:
            raise ContractError("out-of-vocabulary token")
        return arr

    def interpretation_prior(self, tokens: Sequence[int]) -> np.ndarray:
        """``p(z | x)``; driven by the equivalence class of the cue at position 0."""
        arr = self.check_tokens(tokens)
        cue = arr[CUE_POS]
        if self.token_kind[cue] != CUE:
            return np.full(self.num_interpretations, 1.0 / self.num_interpretations)
        return self.cue_prior[self.token_class[cue]].copy()

    def interpretation_prior_fn(self, tokens: Sequence[int]) -> np.ndarray:
        return self.interpretation_prior(tokens)

    def emission_fn(self, z: int, tokens: Sequence[int] | None = None) -> np.ndarray:
        """``p(y | z, x)``. The emission table depends on ``z`` only."""
        return self.emission[z].copy()

    def label_mixture(self, tokens: Sequence[int]) -> np.ndarray:
        return self.interpretation_prior(tokens) @ self.emission

    def is_cue_ambiguous(self, tokens: Sequence[int]) -> bool:
        cue = int(tokens[CUE_POS])
        return bool(self.token_kind[cue] == CUE and self.cue_ambiguous[self.token_class[cue]])


def _level_weights(size: int, level: float) -> np.ndarray:
    """Distribution over ``size`` outcomes with entropy ``min(level, ln size)``."""
    if size == 1:
        return np.ones(1)
    if level >= math.log(size) - 1e-12:
        return np.full(size, 1.0 / size)
    idx = np.arange(size)

    def ent(t):
        w = np.exp(-t * idx)
        w /= w.sum()
        return entropy(w)

    lo, hi = 0.0, 1.0
    while ent(hi) > level:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ent(mid) > level:
            lo = mid
        else:
            hi = mid
    w = np.exp(-0.5 * (lo + hi) * idx)
    return w / w.sum()


def _within_class_weights(n: int, canonical: float) -> np.ndarray:
    if n == 1:
        return np.ones(1)
    w = np.full(n, (1.0 - canonical) / (n - 1))
    w[0] = canonical
    return w


def build_world(spec: TaskSpec, seed: int) -> World:
    """Construct the world for ``spec`` deterministically from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 0x5EED]))
    Z, k = spec.num_interpretations, spec.num_labels

    # interpretation -> label, balanced, shuffled
    label_of_z = rng.permutation(np.arange(Z) % k)
    emission = np.eye(k)[label_of_z] * (1.0 - spec.emission_noise) + spec.emission_noise / k

    priors, ambiguous = [], []
    for z in range(Z):
        row = np.zeros(Z)
        row[z] = 1.0
        priors.append(row)
        ambiguous.append(False)
    for j in range(spec.num_ambiguous_cues):
        size = spec.interpretation_set_sizes[j % len(spec.interpretation_set_sizes)]
        members = rng.choice(Z, size=size, replace=False)
        row = np.zeros(Z)
        row[members] = _level_weights(size, spec.ambiguity_level)
        priors.append(row)
        ambiguous.append(size > 1)
    cue_prior = np.array(priors)
    n_cue = cue_prior.shape[0]

    kinds, classes, regions, weights, members = [], [], [], [], []
    tok = 0

    def add_class(kind, n_members, region_of, cls_id, w):
        nonlocal tok
        ids = []
        for m in range(n_members):
            kinds.append(kind)
            classes.append(cls_id)
            regions.append(region_of(m))
            weights.append(w[m])
            ids.append(tok)
            tok += 1
        members.append(tuple(ids))

    cue_w = _within_class_weights(spec.cue_synonyms, spec.canonical_weight)
    for c in range(n_cue):
        add_class(CUE, spec.cue_synonyms, lambda m: -1, c, cue_w)
    s = spec.surface_synonyms
    surf_w = np.concatenate([_within_class_weights(s, spec.canonical_weight)] * 2)
    for c in range(spec.surface_classes):
        add_class(SURFACE, 2 * s, lambda m: 0 if m < s else 1, n_cue + c, surf_w)
    noise_cls = n_cue + spec.surface_classes
    add_class(NOISE, spec.noise_tokens, lambda m: -1, noise_cls,
              np.full(spec.noise_tokens, 1.0 / spec.noise_tokens))

    cue_topics = np.stack([
        n_cue + rng.choice(spec.surface_classes, size=spec.topic_size, replace=False)
        for _ in range(n_cue)
    ])

    return World(
        spec=spec,
        seed=int(seed),
        token_kind=np.array(kinds, dtype=np.int8),
        token_class=np.array(classes, dtype=np.int64),
        token_region=np.array(regions, dtype=np.int8),
        token_weight=np.array(weights, dtype=np.float64),
        cue_prior=cue_prior,
        cue_ambiguous=np.array(ambiguous, dtype=bool),
        cue_topics=cue_topics,
        emission=emission,
        class_members=tuple(members),
    )


def _draw_member(world: World, cls: int, region: int | None, rng: np.random.Generator) -> int:
    ids = np.array(world.class_members[cls])
    if region is not None:
        ids = ids[world.token_region[ids] == region]
    w = world.token_weight[ids]
    return int(rng.choice(ids, p=w / w.sum()))


def sample_tokens(world: World, rng: np.random.Generator, *, ambiguous: bool,
                  region: int = 0) -> tuple[int, ...]:
    spec = world.spec
    cue_classes = np.flatnonzero(world.cue_ambiguous == ambiguous)
    if cue_classes.size == 0:
        cue_classes = np.arange(world.n_cue_classes)
    c = int(rng.choice(cue_classes))
    length = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
    toks = [_draw_member(world, c, None, rng)]
    noise_cls = int(world.token_class[world.tokens_of(NOISE)[0]])
    n_cue = world.n_cue_classes
    for _ in range(length - 1):
        if rng.random() < spec.noise_rate:
            toks.append(_draw_member(world, noise_cls, None, rng))
            continue
        if rng.random() < spec.spurious_rate:
            sc = int(rng.choice(world.cue_topics[c]))
        else:
            sc = n_cue + int(rng.integers(spec.surface_classes))
        toks.append(_draw_member(world, sc, region, rng))
    return tuple(toks)


def sample_dataset(world: World, spec: TaskSpec | None = None,
                   rng: np.random.Generator | None = None) -> list[Example]:
    """Draw every split. ``shifted_test`` uses vocabulary region 1 for surface tokens."""
    spec = spec or world.spec
    if rng is None:
        rng = np.random.default_rng(world.seed)
    out: list[Example] = []
    for split in SPLITS:
        region = 1 if split is Split.SHIFTED_TEST else 0
        for i in range(spec.size(split)):
            amb = bool(rng.random() < spec.ambiguous_fraction)
            toks = sample_tokens(world, rng, ambiguous=amb, region=region)
            pz = world.interpretation_prior(toks)
            z = int(rng.choice(pz.size, p=pz))
            y = int(rng.choice(world.num_labels, p=world.emission_fn(z, toks)))
            out.append(Example(i, toks, z, y, split))
    return out


def sample_label(world: World, tokens: Sequence[int], rng: np.random.Generator) -> int:
    """Draw ``z ~ p(z | x)`` then ``y ~ p(y | z, x)``; returns ``y``."""
    pz = world.interpretation_prior(tokens)
    z = int(rng.choice(pz.size, p=pz))
    return int(rng.choice(world.num_labels, p=world.emission_fn(z, tokens)))


def by_split(examples: Sequence[Example], split: Split | str) -> list[Example]:
    split = Split(split)
    return [e for e in examples if e.split is split]


def _cond_entropy_z_given_y(pz: np.ndarray, emission: np.ndarray) -> float:
    joint = pz[:, None] * emission  # (Z, k)
    py = joint.sum(axis=0)
    h = 0.0
    for y in range(emission.shape[1]):
        if py[y] > 0:
            h += py[y] * entropy(joint[:, y] / py[y])
    return h


def ground_truth(world: World, tokens: Sequence[int]) -> GroundTruth:
    pz = world.interpretation_prior(tokens)
    py = pz @ world.emission
    A = entropy(pz)
    U = entropy(py)
    cond = float(sum(pz[z] * entropy(world.emission[z]) for z in range(pz.size) if pz[z] > 0))
    post = _cond_entropy_z_given_y(pz, world.emission)
    return GroundTruth(
        p_z_given_x=pz,
        p_y_given_x=py,
        ambiguity_A=A,
        true_uncertainty_U=U,
        eta=abs(U - A),
        bayes_risk=float(1.0 - py.max()),
        cond_label_entropy=cond,
        posterior_interp_entropy=post,
    )


def kappa(ground: GroundTruth, model_risk: float) -> float:
    """Interpretation-collapse gap ``(R*(x) - R_theta(x))_+``."""
    if not 0.0 <= model_risk <= 1.0:
        raise ContractError("model_risk must lie in [0, 1]")
    return max(ground.bayes_risk - model_risk, 0.0)


# --- serialisation ---------------------------------------------------------

def world_to_dict(world: World) -> dict:
    return {
        "seed": world.seed,
        "spec": world.spec.to_dict(),
        "token_kind": world.token_kind.tolist(),
        "token_class": world.token_class.tolist(),
        "token_region": world.token_region.tolist(),
        "token_weight": world.token_weight.tolist(),
        "cue_prior": world.cue_prior.tolist(),
        "cue_ambiguous": world.cue_ambiguous.tolist(),
        "cue_topics": world.cue_topics.tolist(),
        "emission": world.emission.tolist(),
        "class_members": [list(m) for m in world.class_members],
    }


def world_from_dict(d: dict) -> World:
    return World(
        spec=TaskSpec(**d["spec"]),
        seed=int(d["seed"]),
        token_kind=np.array(d["token_kind"], dtype=np.int8),
        token_class=np.array(d["token_class"], dtype=np.int64),
        token_region=np.array(d["token_region"], dtype=np.int8),
        token_weight=np.array(d["token_weight"], dtype=np.float64),
        cue_prior=np.array(d["cue_prior"], dtype=np.float64),
        cue_ambiguous=np.array(d["cue_ambiguous"], dtype=bool),
        cue_topics=np.array(d["cue_topics"], dtype=np.int64),
        emission=np.array(d["emission"], dtype=np.float64),
        class_members=tuple(tuple(m) for m in d["class_members"]),
    )
