import math

import numpy as np
import pytest

from suabench.model import (ModelParams, backward, forward, forward_batch, init_params,
                            model_risk, predict_batch, predict_label)
from suabench.perturb import PerturbConfig, sample_perturbations
from suabench.prob import (ContractError, Divergence, divergence_rows, entropy_grad,
                            entropy_rows)
from suabench.train import (Method, TrainConfig, TrainingDiverged, alignment_terms,
                            fit_temperature_logits, golden_section, loss_cons, loss_ent, loss_task,
                            train)
from suabench.world import Split, by_split


def _flat(params):
    return np.concatenate([a.ravel() for a in params.arrays()])


def _unflat(params, v):
    out, i = params.copy(), 0
    for a in out.arrays():
        a[...] = v[i:i + a.size].reshape(a.shape)
        i += a.size
    return out


def fd_grad(f, params, h=1e-6):
    v = _flat(params)
    g = np.empty_like(v)
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        g[i] = (f(_unflat(params, v + e)) - f(_unflat(params, v - e))) / (2 * h)
    return g


def _batch(small_factual, n=6):
    world, data = small_factual
    return world, by_split(data, Split.TRAIN)[:n]


def _perts(world, params, batch, K=3, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_perturbations(world, params, e.tokens, PerturbConfig(K=K), rng) for e in batch]


# --- model --------------------------------------------------------------------

def test_outputs_are_distributions(tiny_params, small_factual):
    _, batch = _batch(small_factual, 20)
    P = predict_batch(tiny_params, [e.tokens for e in batch])
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P > 0)


def test_batch_matches_single(tiny_params, small_factual):
    _, batch = _batch(small_factual, 5)
    P = predict_batch(tiny_params, [e.tokens for e in batch])
    for i, e in enumerate(batch):
        np.testing.assert_allclose(forward(tiny_params, e.tokens)[0], P[i], atol=1e-14)


def test_mean_pooling_is_order_invariant(tiny_params):
    a = predict_batch(tiny_params, [[1, 2, 3, 4]])
    b = predict_batch(tiny_params, [[4, 3, 2, 1]])
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_temperature_flattens(tiny_params):
    toks = [[1, 2, 3]]
    h1 = entropy_rows(predict_batch(tiny_params, toks))[0]
    h2 = entropy_rows(predict_batch(tiny_params.with_temperature(5.0), toks))[0]
    assert h2 > h1


def test_params_roundtrip(tiny_params):
    back = ModelParams.from_dict(tiny_params.to_dict())
    for a, b in zip(back.arrays(), tiny_params.arrays()):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("bad", [[[]], [[-1, 2]], [[10 ** 6]], []])
def test_bad_inputs(tiny_params, bad):
    with pytest.raises(ContractError):
        predict_batch(tiny_params, bad)


def test_predict_label_ties_lowest():
    assert predict_label([0.4, 0.4, 0.2]) == 0
    assert model_risk([0.2, 0.5, 0.3]) == pytest.approx(0.5)


def test_backward_matches_fd_for_linear_functional(tiny_params, small_factual):
    _, batch = _batch(small_factual, 4)
    seqs = [e.tokens for e in batch]
    W = np.random.default_rng(0).normal(size=(4, tiny_params.num_labels))
    params = tiny_params.with_temperature(1.7)
    _, trace = forward_batch(params, seqs)
    g = backward(params, trace, W).flat()
    num = fd_grad(lambda p: float(np.sum(W * predict_batch(p, seqs))), params)
    np.testing.assert_allclose(g, num, atol=1e-7)


def _directional_rel_error(f, params, grad, rng, n_dirs=4, h=1e-5):
    v0 = _flat(params)
    a, b = [], []
    for _ in range(n_dirs):
        d = rng.normal(size=v0.size)
        d /= np.linalg.norm(d)
        a.append(grad @ d)
        b.append((f(_unflat(params, v0 + h * d)) - f(_unflat(params, v0 - h * d))) / (2 * h))
    a, b = np.array(a), np.array(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def test_nll_and_entropy_gradients_over_random_configs(small_factual):
    world, data = small_factual
    train_ex = by_split(data, Split.TRAIN)
    rng = np.random.default_rng(11)
    worst_nll = worst_ent = 0.0
    for _ in range(100):
        params = init_params(world.vocab_size, world.num_labels, rng, d_emb=int(rng.integers(2, 6)),
                             d_hid=int(rng.integers(2, 6)), scale=float(rng.uniform(0.1, 3.0)))
        params = params.with_temperature(float(rng.uniform(0.5, 2.0)))
        batch = [train_ex[i] for i in rng.choice(len(train_ex), size=int(rng.integers(1, 6)),
                                                 replace=False)]
        seqs = [e.tokens for e in batch]
        _, g = loss_task(params, batch)
        worst_nll = max(worst_nll, _directional_rel_error(lambda p: loss_task(p, batch)[0],
                                                          params, g.flat(), rng))
        P, trace = forward_batch(params, seqs)
        g_ent = backward(params, trace, entropy_grad(P)).flat()
        worst_ent = max(worst_ent, _directional_rel_error(
            lambda p: float(entropy_rows(predict_batch(p, seqs)).sum()), params, g_ent, rng))
    assert worst_nll < 1e-4 and worst_ent < 1e-4


# --- loss gradients -----------------------------------------------------------

@pytest.fixture
def sharp_params(small_factual):
    # a large init gives non-trivial sensitivity, so the hinge is active for most inputs
    world, _ = small_factual
    return init_params(world.vocab_size, world.num_labels, np.random.default_rng(7),
                       d_emb=4, d_hid=5, scale=4.0)


def test_task_loss_gradient(tiny_params, small_factual):
    _, batch = _batch(small_factual)
    val, g = loss_task(tiny_params, batch)
    num = fd_grad(lambda p: loss_task(p, batch)[0], tiny_params)
    np.testing.assert_allclose(g.flat(), num, atol=1e-7)
    assert val > 0


@pytest.mark.parametrize("div", [Divergence.JS, Divergence.KL])
def test_consistency_gradient_holds_perturbed_side_fixed(tiny_params, small_factual, div):
    world, batch = _batch(small_factual)
    perts = _perts(world, tiny_params, batch)
    seqs = [e.tokens for e in batch]
    Q = predict_batch(tiny_params, [p.tokens for row in perts for p in row]).reshape(len(batch), 3, -1)
    _, g = loss_cons(tiny_params, batch, perts, div)

    def f(p):
        P = predict_batch(p, seqs)
        return float(divergence_rows(div, P[:, None, :], Q).mean())

    np.testing.assert_allclose(g.flat(), fd_grad(f, tiny_params), atol=1e-7)


def test_entropy_alignment_gradient_stop_gradient(sharp_params, small_factual):
    world, batch = _batch(small_factual)
    perts = _perts(world, sharp_params, batch)
    seqs = [e.tokens for e in batch]
    Q = predict_batch(sharp_params, [p.tokens for row in perts for p in row]).reshape(len(batch), 3, -1)
    lam = 1e-3
    val, g = loss_ent(sharp_params, batch, perts, lam)

    def f(p):
        return alignment_terms(predict_batch(p, seqs), Q, lam, Divergence.JS)[2]

    scores = alignment_terms(predict_batch(sharp_params, seqs), Q, lam, Divergence.JS)[5]
    assert val > 0 and np.min(np.abs(scores)) > 1e-4  # away from the hinge
    np.testing.assert_allclose(g.flat(), fd_grad(f, sharp_params), atol=1e-7)


def test_entropy_alignment_gradient_through_perturbed_side(sharp_params, small_factual):
    world, batch = _batch(small_factual)
    perts = _perts(world, sharp_params, batch)
    lam = 1e-3
    _, g = loss_ent(sharp_params, batch, perts, lam, ent_stop_gradient=False)
    num = fd_grad(lambda p: loss_ent(p, batch, perts, lam)[0], sharp_params)
    np.testing.assert_allclose(g.flat(), num, atol=1e-7)


def test_entropy_alignment_zero_below_hinge(tiny_params, small_factual):
    world, batch = _batch(small_factual)
    perts = _perts(world, tiny_params, batch)
    val, g = loss_ent(tiny_params, batch, perts, lam=100.0)
    assert val == 0.0
    assert np.all(g.flat() == 0.0)


# --- training -----------------------------------------------------------------

SMALL = dict(epochs=3, learning_rate=0.5, init_scale=0.5, batch_size=16)


def test_sua_tr_without_regularisers_equals_standard(small_factual):
    world, data = small_factual
    a, _ = train(world, data, TrainConfig(method=Method.STANDARD, **SMALL))
    b, _ = train(world, data, TrainConfig(method=Method.SUA_TR, alpha=0.0, beta=0.0, **SMALL))
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_training_is_deterministic(small_factual):
    world, data = small_factual
    cfg = TrainConfig(method=Method.SUA_TR, **SMALL)
    (a, ha), (b, hb) = train(world, data, cfg), train(world, data, cfg)
    assert ha.to_csv() == hb.to_csv()
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


def test_standard_training_reduces_loss(small_factual):
    world, data = small_factual
    _, hist = train(world, data, TrainConfig(method=Method.STANDARD, **{**SMALL, "epochs": 15}))
    assert hist.task_loss[-1] < hist.task_loss[0]
    assert math.isnan(hist.cons_loss[0]) and math.isnan(hist.ent_loss[0])


@pytest.mark.parametrize("method", [Method.ADVERSARIAL, Method.SUA_TR_MINUS_ENT,
                                    Method.SUA_TR_MINUS_CONS])
def test_other_methods_run(small_factual, method):
    world, data = small_factual
    _, hist = train(world, data, TrainConfig(method=method, **{**SMALL, "epochs": 1}))
    assert len(hist) == 1 and math.isfinite(hist.total_loss[0])


def test_effective_weights():
    assert TrainConfig(method="standard").effective_weights() == (0.0, 0.0)
    assert TrainConfig(method="sua_tr_minus_ent", alpha=2, beta=3).effective_weights() == (2, 0.0)
    assert TrainConfig(method="sua_tr_minus_cons", alpha=2, beta=3).effective_weights() == (0.0, 3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(small_factual):
    world, data = small_factual
    with pytest.raises(TrainingDiverged):
        train(world, data, TrainConfig(method=Method.STANDARD, epochs=5, learning_rate=1e6,
                                       init_scale=2.0))


@pytest.mark.parametrize("kw", [dict(alpha=-1), dict(learning_rate=0), dict(K=0), dict(lam=0),
                                dict(method="sgd"), dict(init_scale=0)])
def test_config_validation(kw):
    with pytest.raises((ContractError, ValueError)):
        TrainConfig(**kw)


# --- temperature scaling ------------------------------------------------------

def test_golden_section_finds_minimum():
    assert golden_section(lambda x: (x - 0.3) ** 2, -3, 3) == pytest.approx(0.3, abs=1e-8)


def test_temperature_recovers_generating_scale():
    rng = np.random.default_rng(0)
    logits = rng.normal(scale=3.0, size=(5000, 4))
    P = np.exp(logits / 2.0)
    P /= P.sum(axis=1, keepdims=True)
    labels = (rng.random((5000, 1)) > P.cumsum(axis=1)).sum(axis=1)
    assert fit_temperature_logits(logits, labels).temperature == pytest.approx(2.0, rel=0.1)


def test_temperature_never_worse_than_identity():
    logits = np.array([[2.0, 0.0], [0.0, 2.0]])
    t = fit_temperature_logits(logits, np.array([0, 1])).temperature
    nll = lambda t: float(np.mean(np.log1p(np.exp(-2.0 / t))))
    assert nll(t) <= nll(1.0) + 1e-12
