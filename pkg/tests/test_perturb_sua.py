import json
import math

import numpy as np
import pytest

from suabench.model import init_params, predict_batch
from suabench.perturb import (CUE_POS, PerturbConfig, Perturbation, Strategy, draw_strategy,
                              edit_distance, gen_adversarial, gen_paraphrase, gen_token_edit,
                              perturbations_to_jsonl, random_candidates, sample_perturbations,
                              semantic_tv)
from suabench.prob import ContractError, Divergence, divergence, entropy
from suabench.sua import (ProxyMode, SuaConfig, ambiguity_proxy, decide, estimate,
                          infer_with_abstention, score_batch, score_rows_csv, sensitivity_hat,
                          sua_risk, sua_score)
from suabench.world import CUE, NOISE, Split, by_split


@pytest.fixture
def inputs(small_ambiguous):
    world, data = small_ambiguous
    return world, [e.tokens for e in by_split(data, Split.TEST)[:40]]


@pytest.fixture
def model(small_ambiguous):
    world, _ = small_ambiguous
    return init_params(world.vocab_size, world.num_labels, np.random.default_rng(0), scale=1.0)


# --- perturbations ------------------------------------------------------------

@pytest.mark.parametrize("gen", [gen_paraphrase, gen_token_edit])
def test_generators_respect_budget_and_semantics(inputs, rng, gen):
    world, seqs = inputs
    cfg = PerturbConfig()
    for s in seqs:
        p = gen(world, s, rng, cfg)
        assert len(p.tokens) == len(s)
        assert edit_distance(s, p.tokens) <= cfg.epsilon
        assert p.tokens[CUE_POS] == s[CUE_POS]
        assert p.semantic_tv <= cfg.semantic_tv_threshold
        assert p.semantic_tv == pytest.approx(semantic_tv(world, s, p.tokens))


def test_paraphrase_stays_in_synonym_class(inputs, rng):
    world, seqs = inputs
    for s in seqs:
        p = gen_paraphrase(world, s, rng)
        np.testing.assert_array_equal(world.token_class[list(p.tokens)], world.token_class[list(s)])


def test_token_edit_inserts_noise(inputs, rng):
    world, seqs = inputs
    for s in seqs:
        p = gen_token_edit(world, s, rng)
        changed = [b for a, b in zip(s, p.tokens) if a != b]
        assert all(world.token_kind[t] == NOISE for t in changed)


def test_identity_fallback_is_flagged(inputs, rng):
    world, seqs = inputs
    p = gen_token_edit(world, seqs[0][:1], rng)
    assert p.flagged and p.tokens == tuple(seqs[0][:1])


def test_random_candidates_tv_matches_oracle(inputs, rng):
    world, seqs = inputs
    cands, tvs = random_candidates(world, seqs[0], 50, 2, rng)
    assert cands.shape == (50, len(seqs[0]))
    for c, tv in zip(cands, tvs):
        assert 1 <= edit_distance(seqs[0], c) <= 2
        assert world.token_kind[c[CUE_POS]] == CUE
        assert tv == pytest.approx(semantic_tv(world, seqs[0], c), abs=1e-12)


def test_adversarial_beats_every_admissible_candidate(inputs, model):
    world, seqs = inputs
    params = model
    cfg = PerturbConfig(adv_search_budget=16)
    s = seqs[0]
    p = gen_adversarial(world, params, s, cfg, np.random.default_rng(3))
    cands, tvs = random_candidates(world, s, 16, cfg.epsilon, np.random.default_rng(3))
    base = predict_batch(params, [s])[0]
    ok = cands[tvs <= cfg.semantic_tv_threshold]
    if len(ok) == 0:
        pytest.skip("no admissible candidate for this input")
    best = max(divergence(Divergence.JS, base, q) for q in predict_batch(params, ok))
    assert p.strategy is Strategy.ADVERSARIAL
    assert divergence(Divergence.JS, base, predict_batch(params, [p.tokens])[0]) == pytest.approx(best)


def test_strategy_frequencies(rng):
    cfg = PerturbConfig(weights=(0.5, 0.3, 0.2))
    draws = [draw_strategy(cfg, rng) for _ in range(20_000)]
    freq = [draws.count(s) / len(draws) for s in Strategy]
    np.testing.assert_allclose(freq, cfg.weights, atol=0.015)


def test_zero_weight_strategy_never_drawn(rng):
    cfg = PerturbConfig(weights=(1.0, 0.0, 0.0))
    assert {draw_strategy(cfg, rng) for _ in range(500)} == {Strategy.PARAPHRASE}


def test_sample_perturbations_count_and_determinism(inputs, model):
    world, seqs = inputs
    params = model
    a = sample_perturbations(world, params, seqs[1], PerturbConfig(K=7), np.random.default_rng(5))
    b = sample_perturbations(world, params, seqs[1], PerturbConfig(K=7), np.random.default_rng(5))
    assert len(a) == 7 and a == b


def test_adversarial_needs_params(inputs, rng):
    world, seqs = inputs
    with pytest.raises(ContractError):
        sample_perturbations(world, None, seqs[0], PerturbConfig(weights=(0, 0, 1)), rng)


@pytest.mark.parametrize("kw", [dict(weights=(0.5, 0.5)), dict(weights=(0.6, 0.6, -0.2)),
                                dict(weights=(0.2, 0.2, 0.2)), dict(K=0), dict(epsilon=0),
                                dict(adv_search_budget=0)])
def test_perturb_config_validation(kw):
    with pytest.raises(ContractError):
        PerturbConfig(**kw)


def test_jsonl_roundtrip():
    p = Perturbation((1, 2), Strategy.TOKEN_EDIT, 0.0)
    lines = perturbations_to_jsonl([(4, [p, p])]).splitlines()
    assert len(lines) == 2
    assert json.loads(lines[1]) == {"input_id": 4, "k": 1, "tokens": [1, 2],
                                    "strategy": "token_edit", "semantic_tv": 0.0, "flagged": False}


# --- SUA ----------------------------------------------------------------------

@pytest.mark.parametrize("s, h, expected", [(0.34, 0.02, 0.32), (0.11, 0.14, -0.03)])
def test_sua_score_worked_examples(s, h, expected):
    assert sua_score(s, h, 1.0) == pytest.approx(expected, abs=1e-12)


def test_sua_score_rejects_bad_lambda():
    with pytest.raises(ContractError):
        sua_score(0.1, 0.1, 0.0)


def test_sua_risk_positive_part():
    assert sua_risk([0.3, -0.1, 0.1, -2.0]) == pytest.approx(0.1)
    with pytest.raises(ContractError):
        sua_risk([])


def test_decide_threshold_is_exclusive():
    assert decide(0.5, 0.5) is False
    assert decide(0.5000001, 0.5) is True
    with pytest.raises(ContractError):
        decide(math.nan, 0.0)


def test_sensitivity_hat_is_mean_divergence(inputs, model):
    world, seqs = inputs
    params = model
    P = predict_batch(params, [seqs[0], *seqs[1:4]])
    s, divs = sensitivity_hat(params, seqs[0], seqs[1:4], Divergence.KL)
    oracle = [divergence(Divergence.KL, P[0], q) for q in P[1:]]
    np.testing.assert_allclose(divs, oracle, atol=1e-12)
    assert s == pytest.approx(np.mean(oracle))


def test_sensitivity_of_identity_perturbations_is_zero(inputs, model):
    world, seqs = inputs
    params = model
    assert sensitivity_hat(params, seqs[0], [seqs[0]] * 3)[0] == pytest.approx(0.0, abs=1e-14)


def test_estimate_and_batch_agree(inputs, model):
    world, seqs = inputs
    params = model
    cfg, pcfg = SuaConfig(K=3), PerturbConfig()
    one = estimate(params, world, seqs[0], cfg, pcfg, np.random.default_rng(9))
    batch = score_batch(params, world, seqs[:1], cfg, pcfg, np.random.default_rng(9))[0]
    assert one.score == pytest.approx(batch.score, abs=1e-12)
    assert one.k_used == 3
    assert one.score == pytest.approx(one.sensitivity_hat - one.entropy)
    assert one.entropy == pytest.approx(entropy(predict_batch(params, [seqs[0]])[0]))


def test_abstention_follows_tau(inputs, model):
    world, seqs = inputs
    params = model
    pcfg = PerturbConfig()
    low = infer_with_abstention(params, world, seqs[0], SuaConfig(tau=-100.0), pcfg,
                                np.random.default_rng(1))
    high = infer_with_abstention(params, world, seqs[0], SuaConfig(tau=100.0), pcfg,
                                 np.random.default_rng(1))
    assert low.abstain and low.label is None and low.decision == "abstain"
    assert not high.abstain and high.decision == f"answer({high.label})"


def test_ambiguity_proxy_bounds(inputs, model, rng):
    world, seqs = inputs
    params = model
    for mode in ProxyMode:
        a = ambiguity_proxy(params, world, seqs[0], 16, rng, mode)
        assert 0.0 <= a <= math.log(world.num_labels) + 1e-12
    with pytest.raises(ContractError):
        ambiguity_proxy(params, world, seqs[0], 1, rng)


def test_score_csv_format():
    from suabench.sua import SuaEstimate
    text = score_rows_csv([(0, SuaEstimate(0.34, 0.02, 0.32, 4), "abstain")])
    assert text.splitlines() == ["input_id,sensitivity,entropy,score,decision",
                                 "0,0.34,0.02,0.32,abstain"]


@pytest.mark.parametrize("kw", [dict(lam=0), dict(K=0), dict(divergence="hellinger")])
def test_sua_config_validation(kw):
    with pytest.raises((ContractError, ValueError)):
        SuaConfig(**kw)


def test_perturbations_stay_in_input_vocabulary_region(rng):
    from suabench.experiments import prepare_task
    world, data = prepare_task("shifted", 0, sizes=(40, 10, 10, 40))
    params = init_params(world.vocab_size, world.num_labels, np.random.default_rng(0))
    cfg = PerturbConfig(K=8)
    for split, region in ((Split.TRAIN, 0), (Split.SHIFTED_TEST, 1)):
        for e in by_split(data, split):
            assert world.region_of(e.tokens) == region
            for p in sample_perturbations(world, params, e.tokens, cfg, rng):
                assert set(world.token_region[list(p.tokens)]) <= {-1, region}
            cands, _ = random_candidates(world, e.tokens, 16, 2, rng)
            assert set(world.token_region[cands.ravel()]) <= {-1, region}
