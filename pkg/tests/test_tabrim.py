import itertools
import logging
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rimkit.tabrim import (EmissionModel, ExactCPT, GenerativeSpec, GibbsChain, KNNConditional,
                           TabRIM, brute_force_posterior, chain_agreement, emission_weight,
                           gibbs_sweep, knn_conditional, make_reference_net, pool_chains,
                           predictive_marginalize, run_chain, total_variation)

from oracles import emission_product, enumerate_posterior

FIXTURE = Path(__file__).parent / "fixtures" / "refnet.json"


class PointMass:
    """Conditional that always returns the current value of the feature."""

    def __init__(self, domains, n_classes=2):
        self.domains, self.n_classes = domains, n_classes

    def feature_conditional(self, i, x, y=None):
        return np.eye(self.domains[i])[np.atleast_2d(x)[:, i]]

    def predict_y(self, x):
        x = np.atleast_2d(x)
        p1 = (x.sum(1) + 1) / (x.shape[1] + 2)
        return np.stack([1 - p1, p1], axis=1)


class Uniform(PointMass):
    def feature_conditional(self, i, x, y=None):
        return np.full((np.atleast_2d(x).shape[0], self.domains[i]), 1.0 / self.domains[i])


class Dead(PointMass):
    def feature_conditional(self, i, x, y=None):
        return np.zeros((np.atleast_2d(x).shape[0], self.domains[i]))


def random_spec(rng, domains=(2, 3, 2), eps=0.2):
    p_x = rng.dirichlet(np.ones(int(np.prod(domains)))).reshape(domains)
    p_y = rng.dirichlet(np.ones(2), size=domains)
    return GenerativeSpec(p_x, p_y, eps)


# --- emission ----------------------------------------------------------------------

def test_emission_all_agree():
    assert emission_weight([1, 0, 1], [1, 0, 1], 0.25) == pytest.approx(0.421875, rel=1e-12)


def test_emission_all_disagree():
    assert emission_weight([1, 0, 1], [0, 1, 0], 0.25) == pytest.approx(0.25 ** 3, rel=1e-12)


def test_emission_small_eps_limit():
    assert emission_weight([2, 1], [2, 1], 1e-12) == pytest.approx(1.0, abs=1e-11)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 12), eps=st.floats(1e-6, 1 - 1e-6))
def test_emission_matches_literal_product(seed, n, eps):
    rng = np.random.default_rng(seed)
    x, e = rng.integers(3, size=n), rng.integers(3, size=n)
    w = emission_weight(x, e, eps)
    assert w == pytest.approx(emission_product(x, e, eps), rel=1e-12, abs=1e-300)
    m = int((x == e).sum())
    assert abs(w - math.exp(m * math.log(1 - eps) + (n - m) * math.log(eps))) <= 1e-12
    assert 0.0 <= w <= 1.0


def test_emission_model_bounds():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            EmissionModel(bad)


# --- gibbs ---------------------------------------------------------------------------

def test_point_mass_conditional_keeps_row():
    x = np.array([1, 0, 2])
    out, _ = gibbs_sweep(x, PointMass([2, 2, 3]), np.random.default_rng(0), joint=False)
    np.testing.assert_array_equal(out, x)


def test_all_zero_conditional_names_feature():
    with pytest.raises(ValueError, match="feature 0"):
        gibbs_sweep(np.array([0, 1]), Dead([2, 2]), np.random.default_rng(0), joint=False)


def test_independent_uniform_marginals():
    chain = run_chain(np.array([0, 0]), Uniform([2, 2]), EmissionModel(0.3),
                      np.random.default_rng(1), n_burn=0, n_keep=10_000, mode="marginal")
    means = chain.retained[:, 0, :].mean(axis=0)
    assert np.all(np.abs(means - 0.5) < 0.02)


@pytest.mark.parametrize("mode", ["marginal", "joint"])
def test_exact_cpt_chain_joint_matches_enumeration(mode):
    spec = GenerativeSpec.from_json(FIXTURE)
    cpt = ExactCPT(spec.p_x, spec.p_y_given_x)
    chain = run_chain(np.array([0, 1, 0]), cpt, EmissionModel(spec.eps), np.random.default_rng(2),
                      n_burn=100, n_keep=50_000, mode=mode)
    flat = np.ravel_multi_index(chain.retained[:, 0, :].T, spec.domains)
    emp = np.bincount(flat, minlength=8) / len(flat)
    assert total_variation(emp, spec.p_x.ravel()) < 0.02


def test_run_chain_sizes_and_weights():
    chain = run_chain(np.array([1, 0, 1]), Uniform([2, 2, 2]), EmissionModel(0.25),
                      np.random.default_rng(0), n_burn=5, n_keep=10)
    assert len(chain) == 10 and chain.retained.shape == (10, 1, 3)
    w = chain.weights
    assert np.all((w >= 0) & (w <= 1)) and np.any(w > 0)
    expect = [emission_product(s[0], [1, 0, 1], 0.25) for s in chain.retained]
    np.testing.assert_allclose(w[:, 0], expect, rtol=1e-12)


def test_single_kept_point_mass_chain():
    e = np.array([1, 0, 1, 1])
    chain = run_chain(e, PointMass([2] * 4), EmissionModel(0.1), np.random.default_rng(0),
                      n_burn=0, n_keep=1, mode="marginal")
    np.testing.assert_array_equal(chain.retained[0, 0], e)
    assert chain.weights[0, 0] == pytest.approx(0.9 ** 4, rel=1e-12)


def test_run_chain_validates():
    with pytest.raises(ValueError):
        run_chain(np.array([0]), Uniform([2]), EmissionModel(0.2), np.random.default_rng(0), n_keep=0)
    with pytest.raises(ValueError):
        run_chain(np.array([0]), Uniform([2]), EmissionModel(0.2), np.random.default_rng(0), mode="x")


def test_joint_and_marginal_coincide_when_label_independent():
    rng = np.random.default_rng(3)
    p_x = rng.dirichlet(np.ones(8)).reshape(2, 2, 2)
    p_y = np.broadcast_to([0.3, 0.7], (2, 2, 2, 2)).copy()
    spec = GenerativeSpec(p_x, p_y, 0.2)
    cpt = ExactCPT(p_x, p_y)
    e = np.array([1, 1, 0])
    est = {}
    for mode in ("joint", "marginal"):
        ch = run_chain(e, cpt, EmissionModel(0.2), np.random.default_rng(4), 50, 2000, mode)
        est[mode] = predictive_marginalize(ch)[0]
    assert total_variation(est["joint"], est["marginal"]) < 0.03
    assert total_variation(est["joint"], brute_force_posterior(e, spec)) < 0.03


# --- generator ---------------------------------------------------------------------------

def _chain(logw, pred):
    logw = np.asarray(logw, float)
    pred = np.asarray(pred, float)
    k, r = logw.shape
    return GibbsChain(np.zeros((k, r, 1), int), 0, logw, pred, np.zeros((r, 1), int))


def test_single_sample_prediction_returned():
    c = _chain([[-3.0]], [[[0.2, 0.8]]])
    np.testing.assert_allclose(predictive_marginalize(c), [[0.2, 0.8]], rtol=1e-12)


def test_zero_weight_sample_ignored():
    c = _chain([[math.log(0.3)], [-np.inf]], [[[0.1, 0.9]], [[0.8, 0.2]]])
    np.testing.assert_allclose(predictive_marginalize(c), [[0.1, 0.9]], rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10 ** 6), shift=st.floats(-50, 50))
def test_marginalize_normalized_and_scale_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    logw = rng.normal(0, 3, size=(6, 4))
    pred = rng.dirichlet(np.ones(3), size=(6, 4))
    a = predictive_marginalize(_chain(logw, pred))
    b = predictive_marginalize(_chain(logw + shift, pred))
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_uninformative_eps_gives_unweighted_mean():
    chain = run_chain(np.array([1, 0, 1]), Uniform([2, 2, 2]), EmissionModel(0.5),
                      np.random.default_rng(0), n_burn=2, n_keep=30)
    weighted = predictive_marginalize(chain)
    plain = predictive_marginalize(chain, weighted=False)
    np.testing.assert_array_equal(weighted, plain)
    np.testing.assert_allclose(plain, chain.predictive.mean(0), rtol=1e-12)


def test_all_zero_weights_fall_back(caplog):
    c = _chain([[-np.inf], [-np.inf]], [[[0.2, 0.8]], [[0.6, 0.4]]])
    with caplog.at_level(logging.WARNING, logger="rimkit.tabrim"):
        out = predictive_marginalize(c)
    np.testing.assert_allclose(out, [[0.4, 0.6]], rtol=1e-12)
    assert "unweighted" in caplog.text


def test_pool_concatenates_retained_sets():
    chains = [run_chain(np.array([0, 1]), Uniform([2, 2]), EmissionModel(0.2),
                        np.random.default_rng(s), 3, 7) for s in range(3)]
    pooled = pool_chains(chains)
    assert len(pooled) == 21
    assert chain_agreement(chains).shape == (1,)


# --- knn ------------------------------------------------------------------------------------

def test_knn_point_mass_at_tiny_smoothing():
    rng = np.random.default_rng(0)
    X = rng.integers(3, size=(30, 4))
    X[:, 2] = 1
    p = knn_conditional(2, X[0], X, np.zeros(30, int), [3] * 4, k=5, smoothing=1e-12)
    np.testing.assert_allclose(p, [0, 1, 0], atol=1e-9)


def test_knn_uniform_at_huge_smoothing():
    rng = np.random.default_rng(0)
    X = rng.integers(3, size=(30, 4))
    p = knn_conditional(1, X[0], X, np.zeros(30, int), [3] * 4, k=5, smoothing=1e12)
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-9)


def test_knn_full_k_gives_smoothed_marginal():
    rng = np.random.default_rng(1)
    X = rng.integers(4, size=(50, 3))
    lam = 0.5
    p = knn_conditional(0, X[7], X, np.zeros(50, int), [4, 4, 4], k=50, smoothing=lam)
    counts = np.bincount(X[:, 0], minlength=4)
    np.testing.assert_allclose(p, (counts + lam) / (50 + 4 * lam), rtol=1e-12)


def test_knn_conditionals_normalized():
    rng = np.random.default_rng(2)
    X = rng.integers(2, size=(40, 5))
    y = rng.integers(2, size=40)
    model = KNNConditional(X, y, [2] * 5, k=7)
    rows = rng.integers(2, size=(9, 5))
    for i in range(5):
        np.testing.assert_allclose(model.feature_conditional(i, rows, y[:9]).sum(-1), 1, atol=1e-9)
    np.testing.assert_allclose(model.predict_y(rows).sum(-1), 1, atol=1e-9)


def test_knn_rejects_bad_input():
    with pytest.raises(ValueError):
        KNNConditional(np.zeros((0, 2), int), np.zeros(0, int), [2, 2])
    with pytest.raises(ValueError):
        KNNConditional(np.zeros((3, 2), int), np.zeros(3, int), [2, 2], smoothing=0)


# --- exact oracle ------------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), eps=st.floats(0.01, 0.99))
def test_brute_force_matches_enumeration(seed, eps):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, eps=eps)
    e = [int(rng.integers(d)) for d in spec.domains]
    np.testing.assert_allclose(brute_force_posterior(e, spec),
                               enumerate_posterior(e, spec.p_x, spec.p_y_given_x, eps), rtol=1e-10)


def test_uninformative_evidence_gives_prior_predictive():
    spec = random_spec(np.random.default_rng(0), domains=(2, 2, 2), eps=0.5)
    prior = (spec.p_x[..., None] * spec.p_y_given_x).reshape(-1, 2).sum(0)
    np.testing.assert_allclose(brute_force_posterior([0, 1, 1], spec), prior, rtol=1e-12)


def test_noiseless_deterministic_point_mass():
    p_x = np.full((2, 2), 0.25)
    p_y = np.zeros((2, 2, 2))
    for a, b in itertools.product((0, 1), repeat=2):
        p_y[a, b, a ^ b] = 1.0
    post = brute_force_posterior([1, 0], GenerativeSpec(p_x, p_y, 1e-12))
    np.testing.assert_allclose(post, [0, 1], atol=1e-9)


def test_brute_force_rejects_huge_domain():
    spec = GenerativeSpec(np.ones((10,) * 7) / 1e7, np.full((10,) * 7 + (2,), 0.5), 0.1)
    with pytest.raises(ValueError, match="10000000"):
        brute_force_posterior([0] * 7, spec)


def test_fixture_is_frozen_reference_net():
    frozen = GenerativeSpec.from_json(FIXTURE)
    fresh = make_reference_net(seed=7)
    np.testing.assert_allclose(frozen.p_x, fresh.p_x, rtol=1e-12)
    np.testing.assert_allclose(frozen.p_y_given_x, fresh.p_y_given_x, rtol=1e-12)
    assert frozen.p_x.shape == (2, 2, 2)
    np.testing.assert_allclose(frozen.p_x.sum(), 1.0, rtol=1e-12)


def test_reference_net_estimate_close_to_exact():
    spec = GenerativeSpec.from_json(FIXTURE)
    model = TabRIM(ExactCPT(spec.p_x, spec.p_y_given_x), spec.eps, n_burn=500, n_keep=2000)
    e = np.array([1, 0, 1])
    assert total_variation(model.predict_proba(e)[0], brute_force_posterior(e, spec)) < 0.05


def test_chains_deterministic_and_seeds_agree():
    spec = GenerativeSpec.from_json(FIXTURE)
    cpt = ExactCPT(spec.p_x, spec.p_y_given_x)
    E = np.array([[0, 0, 1], [1, 1, 0]])
    a = TabRIM(cpt, spec.eps, n_burn=100, n_keep=2000, n_chains=1, seed=0).predict_proba(E)
    b = TabRIM(cpt, spec.eps, n_burn=100, n_keep=2000, n_chains=1, seed=0).predict_proba(E)
    c = TabRIM(cpt, spec.eps, n_burn=100, n_keep=2000, n_chains=1, seed=1).predict_proba(E)
    np.testing.assert_array_equal(a, b)
    assert np.all(total_variation(a, c) < 0.1)
