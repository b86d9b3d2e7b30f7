"""Property-based checks of the model's invariants."""

from fractions import Fraction

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from ordif.em import EMConfig, e_step, m_step, prox_l1
from ordif.likelihood import marginal_loglik, penalized_objective, penalty_value
from ordif.model import QuadratureGrid, ResponseMatrix, category_prob, cumulative_prob, validate
from ordif.simulation import rereference

from oracles import random_params, random_responses

GRID = QuadratureGrid.regular()
WIDE = QuadratureGrid.regular(241, 14.0)

seeds = st.integers(0, 2**32 - 1)
finite = st.floats(-1e6, 1e6, allow_nan=False)
thetas = st.floats(-6.0, 6.0, allow_nan=False)


def problem(seed, n=15, max_k=2):
    rng = np.random.default_rng(seed)
    j = int(rng.integers(1, 4))
    k = int(rng.integers(0, max_k + 1))
    cats = rng.integers(2, 5, j)
    p = random_params(rng, j, k, cats)
    data = ResponseMatrix(random_responses(rng, n, cats), n_categories=cats)
    return p, data


@given(seeds, thetas)
def test_category_probs_sum_to_one(seed, theta):
    p, _ = problem(seed)
    for j in range(p.n_items):
        for k in range(p.n_classes):
            probs = category_prob(p, j, k, theta)
            assert np.all(probs >= 0)
            assert abs(probs.sum() - 1.0) < 1e-12


@given(seeds, thetas, st.floats(0.01, 2.0))
def test_cumulative_decreasing_in_theta(seed, theta, step):
    p, _ = problem(seed)
    for j in range(p.n_items):
        for k in range(p.n_classes):
            assert np.all(cumulative_prob(p, j, k, theta + step) < cumulative_prob(p, j, k, theta))


@given(seeds, thetas)
def test_zero_dif_class_matches_reference(seed, theta):
    p, _ = problem(seed)
    p = p.replace(dif_intercept=np.zeros_like(p.dif_intercept), dif_slope=np.zeros_like(p.dif_slope))
    for j in range(p.n_items):
        for k in range(p.n_classes):
            assert_allclose(category_prob(p, j, k, theta), category_prob(p, j, 0, theta), rtol=0, atol=0)


@given(finite, st.floats(0, 1e6, allow_nan=False))
def test_prox_idempotent(x, t):
    y = prox_l1(x, t)
    assert prox_l1(y, 0.0) == y
    assert abs(y) <= abs(x) and (y == 0 or np.sign(y) == np.sign(x))


@given(st.integers(-2**20, 2**20), st.integers(0, 2**20), st.integers(0, 10))
def test_prox_exact_on_dyadic_rationals(a, b, e):
    x, t = Fraction(a, 2**e), Fraction(b, 2**e)
    expected = 0 if abs(x) <= t else (x - t if x > 0 else x + t)
    assert Fraction(float(prox_l1(float(x), float(t)))) == expected


@given(seeds, st.lists(st.booleans(), min_size=6, max_size=6))
def test_penalty_sign_invariant(seed, flips):
    p, _ = problem(seed)
    s = np.where(np.array(flips[: p.n_items] + [False] * max(0, p.n_items - 6)), -1.0, 1.0)[:, None]
    q = p.replace(dif_intercept=p.dif_intercept * s, dif_slope=-p.dif_slope)
    assert penalty_value(q) == penalty_value(p)


@settings(max_examples=30)
@given(seeds, seeds)
def test_row_permutation_invariance(seed, perm_seed):
    p, data = problem(seed, n=25)
    perm = np.random.default_rng(perm_seed).permutation(data.n_respondents)
    a = marginal_loglik(p, data, GRID)
    b = marginal_loglik(p, data.take(perm), GRID)
    assert abs(a - b) <= 1e-12 * abs(a)


@settings(max_examples=30)
@given(seeds)
def test_rereference_preserves_likelihood(seed):
    p, data = problem(seed, n=10)
    for ref in range(1, p.n_classes):
        alt = rereference(p, ref)
        assert_allclose(marginal_loglik(alt, data, WIDE), marginal_loglik(p, data, WIDE), rtol=1e-9)


@settings(max_examples=30)
@given(seeds)
def test_posterior_normalized(seed):
    p, data = problem(seed)
    post = e_step(p, data, GRID)
    assert np.all(post.q >= 0)
    assert_allclose(post.q.sum(axis=(1, 2)), 1.0, atol=1e-10)
    assert_allclose(post.class_marginals.sum(axis=1), 1.0, atol=1e-10)


@settings(max_examples=25)
@given(seeds, st.sampled_from([0.0, 0.05, 0.5, 5.0]))
def test_m_step_keeps_constraints_and_descends(seed, lam):
    p, data = problem(seed, n=30)
    cur = penalized_objective(p, data, GRID, lam)
    res = m_step(p, e_step(p, data, GRID), data, GRID, lam, EMConfig(), cur)
    assert validate(res.params) == []
    assert res.objective.penalized <= cur.penalized + 1e-10
