"""Tests for the E-step, Q-function gradients, prox step, M-step and fit loop."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import minimize

from ordif.em import (
    NONUNIFORM,
    UNIFORM,
    ActiveEffect,
    EMConfig,
    PosteriorTable,
    active_set,
    default_init,
    e_step,
    fit,
    m_step,
    prox_l1,
    q_function,
    q_gradients,
)
from ordif.likelihood import marginal_loglik, penalized_objective
from ordif.model import QuadratureGrid, ResponseMatrix, make_params, validate
from ordif.simulation import SimulationConfig, generate

from oracles import (
    brute_force_posterior,
    central_difference,
    free_coordinates,
    random_params,
    random_responses,
)

GRID = QuadratureGrid.regular()


def small_problem(seed, n=12, cats=(3, 3, 4), k=1):
    rng = np.random.default_rng(seed)
    p = random_params(rng, len(cats), k, list(cats))
    data = ResponseMatrix(random_responses(rng, n, list(cats)), n_categories=list(cats))
    return p, data


class TestEStep:
    def test_uniform_posterior_when_cells_tie(self):
        # zero slopes and a flat class density on a two-point grid tie every (k, g) cell
        p = make_params([[0.0], [0.5]], [0.0, 0.0], class_probs=(0.5, 0.5))
        data = ResponseMatrix([[1, 2], [2, 1]])
        q = e_step(p, data, QuadratureGrid([-0.5, 0.5], [1.0, 1.0]))
        assert_allclose(q.q, 0.25, rtol=1e-14)

    def test_identical_cells_give_uniform_table(self):
        p = make_params([[0.0]], [0.0], class_probs=(0.5, 0.5))
        data = ResponseMatrix([[1], [2]])
        q = e_step(p, data, QuadratureGrid([0.0], [1.0]))
        assert_allclose(q.q, 0.5)

    def test_zero_class_weight(self):
        p, data = small_problem(0)
        p = p.replace(class_probs=[1.0, 0.0])
        q = e_step(p, data, GRID)
        assert np.all(q.q[:, 1, :] == 0.0)
        q.check_normalized()

    def test_brute_force(self):
        p, data = small_problem(1, n=4, cats=(3, 2))
        grid = QuadratureGrid.regular(25, 8.0, check=False)
        q = e_step(p, data, grid)
        ref = brute_force_posterior(p, data.values, grid.nodes, grid.weights)
        assert_allclose(q.q, ref, rtol=1e-12, atol=1e-300)

    def test_normalized(self):
        p, data = small_problem(2, k=2)
        q = e_step(p, data, GRID)
        assert_allclose(q.q.sum(axis=(1, 2)), 1.0, atol=1e-12)
        assert_allclose(q.class_marginals.sum(axis=1), 1.0, atol=1e-12)


class TestQFunction:
    def test_point_mass_reduces_to_complete_data(self):
        p, data = small_problem(3, n=3, cats=(3, 3))
        grid = QuadratureGrid.regular(21, 8.0, check=False)
        q = np.zeros((3, 2, 21))
        cells = [(0, 10), (1, 4), (0, 15)]
        for i, (k, g) in enumerate(cells):
            q[i, k, g] = 1.0
        from scipy.stats import norm
        expected = 0.0
        for i, (k, g) in enumerate(cells):
            t = grid.nodes[g]
            expected += np.log(p.class_probs[k]) + norm.logpdf(t, p.class_means[k], p.class_sds[k])
            for j, y in enumerate(data.values[i]):
                from oracles import category_prob_scalar
                expected += np.log(category_prob_scalar(p, j, k, t, int(y)))
        assert q_function(p, PosteriorTable(q), data, grid) == pytest.approx(expected, rel=1e-12)

    def test_rejects_unnormalized(self):
        p, data = small_problem(4)
        post = e_step(p, data, GRID)
        with pytest.raises(ValueError, match="sums to"):
            q_function(p, PosteriorTable(post.q * 2.0), data, GRID)


class TestQGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        p, data = small_problem(10 + seed, k=1 + seed % 2)
        post = e_step(p, data, GRID)
        grad = q_gradients(p, post, data, GRID)
        fun = lambda x: q_function(x, post, data, GRID)  # noqa: E731
        for group, idx in free_coordinates(p):
            fd = central_difference(fun, p, group, idx)
            an = getattr(grad, group)[idx]
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-6), (group, idx)

    def test_empty_class_has_zero_structural_gradient(self):
        p, data = small_problem(20)
        post = e_step(p.replace(class_probs=[1.0, 0.0]), data, GRID)
        g = q_gradients(p, post, data, GRID)
        assert g.mu[0] == 0.0 and g.sigma[0] == 0.0
        assert np.all(g.d1 == 0.0) and np.all(g.d2 == 0.0)

    def test_symmetric_items(self):
        rng = np.random.default_rng(21)
        p = make_params([[-0.5, 0.5]] * 2, [1.0, 1.0], class_probs=(0.6, 0.4),
                        class_means=(0.0, 0.5), class_sds=(1.0, 0.8))
        vals = random_responses(rng, 15, [3])
        data = ResponseMatrix(np.column_stack([vals[:, 0], vals[:, 0]]), n_categories=[3, 3])
        g = q_gradients(p, e_step(p, data, GRID), data, GRID)
        assert g.a[0] == pytest.approx(g.a[1], rel=1e-12)
        assert_allclose(g.tau[0], g.tau[1], rtol=1e-12)


class TestProx:
    @pytest.mark.parametrize("x,t,out", [(1.2, 0.5, 0.7), (0.3, 0.5, 0.0), (-1.0, 0.5, -0.5),
                                         (0.5, 0.5, 0.0), (-0.25, 0.0, -0.25)])
    def test_values(self, x, t, out):
        assert prox_l1(x, t) == pytest.approx(out, abs=1e-15)

    def test_negative_threshold(self):
        with pytest.raises(ValueError):
            prox_l1(1.0, -0.1)


class TestMStep:
    def test_nu_from_posterior_marginals(self):
        p = make_params([[0.0], [0.0]], [1.0, 1.0], class_probs=(0.5, 0.5))
        data = ResponseMatrix([[1, 2], [2, 1]])
        grid = QuadratureGrid.regular(11, 8.0, check=False)
        q = np.zeros((2, 2, 11))
        q[0, 0, 5], q[0, 1, 5] = 0.8, 0.2
        q[1, 0, 5], q[1, 1, 5] = 0.4, 0.6
        res = m_step(p, PosteriorTable(q), data, grid, 0.0, EMConfig())
        assert not res.stalled
        assert res.params.class_probs[1] == pytest.approx(0.4, abs=1e-15)

    def test_all_mass_on_reference(self):
        p, data = small_problem(30)
        post = e_step(p.replace(class_probs=[1.0, 0.0]), data, GRID)
        res = m_step(p.replace(class_probs=[1.0, 0.0]), post, data, GRID, 0.0, EMConfig())
        assert_allclose(res.params.class_probs, [1.0, 0.0])

    def test_huge_lambda_zeroes_dif(self):
        p, data = small_problem(31)
        res = m_step(p, e_step(p, data, GRID), data, GRID, 1e3 * data.n_respondents, EMConfig())
        assert not res.stalled
        assert np.all(res.params.dif_intercept == 0.0)
        assert np.all(res.params.dif_slope == 0.0)

    def test_descent_and_feasibility(self):
        for seed in range(5):
            p, data = small_problem(40 + seed, n=40, k=2)
            cur = penalized_objective(p, data, GRID, 0.5)
            res = m_step(p, e_step(p, data, GRID), data, GRID, 0.5, EMConfig(), cur)
            assert res.objective.penalized <= cur.penalized
            assert validate(res.params) == []

    def test_pinned_effects_stay_zero(self):
        p, data = small_problem(50, n=30)
        free = [ActiveEffect(0, 1, UNIFORM)]
        res = m_step(p, e_step(p, data, GRID), data, GRID, 0.0, EMConfig(), free_effects=free)
        assert set(active_set(res.params)) <= set(free)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(max_iters=0), dict(tol=0.0), dict(step_a=-1.0),
                                    dict(backtrack_factor=1.0), dict(scaling="newton"),
                                    dict(lambda_scale="x"), dict(n_starts=0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            EMConfig(**kw)

    def test_effective_lambda(self):
        assert EMConfig().effective_lambda(1e-3, 100, 10) == pytest.approx(1.0)
        assert EMConfig(lambda_scale="none").effective_lambda(0.2, 100, 10) == 0.2


@pytest.fixture(scope="module")
def sim500():
    return generate(SimulationConfig(n=500, j=15, pi=0.3), 7)


class TestFit:
    def test_trace_monotone_and_active_set(self, sim500):
        res = fit(sim500.responses, 1, 1e-4, GRID)
        assert np.all(np.diff(res.trace) <= 1e-10)
        nz = {(j, k, UNIFORM) for j, k in zip(*np.nonzero(res.params.dif_intercept))}
        nz |= {(j, k, NONUNIFORM) for j, k in zip(*np.nonzero(res.params.dif_slope))}
        assert set(res.active_set) == nz
        assert validate(res.params) == []
        assert res.objective.penalized == pytest.approx(res.trace[-1], abs=0)

    def test_accelerated_trace_monotone(self, sim500):
        res = fit(sim500.responses, 1, 1e-4, GRID, EMConfig(accelerate=True, max_iters=200))
        assert np.all(np.diff(res.trace) <= 1e-10)
        assert res.n_iters <= 200

    def test_k0_recovers_generating_parameters(self):
        cfg = SimulationConfig(n=1000, j=15, pi=(1.0, 0.0), n_dif_items=0)
        ds = generate(cfg, 3)
        res = fit(ds.responses, 0, 0.0, GRID)
        assert res.converged
        truth = ds.true_params
        rmse_a = np.sqrt(np.mean((res.params.slopes - truth.slopes) ** 2))
        rmse_tau = np.sqrt(np.mean((res.params.thresholds - truth.thresholds) ** 2))
        assert rmse_a < 0.1 and rmse_tau < 0.15

    def test_multistart_picks_best(self, sim500):
        one = fit(sim500.responses, 1, 1e-3, GRID, EMConfig(max_iters=60))
        many = fit(sim500.responses, 1, 1e-3, GRID, EMConfig(max_iters=60, n_starts=3, seed=1))
        assert many.objective.penalized <= one.objective.penalized + 1e-9

    def test_max_iters_flag(self, sim500):
        res = fit(sim500.responses, 1, 0.0, GRID, EMConfig(max_iters=2))
        assert not res.converged and res.n_iters == 2

    def test_wrong_init_classes(self, sim500):
        with pytest.raises(ValueError):
            fit(sim500.responses, 2, 0.0, GRID, init=default_init(sim500.responses, 1))


def _pack(p, free):
    # ordered thresholds as first value plus log gaps; slopes and SDs on the log scale
    tau = []
    for j in range(p.n_items):
        t = p.item_thresholds(j)
        tau += [t[0], *np.log(np.diff(t))]
    d1 = [p.dif_intercept[e.item, e.klass] for e in free if e.effect == UNIFORM]
    d2 = [p.dif_slope[e.item, e.klass] for e in free if e.effect == NONUNIFORM]
    z = np.log(p.class_probs[1:] / p.class_probs[0])
    return np.concatenate([tau, np.log(p.slopes), d1, d2, z, p.class_means[1:],
                           np.log(p.class_sds[1:])])


def _unpack(x, like, free):
    tau = np.full(like.thresholds.shape, np.inf)
    i = 0
    for j in range(like.n_items):
        m = like.n_categories[j] - 1
        tau[j, :m] = x[i] + np.r_[0.0, np.cumsum(np.exp(x[i + 1:i + m]))]
        i += m
    nj = like.n_items
    a = np.exp(x[i:i + nj])
    i += nj
    d1 = np.zeros_like(like.dif_intercept)
    d2 = np.zeros_like(like.dif_slope)
    for e in free:
        if e.effect == UNIFORM:
            d1[e.item, e.klass] = x[i]
            i += 1
    for e in free:
        if e.effect == NONUNIFORM:
            d2[e.item, e.klass] = x[i]
            i += 1
    k = like.n_classes_extra
    z = np.r_[0.0, x[i:i + k]]
    nu = np.exp(z - z.max())
    mu = np.r_[0.0, x[i + k:i + 2 * k]]
    sd = np.r_[1.0, np.exp(x[i + 2 * k:i + 3 * k])]
    return like.replace(thresholds=tau, slopes=a, dif_intercept=d1, dif_slope=d2,
                        class_probs=nu / nu.sum(), class_means=mu, class_sds=sd)


def _reference_only(p):
    return p.replace(dif_intercept=p.dif_intercept[:, :1], dif_slope=p.dif_slope[:, :1],
                     class_probs=[1.0], class_means=[0.0], class_sds=[1.0])


class TestUnpenalizedOracle:
    """EM at lambda = 0 against a bounded quasi-Newton polish of its own solution."""

    @staticmethod
    def polish(em, like, free, data, sd_bounds=None):
        def negll(x):
            return -marginal_loglik(_unpack(x, like, free), data, GRID)

        x0 = _pack(em.params, free)
        bounds = [(None, None)] * len(x0)
        if sd_bounds is not None:
            bounds[-1] = tuple(np.log(sd_bounds))
        return minimize(negll, x0, method="L-BFGS-B", bounds=bounds,
                        options={"ftol": 1e-15, "gtol": 1e-8, "maxiter": 5000})

    def test_single_class(self):
        ds = generate(SimulationConfig(n=500, j=6, pi=(1.0, 0.0), n_dif_items=0), 3)
        start = _reference_only(ds.true_params)
        em = fit(ds.responses, 0, 0.0, GRID, EMConfig(tol=1e-10, max_iters=5000), init=start)
        assert em.converged
        opt = self.polish(em, start, (), ds.responses)
        assert -em.loglik == pytest.approx(opt.fun, rel=1e-6)

    def test_two_classes_with_fixed_structure(self):
        cfg = SimulationConfig(n=1000, j=6, pi=0.4, n_dif_items=2, mu=(2.0,), sigma=(0.7,))
        ds = generate(cfg, 5)
        free = (ActiveEffect(0, 1, UNIFORM), ActiveEffect(1, 1, UNIFORM))
        start = ds.true_params.replace(dif_slope=np.zeros_like(ds.true_params.dif_slope))
        em = fit(ds.responses, 1, 0.0, GRID, EMConfig(tol=1e-9, max_iters=5000),
                 init=start, free_effects=free)
        assert em.converged
        # bounded SD keeps the polish away from the collapsed-class boundary
        opt = self.polish(em, start, free, ds.responses, sd_bounds=(0.3, 3.0))
        assert -em.loglik == pytest.approx(opt.fun, rel=1e-6)
