"""Tests for the lambda grid, BIC bookkeeping, refits and path selection."""

import math

import numpy as np
import pytest

from ordif.em import NONUNIFORM, UNIFORM, ActiveEffect, EMConfig, active_set
from ordif.model import QuadratureGrid, ResponseMatrix
from ordif.selection import (
    bic,
    compare_k,
    confirmatory_refit,
    default_lambda_grid,
    degrees_of_freedom,
    run_path,
    select_index,
)
from ordif.simulation import SimulationConfig, generate

GRID = QuadratureGrid.regular()
SMALL = SimulationConfig(n=300, j=6, n_dif_items=2, pi=0.4, mu=(1.0,), sigma=(0.8,))


def responses(n_items, m=4):
    rng = np.random.default_rng(0)
    return ResponseMatrix(rng.integers(1, m + 1, (40, n_items)), n_categories=[m] * n_items)


class TestLambdaGrid:
    def test_endpoints_and_length(self):
        g = default_lambda_grid()
        assert len(g) == 10
        assert g[0] == pytest.approx(1e-6, rel=1e-14)
        assert g[-1] == pytest.approx(1e-2, rel=1e-14)

    def test_log_equal_spacing(self):
        g = default_lambda_grid()
        assert np.all(np.diff(g) > 0)
        np.testing.assert_allclose(np.diff(np.log10(g)), 4.0 / 9.0, rtol=1e-12)
        assert math.log10(g[1]) == pytest.approx(-5.5556, abs=1e-4)


class TestDegreesOfFreedom:
    def test_empty_active_set(self):
        assert degrees_of_freedom([], responses(15), 1) == 63

    def test_one_more_effect(self):
        assert degrees_of_freedom([ActiveEffect(3, 1, UNIFORM)], responses(15), 1) == 64

    def test_no_mixture(self):
        assert degrees_of_freedom([], responses(15), 0) == 60

    def test_both_effect_types_count(self):
        act = [ActiveEffect(0, 1, UNIFORM), ActiveEffect(0, 1, NONUNIFORM), ActiveEffect(2, 2, UNIFORM)]
        assert degrees_of_freedom(act, responses(15), 2) == 45 + 15 + 3 + 6

    def test_inconsistent_effect(self):
        with pytest.raises(ValueError):
            degrees_of_freedom([ActiveEffect(0, 2, UNIFORM)], responses(15), 1)
        with pytest.raises(ValueError):
            degrees_of_freedom([ActiveEffect(15, 1, UNIFORM)], responses(15), 1)


class TestBIC:
    def test_worked_example(self):
        assert bic(-100.0, 100, 5) == pytest.approx(223.02585093, abs=1e-8)

    def test_zero_df(self):
        assert bic(-42.5, 10, 0) == 85.0

    def test_doubling_df(self):
        assert bic(-10.0, 50, 8) - bic(-10.0, 50, 4) == pytest.approx(4 * math.log(50), rel=1e-14)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            bic(-1.0, 0, 1)

    def test_first_minimum_on_ties(self):
        assert select_index([3.0, 1.0, 1.0, 2.0]) == 1


@pytest.fixture(scope="module")
def small_path():
    ds = generate(SMALL, 1)
    lams = np.logspace(-5, -2, 5)
    return ds, run_path(ds.responses, 1, lams, GRID)


class TestRunPath:
    def test_single_lambda(self):
        ds = generate(SMALL, 2)
        path = run_path(ds.responses, 1, [1e-3], GRID)
        assert len(path.entries) == 1 and path.selected_index == 0

    def test_bic_identity(self, small_path):
        ds, path = small_path
        n = ds.responses.n_respondents
        for e in path.entries:
            expected = -2.0 * e.refit.loglik + math.log(n) * e.df
            assert e.bic == pytest.approx(expected, abs=1e-10)
            assert e.df == degrees_of_freedom(e.fit.active_set, ds.responses, 1)

    def test_selected_is_first_argmin(self, small_path):
        _, path = small_path
        assert path.selected_index == int(np.argmin(path.bics))

    def test_refit_respects_pinned_zeros(self, small_path):
        _, path = small_path
        for e in path.entries:
            assert e.refit.objective.lam == 0.0
            assert set(active_set(e.refit.params)) <= set(e.fit.active_set)

    def test_refit_loglik_not_below_penalized(self, small_path):
        _, path = small_path
        for e in path.entries:
            assert e.refit.loglik >= e.fit.loglik - 1e-6

    def test_active_set_shrinks_with_lambda(self, small_path):
        _, path = small_path
        sizes = [len(e.fit.active_set) for e in path.entries]
        ok = sum(b <= a for a, b in zip(sizes, sizes[1:]))
        assert ok >= 0.9 * (len(sizes) - 1)

    def test_rejects_unsorted_grid(self):
        with pytest.raises(ValueError):
            run_path(responses(3), 1, [1e-2, 1e-3], GRID)

    def test_single_class_path_shares_fit(self):
        ds = generate(SMALL, 3)
        path = run_path(ds.responses, 0, [1e-4, 1e-3], GRID)
        assert path.entries[0].fit is path.entries[1].fit
        assert path.selected_index == 0


class TestRefit:
    def test_empty_active_set_single_class(self):
        ds = generate(SMALL, 4)
        res = confirmatory_refit(ds.responses, 0, [], GRID)
        assert res.converged and res.active_set == ()

    def test_pinned_effect_stays_zero(self):
        ds = generate(SMALL, 4)
        keep = [ActiveEffect(0, 1, UNIFORM)]
        res = confirmatory_refit(ds.responses, 1, keep, GRID, EMConfig(max_iters=200))
        assert set(res.active_set) <= set(keep)


@pytest.mark.slow
class TestWarmStart:
    def test_selected_structure_stable(self):
        lams = np.logspace(-5, -2, 4)
        agree = 0
        for seed in range(10):
            ds = generate(SMALL, 100 + seed)
            warm = run_path(ds.responses, 1, lams, GRID, warm_start=True)
            cold = run_path(ds.responses, 1, lams, GRID, warm_start=False)
            agree += set(warm.selected.fit.active_set) == set(cold.selected.fit.active_set)
        assert agree >= 9


class TestCompareK:
    def test_table_and_best(self):
        ds = generate(SMALL, 5)
        cmp = compare_k(ds.responses, [1, 0], [1e-3], GRID)
        rows = cmp.table
        assert [r[0] for r in rows] == [0, 1]
        assert cmp.best_k == rows[int(np.argmin([r[2] for r in rows]))][0]

    def test_empty_candidates(self):
        with pytest.raises(ValueError):
            compare_k(responses(3), [], [1e-3], GRID)
