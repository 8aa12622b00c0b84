import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from spatialcvm.calibration import CalibrationConfig, build_threshold_grid, calibrate
from spatialcvm.errors import CalibrationMismatchError, InvalidDataError
from spatialcvm.lattice import build_lattice, kernel_weights, kernel_weights_at
from spatialcvm.mvn import chi2_survival
from spatialcvm.rank_test import FieldDataset, cvm_statistic, pooled_pseudo_obs, run_test, smoothed_copula


def sort_midranks(col):
    """Mid-ranks by sorting and averaging positions of equal runs."""
    col = list(col)
    order = sorted(range(len(col)), key=lambda i: col[i])
    ranks = [0.0] * len(col)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and col[order[j + 1]] == col[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return np.array(ranks)


@pytest.fixture(scope="module")
def small_calib():
    return calibrate(CalibrationConfig(grid_size=4, phi=0.2, p=2, M_per_dim=3, K=3))


def dataset(values, g):
    return FieldDataset(np.asarray(values, dtype=float), build_lattice(g))


class TestPseudoObs:
    def test_oracle_simple(self):
        vals = np.array([3.0, 1.0, 2.0])
        assert_allclose(sort_midranks(vals) / 4, [0.75, 0.25, 0.5])

    def test_pipeline_ranks(self):
        # 2x2 lattice, two fields: pooled column (3, 1, 2, 5, 4, 0, 7, 6)
        vals = np.array([3, 1, 2, 5, 4, 0, 7, 6], dtype=float).reshape(2, 4, 1)
        U = pooled_pseudo_obs(dataset(vals, 2))
        assert_allclose(U[:, 0], sort_midranks(vals.ravel()) / 9)

    def test_ties_midranks(self):
        vals = np.array([1.0, 1.0, 2.0, 0.5, 3.0, 3.0, 3.0, 9.0]).reshape(2, 4, 1)
        U = pooled_pseudo_obs(dataset(vals, 2))
        assert_allclose(U[:, 0], sort_midranks(vals.ravel()) / 9)
        assert_allclose(sort_midranks([1.0, 1.0, 2.0]) / 4, [0.375, 0.375, 0.75])

    def test_strictly_inside(self):
        rng = np.random.default_rng(0)
        U = pooled_pseudo_obs(dataset(rng.normal(size=(3, 9, 2)), 3))
        assert np.all((U > 0) & (U < 1))

    def test_nonfinite_rejected(self):
        vals = np.ones((2, 4, 1))
        vals[0, 0, 0] = np.nan
        with pytest.raises(InvalidDataError):
            dataset(vals, 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_increasing_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(3, 9, 2))
        base = pooled_pseudo_obs(dataset(v, 3))
        t = np.stack([np.exp(v[..., 0]) * 5 + 1, v[..., 1] ** 3], axis=-1)
        assert_array_equal(pooled_pseudo_obs(dataset(t, 3)), base)


class TestSmoothedCopula:
    def test_one_hot(self):
        grid = build_threshold_grid(2, 3)
        w = kernel_weights_at([[0, 0], [1, 1]], (0.0, 0.0), 1e-3)
        U = np.array([[0.3, 0.6], [0.9, 0.9]])
        F = smoothed_copula(U, grid, w)
        expected = np.all(U[0] <= grid.copula_thresholds, axis=1).astype(float)
        assert_array_equal(F, expected)

    def test_all_below(self):
        grid = build_threshold_grid(2, 4)
        w = kernel_weights(build_lattice(3), (0.5, 0.5), 0.4)
        F = smoothed_copula(np.full((9, 2), 0.01), grid, w)
        assert_allclose(F, 1.0, atol=1e-15)

    def test_hand_case(self):
        from spatialcvm.calibration import ThresholdGrid
        from spatialcvm.mvn import std_normal_quantile

        probs = np.array([0.3, 0.7])
        grid = ThresholdGrid(1, 2, probs, std_normal_quantile(probs)[:, None], probs[:, None])
        w = kernel_weights_at([[0.4, 0.5], [0.6, 0.5]], (0.5, 0.5), 1.0)
        assert_allclose(w.W, [0.5, 0.5])
        assert_allclose(smoothed_copula(np.array([0.25, 0.5]), grid, w), [0.5, 1.0])

    def test_range_and_monotone(self):
        rng = np.random.default_rng(4)
        grid = build_threshold_grid(2, 5)
        w = kernel_weights(build_lattice(5), (0.5, 0.5), 0.3)
        F = smoothed_copula(rng.uniform(size=(25, 2)), grid, w).reshape(5, 5)  # [second, first]
        assert np.all((F >= 0) & (F <= 1 + 1e-15))
        assert np.all(np.diff(F, axis=0) >= -1e-15)
        assert np.all(np.diff(F, axis=1) >= -1e-15)


class TestStatistic:
    def test_identical_columns(self):
        F = np.tile(np.linspace(0.1, 0.9, 5)[:, None], (1, 3))
        assert cvm_statistic(F, 50.0) == 0.0

    def test_hand_value(self):
        assert cvm_statistic(np.array([[0.4, 0.6]]), 100.0) == pytest.approx(1.0, abs=1e-12)

    def test_homogeneity(self):
        F = np.random.default_rng(1).uniform(size=(6, 3))
        assert cvm_statistic(F, 30.0) == pytest.approx(3 * cvm_statistic(F, 10.0), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.permutations(range(4)))
    def test_field_relabeling(self, seed, perm):
        F = np.random.default_rng(seed).uniform(size=(5, 4))
        assert cvm_statistic(F[:, list(perm)], 7.0) == pytest.approx(cvm_statistic(F, 7.0), rel=1e-12)


class TestRunTest:
    def test_identical_fields(self, small_calib):
        rng = np.random.default_rng(2)
        one = rng.lognormal(size=(16, 2))
        res = run_test(dataset(np.stack([one] * 3), 4), small_calib)
        assert res.Tn == 0.0
        assert res.p_value == 1.0

    def test_increasing_transform_exact(self, small_calib):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(3, 16, 2))
        r1 = run_test(dataset(np.exp(v), 4), small_calib)
        r2 = run_test(dataset(np.stack([2 * v[..., 0] - 1, np.arctan(v[..., 1])], -1), 4), small_calib)
        assert r1.p_value == r2.p_value
        assert r1.Tn == r2.Tn
        assert_array_equal(r1.copula, r2.copula)

    def test_pvalue_formula(self, small_calib):
        v = np.random.default_rng(5).normal(size=(3, 16, 2))
        r = run_test(dataset(v, 4), small_calib)
        assert r.p_value == chi2_survival(r.Tn / small_calib.a, small_calib.nu)
        assert 0 <= r.p_value <= 1
        assert r.copula.shape == (9, 3)

    def test_mismatch(self, small_calib):
        v = np.random.default_rng(5).normal(size=(2, 9, 1))
        with pytest.raises(CalibrationMismatchError) as err:
            run_test(dataset(v, 3), small_calib)
        assert set(err.value.fields) == {"grid_size", "K", "p"}

    def test_pvalue_nonincreasing_in_tn(self):
        tns = np.linspace(0, 20, 50)
        p = chi2_survival(tns / 1.3, 2.7)
        assert np.all(np.diff(p) <= 0)
