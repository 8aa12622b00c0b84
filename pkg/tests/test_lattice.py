import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from spatialcvm.errors import DegenerateBandwidthError, InvalidArgumentError
from spatialcvm.lattice import (
    KernelId,
    build_lattice,
    distance_matrix,
    effective_sample_size,
    kernel_weights,
    kernel_weights_at,
)

# 1/sum(W^2) for the 20x20 grid, gaussian kernel, h=0.5, s0=(0.5, 0.5),
# from a plain scalar loop over sites (no numpy).
EFF_N_20_H05 = 381.3098057920967


def test_corner_lattice_order():
    lat = build_lattice(2)
    assert_array_equal(lat.coords, [[0, 0], [1, 0], [0, 1], [1, 1]])


def test_reference_grid():
    lat = build_lattice(20)
    assert lat.n == 400
    assert lat.spacing == pytest.approx(1 / 19)
    assert lat.spacing == pytest.approx(0.05263, abs=1e-5)


def test_midpoint():
    assert_array_equal(build_lattice(3).coords[4], [0.5, 0.5])


@pytest.mark.parametrize("g", [0, 1, 2.5])
def test_bad_grid_size(g):
    with pytest.raises(InvalidArgumentError):
        build_lattice(g)


def test_corner_distances():
    d = distance_matrix(build_lattice(2))
    assert sorted(np.unique(np.round(d[np.triu_indices(4, 1)], 12))) == pytest.approx([1.0, math.sqrt(2)])
    assert_array_equal(np.diag(d), 0.0)


@pytest.mark.parametrize("g", [2, 3, 7])
def test_distance_matrix_properties(g):
    d = distance_matrix(build_lattice(g))
    assert_array_equal(d, d.T)
    assert_array_equal(np.diag(d), 0.0)
    assert d.max() == pytest.approx(math.sqrt(2))
    # triangle inequality over all triples
    assert np.all(d[:, None, :] <= d[:, :, None] + d[None, :, :] + 1e-12)


def test_single_site_weights():
    kw = kernel_weights_at([[0.3, 0.3]], (0.5, 0.5), 0.2)
    assert_array_equal(kw.W, [1.0])
    assert kw.eff_n == 1.0


@pytest.mark.parametrize("kernel", ["gaussian", "epanechnikov"])
def test_weights_symmetric_about_center(kernel):
    lat = build_lattice(9)
    W = kernel_weights(lat, (0.5, 0.5), 0.4, kernel).W.reshape(9, 9)
    assert_allclose(W, W[::-1, :], atol=1e-15)
    assert_allclose(W, W[:, ::-1], atol=1e-15)
    assert_allclose(W, W.T, atol=1e-15)
    assert W.sum() == pytest.approx(1.0, abs=1e-12)


def test_flat_kernel_limit():
    kw = kernel_weights(build_lattice(20), (0.5, 0.5), 1e6, "gaussian")
    assert np.max(np.abs(kw.W - 1 / 400)) <= 1e-8
    assert kw.eff_n == pytest.approx(400, rel=1e-9)


def test_golden_eff_n():
    kw = kernel_weights(build_lattice(20), (0.5, 0.5), 0.5, KernelId.GAUSSIAN)
    assert kw.eff_n == pytest.approx(EFF_N_20_H05, rel=1e-12)
    assert kw.eff_n == 1.0 / np.sum(kw.W**2)


def test_degenerate_bandwidth():
    # epanechnikov support smaller than the distance to every site
    with pytest.raises(DegenerateBandwidthError):
        kernel_weights(build_lattice(2), (0.5, 0.5), 0.1, "epanechnikov")


def test_invalid_bandwidth_and_reference():
    lat = build_lattice(3)
    with pytest.raises(InvalidArgumentError):
        kernel_weights(lat, (0.5, 0.5), 0.0)
    with pytest.raises(InvalidArgumentError):
        kernel_weights(lat, (1.5, 0.5), 0.3)


def test_eff_n_extremes():
    assert effective_sample_size(np.full(7, 1 / 7)) == pytest.approx(7)
    assert effective_sample_size([0, 0, 1, 0]) == 1.0
    with pytest.raises(InvalidArgumentError):
        effective_sample_size(np.zeros(3))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30).filter(lambda v: sum(v) > 1e-3),
       st.randoms(use_true_random=False))
def test_eff_n_bounds_and_permutation(raw, rnd):
    W = np.asarray(raw) / np.sum(raw)
    e = effective_sample_size(W)
    assert 1 - 1e-12 <= e <= len(W) + 1e-9
    perm = list(W)
    rnd.shuffle(perm)
    assert effective_sample_size(perm) == pytest.approx(e, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(1e-3, 1e3), st.sampled_from(["gaussian", "epanechnikov"]))
def test_weights_invariant_to_profile_scale(h, c, kernel):
    lat = build_lattice(6)
    base = kernel_weights(lat, (0.4, 0.6), h, kernel)
    from spatialcvm import lattice as mod

    orig = mod._profile
    try:
        mod._profile = lambda u, k: c * orig(u, k)
        scaled = kernel_weights(lat, (0.4, 0.6), h, kernel)
    finally:
        mod._profile = orig
    assert_allclose(scaled.W, base.W, rtol=1e-12, atol=1e-15)
