import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from implicit_spde import space as sp
from implicit_spde.space import DimensionError, GridSpace, StateVector

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def grid_vectors(n):
    return arrays(np.float64, n, elements=finite)


def test_h_norm_examples():
    assert sp.h_norm_sq(StateVector(np.ones(8), GridSpace(8))) == pytest.approx(1.0, abs=1e-15)
    assert sp.h_norm_sq(StateVector(np.zeros(8), GridSpace(8))) == 0.0
    assert sp.h_norm_sq(StateVector([1.0, 0, 0, 0], GridSpace(4))) == 0.25


def test_v_norm_examples():
    g = GridSpace(16)
    assert g.v_norm_sq(np.full(16, 3.0)) == pytest.approx(9.0, rel=1e-14)
    assert g.v_norm_sq(np.zeros(16)) == 0.0


def test_v_norm_of_sine_matches_analytic_value():
    g = GridSpace(64)
    v = np.sin(2 * np.pi * g.nodes)
    # direct summation oracle: h sum sin^2 + h sum ((v_{i+1} - v_i)/h)^2
    direct = g.h * np.sum(v**2) + g.h * np.sum(((np.roll(v, -1) - v) / g.h) ** 2)
    assert g.v_norm_sq(v) == pytest.approx(direct, rel=1e-13)
    assert g.v_norm_sq(v) == pytest.approx(0.5 * (1 + 4 * np.pi**2), rel=0.01)


def test_forward_diff_examples():
    g = GridSpace(4)
    assert np.array_equal(g.diff(np.array([0.0, 1.0, 0.0, 0.0])), [4.0, -4.0, 0.0, 0.0])
    assert np.all(g.diff(np.full(4, 2.5)) == 0.0)
    out = sp.forward_diff(StateVector([0.0, 1.0, 0.0, 0.0], g))
    assert isinstance(out, StateVector)


@given(grid_vectors(12), grid_vectors(12), finite, finite)
def test_forward_diff_linear(u, w, a, b):
    g = GridSpace(12)
    lhs = g.diff(a * u + b * w)
    rhs = a * g.diff(u) + b * g.diff(w)
    assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-6 * (1 + np.abs(rhs).max()))


def test_laplacian_stencil_by_hand():
    g = GridSpace(4)
    v = np.array([1.0, 2.0, 4.0, 8.0])
    expected = (np.roll(v, 1) - 2 * v + np.roll(v, -1)) * 16
    assert np.allclose(g.div_weighted(g.diff(v), np.ones(4)), expected, rtol=0, atol=1e-12)
    assert np.allclose(g.laplacian(v), expected, rtol=0, atol=1e-12)


def test_div_weighted_constant():
    g = GridSpace(10)
    assert np.all(g.div_weighted(g.diff(np.full(10, 7.0)), np.ones(10)) == 0.0)


def test_div_weighted_adjoint_identity(rng):
    # <div(a Dv), phi> = -(a Dv, Dphi)
    g = GridSpace(16)
    for _ in range(20):
        v, phi = rng.standard_normal((2, 16))
        a = rng.uniform(0.5, 2.0, 16)
        lhs = g.inner(g.div_weighted(g.diff(v), a), phi)
        rhs = -g.inner(a * g.diff(v), g.diff(phi))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_div_weighted_rejects_mismatched_lengths():
    g = GridSpace(8)
    with pytest.raises(DimensionError):
        sp.div_weighted(StateVector(np.zeros(8), g), np.ones(7))


def test_diff_adjoint_composes_to_minus_laplacian(rng):
    g = GridSpace(32)
    v = rng.standard_normal(32)
    assert np.allclose(g.diff_adjoint(g.diff(v)), -g.laplacian(v), atol=1e-9)


@settings(max_examples=50)
@given(grid_vectors(16))
def test_norm_sandwich(v):
    g = GridSpace(16)
    assert g.h_norm_sq(v) <= g.v_norm_sq(v) * (1 + 1e-15)


@given(grid_vectors(9), grid_vectors(9))
def test_inner_product_symmetric(u, v):
    g = GridSpace(9)
    assert g.inner(u, v) == g.inner(v, u)


@settings(max_examples=50)
@given(grid_vectors(16))
def test_laplacian_negative_semidefinite(v):
    g = GridSpace(16)
    assert g.inner(v, g.laplacian(v)) <= 1e-9 * (1 + g.v_norm_sq(v))


def test_laplacian_kernel_is_constants(rng):
    g = GridSpace(16)
    assert g.inner(np.full(16, 3.0), g.laplacian(np.full(16, 3.0))) == 0.0
    v = rng.standard_normal(16)
    assert g.inner(v, g.laplacian(v)) < -1e-3


def test_vstar_norm_against_dense_oracle(rng):
    g = GridSpace(12)
    D = (np.roll(np.eye(12), 1, axis=1) - np.eye(12)) / g.h
    gram = np.eye(12) + D.T @ D
    for _ in range(5):
        w = rng.standard_normal(12)
        expected = g.h * w @ np.linalg.solve(gram, w)
        assert g.vstar_norm_sq(w) == pytest.approx(expected, rel=1e-12)


def test_vstar_is_dual_of_v(rng):
    # |w|_{V*} = sup_phi (w, phi) / |phi|_V, attained at phi = (I - Lap)^{-1} w
    g = GridSpace(16)
    w = rng.standard_normal(16)
    best = np.sqrt(g.vstar_norm_sq(w))
    for _ in range(200):
        phi = rng.standard_normal(16)
        assert g.inner(w, phi) / np.sqrt(g.v_norm_sq(phi)) <= best * (1 + 1e-12)


def test_statevector_contract():
    g = GridSpace(4)
    with pytest.raises(ValueError):
        StateVector([0.0, np.nan, 0.0, 0.0], g)
    with pytest.raises(DimensionError):
        StateVector([0.0, 1.0], g)
    s = StateVector([1.0, 2.0, 3.0, 4.0], g)
    with pytest.raises(ValueError):
        s.values[0] = 5.0
    total = (s + s - s) * 2.0
    assert np.array_equal(total.values, [2.0, 4.0, 6.0, 8.0])


def test_grid_invariants():
    for n in (2, 3, 64, 1000):
        g = GridSpace(n)
        assert abs(g.h * n - 1.0) < 1e-15
        assert np.all(g.diff(np.ones(n)) == 0.0)
    with pytest.raises(ValueError):
        GridSpace(1)
