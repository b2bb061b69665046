import numpy as np
import pytest

from implicit_spde import banded, gallery
from implicit_spde.problem import (
    DeclaredConstants,
    Nonlinearity,
    ParabolicityError,
    QuasilinearSpec,
    assemble_quasilinear,
    parabolicity_margin,
)
from implicit_spde.space import GridSpace


def sin_mode(x):
    return np.sin(2 * np.pi * x)


def spec(**kw):
    base = dict(initial=sin_mode, declared=DeclaredConstants(lam=0.4, L=0.4, L1=1.0, L2=1.0),
                parabolicity=0.4)
    base.update(kw)
    return QuasilinearSpec(**base)


def test_heat_drift_is_discrete_laplacian():
    g = GridSpace(32)
    p = assemble_quasilinear(spec(), g)
    v = sin_mode(g.nodes)
    assert np.allclose(p.drift(0.0, v), g.laplacian(v), rtol=0, atol=1e-10)
    assert p.is_linear


def test_parabolicity_accepts_and_rejects():
    g = GridSpace(16)
    assemble_quasilinear(spec(b=(1.0,)), g)  # margin 1 - 0.5 = 0.5 >= 0.4
    with pytest.raises(ParabolicityError, match=r"\(A1\)") as info:
        assemble_quasilinear(spec(b=(np.sqrt(2.0),)), g)
    assert info.value.margin == pytest.approx(0.0, abs=1e-15)
    assert info.value.required == 0.4


def test_parabolicity_margin_locates_minimum():
    g = GridSpace(16)
    s = spec(a=lambda t, x: 1.0 + 0.5 * np.cos(2 * np.pi * x), b=(0.5,))
    margin, t, x = parabolicity_margin(s, g)
    assert margin == pytest.approx(0.5 - 0.125)
    assert x == pytest.approx(0.5)


def test_linear_drift_equals_linear_part_plus_forcing(rng):
    g = GridSpace(24)
    s = spec(a=lambda t, x: 1.0 + 0.3 * np.sin(2 * np.pi * x) * (1 + t), a0=-0.5,
             f=lambda t, x: np.cos(2 * np.pi * x) * t, drift_time_dependent=True)
    p = assemble_quasilinear(s, g)
    lin = p.drift_linear_part
    for t in (0.0, 0.3, 1.0):
        v = rng.standard_normal(24)
        expected = banded.matvec(*lin.bands(t), v) + lin.forcing(t)
        got = p.drift(t, v)
        assert np.allclose(got, expected, rtol=0, atol=1e-12 * np.abs(got).max())


def test_jacobian_matches_finite_differences(rng):
    p = gallery.make_problem("G2", n=16)
    v = rng.standard_normal(16)
    J = banded.to_dense(*p.drift_jacobian(0.2, v))
    eps = 1e-6
    fd = np.empty((16, 16))
    for j in range(16):
        e = np.zeros(16)
        e[j] = eps
        fd[:, j] = (p.drift(0.2, v + e) - p.drift(0.2, v - e)) / (2 * eps)
    assert np.allclose(J, fd, rtol=1e-6, atol=1e-4)
    assert not p.is_linear


def test_batched_evaluation_matches_rows(rng):
    p = gallery.make_problem("G2", n=16)
    V = rng.standard_normal((5, 16))
    assert p.diffusion(0.0, V).shape == (5, 1, 16)
    for b in range(5):
        assert np.array_equal(p.drift(0.1, V)[b], p.drift(0.1, V[b]))
        assert np.array_equal(p.diffusion(0.1, V)[b], p.diffusion(0.1, V[b]))


def test_declared_constants_validation():
    with pytest.raises(ValueError):
        DeclaredConstants(lam=0.0, L=1.0)
    with pytest.raises(ValueError):
        DeclaredConstants(lam=1.0, L=-1.0)
    with pytest.raises(ValueError):
        DeclaredConstants(lam=1.0, L=1.0, L1=-1.0)
    with pytest.raises(ValueError):
        DeclaredConstants(lam=1.0, L=1.0, nu=0.75)


def test_spec_validation():
    with pytest.raises(ValueError):
        spec(parabolicity=0.0)
    with pytest.raises(ValueError):
        spec(g=(None, None))
    with pytest.raises(ValueError):
        spec(F=Nonlinearity(np.sin, np.sin, np.sin, bound=np.inf))


def test_problem_rejects_nan_initial():
    with pytest.raises(ValueError):
        assemble_quasilinear(spec(initial=lambda x: x * np.nan), GridSpace(8))
