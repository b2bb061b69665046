"""Named example problems on the periodic unit grid.

``heat``            deterministic heat equation, oracle target
``heat_additive``   (G1) heat equation driven by additive noise cos(2 pi x) dW
``quasilinear``     (G2) a = 1, b = 0.5, F = sin r + cos(p)/4, G = sin(r)/2
``holder_additive`` (G3) like G1 with a coefficient 1/4-Holder in time
``anti_monotone``   negative control, A(v) = +v

Declared constants are derived by hand from the coefficient bounds; the probes
in :mod:`implicit_spde.probes` check them numerically.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .problem import (
    DeclaredConstants,
    EvolutionProblem,
    LinearPart,
    Nonlinearity,
    NoiseNonlinearity,
    QuasilinearSpec,
    assemble_quasilinear,
)
from .space import GridSpace

__all__ = ["GALLERY", "quasilinear_spec", "make_problem", "holder_weight"]

TWO_PI = 2.0 * np.pi


def _sin_mode(x):
    return np.sin(TWO_PI * x)


def _cos_mode(x):
    return np.cos(TWO_PI * x)


def _linear_constants(a: float, b: float, nu: float = 0.5, eta: float = 0.0) -> DeclaredConstants:
    # 2<w, a Lap w> + b^2 |Dw|^2 + lam |w|_V^2 <= L |w|_H^2 holds with
    # lam = L = a - b^2/2; a Lap is a^2-Lipschitz into V*, b D is b^2-Lipschitz into H.
    lam = a - 0.5 * b * b
    return DeclaredConstants(
        lam=lam if lam > 0 else 1e-12,
        L=max(lam, 0.0),
        L1=b * b,
        L2=a * a,
        nu=nu,
        holder_eta=eta,
        holder_C=0.0,
        nonlinear_lipschitz=0.0,
    )


def holder_weight(t, centre: float = 0.5, exponent: float = 0.25):
    """|t - centre|^exponent, the time factor of the (G3) noise coefficient."""
    return np.abs(np.asarray(t, dtype=float) - centre) ** exponent


def _heat(horizon: float = 1.0, a: float = 1.0, b: float = 0.0) -> QuasilinearSpec:
    return QuasilinearSpec(
        initial=_sin_mode,
        declared=_linear_constants(a, b),
        parabolicity=0.5 * a,
        a=a,
        b=(b,),
        horizon=horizon,
        name="heat",
    )


def _heat_additive(horizon: float = 1.0, a: float = 1.0, b: float = 0.0) -> QuasilinearSpec:
    return QuasilinearSpec(
        initial=_sin_mode,
        declared=_linear_constants(a, b),
        parabolicity=0.5 * a,
        a=a,
        b=(b,),
        g=(lambda t, x: _cos_mode(x),),
        horizon=horizon,
        name="heat_additive",
    )


def _holder_additive(
    horizon: float = 1.0, a: float = 1.0, b: float = 0.0, exponent: float = 0.25
) -> QuasilinearSpec:
    centre = horizon / 2

    def g(t, x):
        return holder_weight(t, centre, exponent) * _cos_mode(x)

    # |t^e - s^e| <= |t - s|^e for e <= 1 and |cos(2 pi x)|_H^2 = 1/2
    return QuasilinearSpec(
        initial=_sin_mode,
        declared=_linear_constants(a, b, nu=exponent, eta=0.5),
        parabolicity=0.5 * a,
        a=a,
        b=(b,),
        g=(g,),
        horizon=horizon,
        noise_time_dependent=True,
        name="holder_additive",
    )


def _quasilinear(horizon: float = 1.0, a: float = 1.0, b: float = 0.5) -> QuasilinearSpec:
    F = Nonlinearity(
        func=lambda t, x, p, r: np.sin(r) + 0.25 * np.cos(p),
        dp=lambda t, x, p, r: -0.25 * np.sin(p),
        dr=lambda t, x, p, r: np.cos(r),
        bound=1.25,
    )
    G = NoiseNonlinearity(
        func=lambda t, x, r: 0.5 * np.sin(r),
        dr=lambda t, x, r: 0.5 * np.cos(r),
        bound=0.5,
    )
    # With w = u - v, |dF| <= |w| + |Dw|/4 and |dB| <= b|Dw| + |w|/2 pointwise.
    # For a = 1, b = 1/2 this gives lam = 1, L = 4, L1 = 1/2 and
    # |dA|_{V*} <= (1 + sqrt(17)/4) |w|_V, so L2 = 4.13 < 4.2.
    declared = DeclaredConstants(
        lam=1.0, L=4.0, L1=0.5, L2=4.2, nu=0.5, nonlinear_lipschitz=F.bound
    )
    return QuasilinearSpec(
        initial=_sin_mode,
        declared=declared,
        parabolicity=0.8,
        a=a,
        b=(b,),
        F=F,
        G=(G,),
        horizon=horizon,
        name="quasilinear",
    )


def _anti_monotone(space: GridSpace, horizon: float = 1.0) -> EvolutionProblem:
    n = space.n
    ones = np.ones(n)
    zero = np.zeros(n)
    return EvolutionProblem(
        space=space,
        drift=lambda t, v: v.copy(),
        diffusion=lambda t, v: np.zeros(np.shape(v)[:-1] + (1, n)),
        d1=1,
        initial=space.sample(_sin_mode),
        horizon=horizon,
        declared=DeclaredConstants(lam=1.0, L=0.0, L1=0.0, L2=1.0, nonlinear_lipschitz=0.0),
        drift_jacobian=lambda t, v: (zero, ones, zero),
        linear_part=LinearPart(lambda t: (zero, ones, zero)),
        is_linear=True,
        name="anti_monotone",
    )


_SPECS: dict[str, Callable[..., QuasilinearSpec]] = {
    "heat": _heat,
    "heat_additive": _heat_additive,
    "G1": _heat_additive,
    "quasilinear": _quasilinear,
    "G2": _quasilinear,
    "holder_additive": _holder_additive,
    "G3": _holder_additive,
}

GALLERY = tuple(sorted(set(_SPECS) | {"anti_monotone"}))


def quasilinear_spec(name: str, **overrides) -> QuasilinearSpec:
    """Return the coefficient description of a gallery entry.

    Raises:
        KeyError: for unknown names or entries that are not quasilinear.
    """
    try:
        builder = _SPECS[name]
    except KeyError:
        raise KeyError(f"no quasilinear gallery entry named {name!r}") from None
    spec = builder(**overrides)
    params = {"name": name, **overrides}
    object.__setattr__(spec, "params", params)
    return spec


def make_problem(name: str, n: int = 64, **overrides) -> EvolutionProblem:
    """Assemble a gallery problem on an ``n`` point grid.

    ``overrides`` go to the entry's builder (``horizon``, ``a``, ``b``, ...); an
    unexpected keyword raises ``TypeError``.
    """
    space = GridSpace(n)
    if name == "anti_monotone":
        problem = _anti_monotone(space, **overrides)
        object.__setattr__(problem, "params", {"name": name, "n": n, **overrides})
        return problem
    spec = quasilinear_spec(name, **overrides)
    object.__setattr__(spec, "params", {**spec.params, "n": n})
    problem = assemble_quasilinear(spec, space)
    if name == "heat" and spec.b == (0.0,) and not callable(spec.a):
        object.__setattr__(problem, "heat_coefficient", float(spec.a))
    return problem

