"""Evolution problems du = A(t,u) dt + sum_k B_k(t,u) dW^k on a grid.

Drift values are stored in H coordinates: ``drift(t, v)`` returns the vector
``w`` with ``(w, phi)_H = <A(t, v), phi>`` for every grid function ``phi``.
Evaluators take arrays of shape ``(..., n)``; ``diffusion`` returns
``(..., d1, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .space import GridSpace

__all__ = [
    "DeclaredConstants",
    "LinearPart",
    "EvolutionProblem",
    "Nonlinearity",
    "NoiseNonlinearity",
    "QuasilinearSpec",
    "ParabolicityError",
    "assemble_quasilinear",
    "parabolicity_margin",
]

Coefficient = Union[float, Callable[[float, np.ndarray], np.ndarray]]
Bands = tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass(frozen=True)
class DeclaredConstants:
    """Constants the problem author claims for the structural conditions.

    ``lam``/``L`` belong to strong monotonicity, ``L1`` and ``L2`` to the
    Lipschitz bounds on B and A (``L2=None`` flags a non-Lipschitz drift),
    ``nu``/``holder_eta``/``holder_C`` to the time regularity of B, and
    ``nonlinear_lipschitz`` bounds the part of the drift outside its linear
    operator (used to decide whether a fixed-point inner solve contracts).
    """

    lam: float
    L: float
    L1: Optional[float] = None
    L2: Optional[float] = None
    nu: float = 0.5
    holder_eta: float = 0.0
    holder_C: float = 0.0
    nonlinear_lipschitz: Optional[float] = 0.0

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.L < 0:
            raise ValueError(f"L must be nonnegative, got {self.L}")
        for name in ("L1", "L2"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")
        if not 0 < self.nu <= 0.5:
            raise ValueError(f"nu must lie in (0, 1/2], got {self.nu}")


@dataclass(frozen=True)
class LinearPart:
    """Linear operator L(t) of the drift as cyclic tridiagonal bands, plus forcing."""

    bands: Callable[[float], Bands]
    forcing: Optional[Callable[[float], np.ndarray]] = None
    time_dependent: bool = False


@dataclass(frozen=True, eq=False)
class EvolutionProblem:
    space: GridSpace
    drift: Callable[[float, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray], np.ndarray]
    d1: int
    initial: np.ndarray
    horizon: float
    declared: DeclaredConstants
    drift_jacobian: Optional[Callable[[float, np.ndarray], Bands]] = None
    linear_part: Optional[LinearPart] = None
    is_linear: bool = False
    drift_time_dependent: bool = False
    diffusion_time_dependent: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)
    heat_coefficient: Optional[float] = None

    def __post_init__(self) -> None:
        if self.d1 < 1:
            raise ValueError("need at least one Wiener component")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        initial = self.space.check(self.initial)
        if initial.ndim != 1 or not np.isfinite(self.space.v_norm_sq(initial)):
            raise ValueError("initial datum must be a finite grid vector")
        if self.is_linear and self.linear_part is None:
            raise ValueError("a linear problem must carry its linear part")
        object.__setattr__(self, "initial", initial.copy())

    @property
    def drift_linear_part(self) -> Optional[LinearPart]:
        """The affine representation of the whole drift, when one exists."""
        return self.linear_part if self.is_linear else None


@dataclass(frozen=True)
class Nonlinearity:
    """Pointwise drift term F(t, x, p, r) with its partial derivatives.

    ``bound`` is the declared bound on |dF/dp| + |dF/dr|.
    """

    func: Callable
    dp: Callable
    dr: Callable
    bound: float


@dataclass(frozen=True)
class NoiseNonlinearity:
    """Pointwise noise term G_k(t, x, r); ``bound`` caps |dG/dr|."""

    func: Callable
    dr: Callable
    bound: float


@dataclass(frozen=True)
class QuasilinearSpec:
    """Coefficients of du = (D(a Du) + a0 u + F + f) dt + sum_k (b_k Du + b0_k u + G_k + g_k) dW^k.

    Coefficients are constants or callables ``(t, x) -> array``.  ``parabolicity``
    is the constant required of a - 1/2 sum_k b_k^2.
    """

    initial: Callable[[np.ndarray], np.ndarray]
    declared: DeclaredConstants
    parabolicity: float
    a: Coefficient = 1.0
    a0: Coefficient = 0.0
    b: Sequence[Coefficient] = (0.0,)
    b0: Optional[Sequence[Coefficient]] = None
    F: Optional[Nonlinearity] = None
    G: Optional[Sequence[Optional[NoiseNonlinearity]]] = None
    f: Optional[Coefficient] = None
    g: Optional[Sequence[Optional[Coefficient]]] = None
    horizon: float = 1.0
    drift_time_dependent: bool = False
    noise_time_dependent: bool = False
    name: str = "quasilinear"
    params: dict = field(default_factory=dict)

    @property
    def d1(self) -> int:
        return len(self.b)

    def __post_init__(self) -> None:
        if not self.parabolicity > 0:
            raise ValueError("parabolicity constant must be positive")
        for name in ("b0", "G", "g"):
            seq = getattr(self, name)
            if seq is not None and len(seq) != self.d1:
                raise ValueError(f"{name} has {len(seq)} entries, expected {self.d1}")
        bounds = [self.F.bound] if self.F is not None else []
        bounds += [G.bound for G in (self.G or ()) if G is not None]
        if not all(np.isfinite(bounds)):
            raise ValueError("declared Lipschitz bounds must be finite")


class ParabolicityError(ValueError):
    """Stochastic parabolicity (A1) fails at a sampled point."""

    def __init__(self, t: float, x: float, margin: float, required: float):
        self.t, self.x, self.margin, self.required = t, x, margin, required
        super().__init__(
            f"(A1) stochastic parabolicity violated at t={t:.6g}, x={x:.6g}: "
            f"a - 1/2 sum b^2 = {margin:.6g} < {required:.6g}"
        )


def _coef(c: Coefficient, t: float, x: np.ndarray) -> np.ndarray:
    if callable(c):
        return np.broadcast_to(np.asarray(c(t, x), dtype=float), x.shape)
    return np.full(x.shape, float(c))


def parabolicity_margin(spec: QuasilinearSpec, space: GridSpace, n_times: int = 17):
    """Minimum of a - 1/2 sum_k b_k^2 over a (t, x) lattice, with its location."""
    x = space.nodes
    best = (np.inf, 0.0, 0.0)
    for t in np.linspace(0.0, spec.horizon, n_times):
        margin = _coef(spec.a, t, x) - 0.5 * sum(_coef(bk, t, x) ** 2 for bk in spec.b)
        j = int(np.argmin(margin))
        if margin[j] < best[0]:
            best = (float(margin[j]), float(t), float(x[j]))
    return best


class _Cached:
    """Evaluate a (t, x) coefficient once when it does not depend on time."""

    def __init__(self, c: Optional[Coefficient], x: np.ndarray, time_dependent: bool):
        self.c, self.x = c, x
        self.fixed = None
        if c is not None and not (time_dependent and callable(c)):
            self.fixed = _coef(c, 0.0, x)

    def __call__(self, t: float) -> Optional[np.ndarray]:
        if self.c is None:
            return None
        if self.fixed is not None:
            return self.fixed
        return _coef(self.c, t, self.x)


def assemble_quasilinear(spec: QuasilinearSpec, space: GridSpace) -> EvolutionProblem:
    """Build the Galerkin drift and diffusion of a quasilinear SPDE on ``space``.

    Raises:
        ParabolicityError: if a - 1/2 sum b_k^2 drops below the declared
            parabolicity constant anywhere on the sampling lattice.
    """
    margin, t_bad, x_bad = parabolicity_margin(spec, space)
    if margin < spec.parabolicity:
        raise ParabolicityError(t_bad, x_bad, margin, spec.parabolicity)

    x = space.nodes
    h = space.h
    td, tn = spec.drift_time_dependent, spec.noise_time_dependent
    a = _Cached(spec.a, x, td)
    a0 = _Cached(spec.a0, x, td)
    f = _Cached(spec.f, x, td)
    b = [_Cached(bk, x, tn) for bk in spec.b]
    b0 = [_Cached(c, x, tn) for c in (spec.b0 or [None] * spec.d1)]
    g = [_Cached(c, x, tn) for c in (spec.g or [None] * spec.d1)]
    G = list(spec.G or [None] * spec.d1)
    F = spec.F

    def linear_bands(t: float) -> Bands:
        at = a(t)
        at_prev = np.roll(at, 1)
        sub = at_prev / h**2
        sup = at / h**2
        diag = -(at + at_prev) / h**2 + a0(t)
        return sub, diag, sup

    def drift(t: float, v: np.ndarray) -> np.ndarray:
        dv = space.diff(v)
        out = space.div_weighted(dv, a(t)) + a0(t) * v
        if F is not None:
            out = out + F.func(t, x, dv, v)
        ft = f(t)
        if ft is not None:
            out = out + ft
        return out

    def drift_jacobian(t: float, v: np.ndarray) -> Bands:
        sub, diag, sup = linear_bands(t)
        if F is None:
            return sub, diag, sup
        dv = space.diff(v)
        fp = F.dp(t, x, dv, v)
        fr = F.dr(t, x, dv, v)
        return (np.broadcast_to(sub, np.shape(v)), diag + fr - fp / h, sup + fp / h)

    def diffusion(t: float, v: np.ndarray) -> np.ndarray:
        dv = space.diff(v)
        out = []
        for k in range(spec.d1):
            term = b[k](t) * dv
            c0 = b0[k](t)
            if c0 is not None:
                term = term + c0 * v
            if G[k] is not None:
                term = term + G[k].func(t, x, v)
            gk = g[k](t)
            if gk is not None:
                term = term + gk
            out.append(term)
        return np.stack(out, axis=-2)

    forcing = (lambda t: f(t)) if spec.f is not None else None
    linear = LinearPart(linear_bands, forcing, time_dependent=td)
    return EvolutionProblem(
        space=space,
        drift=drift,
        diffusion=diffusion,
        d1=spec.d1,
        initial=space.sample(spec.initial),
        horizon=spec.horizon,
        declared=spec.declared,
        drift_jacobian=drift_jacobian,
        linear_part=linear,
        is_linear=F is None,
        drift_time_dependent=td,
        diffusion_time_dependent=tn,
        name=spec.name,
        params=dict(spec.params),
    )
