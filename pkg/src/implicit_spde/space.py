"""Discrete Gelfand triple V -> H -> V* on the periodic unit grid.

H is L2 on the torus [0, 1) sampled at ``n`` nodes, V is W^1_2 with the
gradient realized by the periodic forward difference.  Every norm carries the
spacing weight ``h`` so magnitudes are comparable with the continuum ones.

All array-level helpers accept values of shape ``(..., n)`` and act on the
last axis, which lets the time stepper push a whole block of Monte-Carlo
paths through the same call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridSpace",
    "StateVector",
    "h_inner",
    "h_norm_sq",
    "v_norm_sq",
    "vstar_norm_sq",
    "forward_diff",
    "div_weighted",
    "laplacian",
    "DimensionError",
]


class DimensionError(ValueError):
    """Raised when an array does not match the grid it is used with."""


@dataclass(frozen=True)
class GridSpace:
    """Uniform periodic grid of ``n`` points on the unit torus."""

    n: int
    boundary: str = field(default="periodic", init=False)

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"grid needs an integer n >= 2, got {self.n!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n) * self.h

    def check(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1:] != (self.n,):
            raise DimensionError(
                f"expected trailing dimension {self.n}, got shape {values.shape}"
            )
        return values

    # Array level operations, last axis is space.

    def inner(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.h * np.sum(u * v, axis=-1)

    def h_norm_sq(self, v: np.ndarray) -> np.ndarray:
        return self.h * np.sum(v * v, axis=-1)

    def diff(self, v: np.ndarray) -> np.ndarray:
        """Forward difference (v[i+1] - v[i]) / h with periodic wrap."""
        return (np.roll(v, -1, axis=-1) - v) / self.h

    def diff_adjoint(self, w: np.ndarray) -> np.ndarray:
        """H-adjoint of :meth:`diff`: (w[i-1] - w[i]) / h."""
        return (np.roll(w, 1, axis=-1) - w) / self.h

    def v_norm_sq(self, v: np.ndarray) -> np.ndarray:
        return self.h_norm_sq(v) + self.h_norm_sq(self.diff(v))

    def div_weighted(self, w: np.ndarray, coeff: np.ndarray) -> np.ndarray:
        """Return -D^T(coeff * w); with w = Dv this is the divergence form term."""
        coeff = np.asarray(coeff, dtype=float)
        if coeff.ndim and coeff.shape[-1] != self.n:
            raise DimensionError(
                f"coefficient has length {coeff.shape[-1]}, grid has {self.n}"
            )
        return -self.diff_adjoint(coeff * w)

    def laplacian(self, v: np.ndarray) -> np.ndarray:
        """Periodic 3-point Laplacian (v[i-1] - 2 v[i] + v[i+1]) / h^2."""
        return self.div_weighted(self.diff(v), 1.0)

    def laplacian_eigenvalues(self) -> np.ndarray:
        """Eigenvalues -(4/h^2) sin^2(pi k / n), k = 0..n-1, of :meth:`laplacian`."""
        k = np.arange(self.n)
        return -(4.0 / self.h**2) * np.sin(np.pi * k / self.n) ** 2

    def vstar_norm_sq(self, w: np.ndarray) -> np.ndarray:
        """Dual norm of phi -> (w, phi)_H with respect to the V norm.

        Equals (w, G^{-1} w)_H with G = I - laplacian, the Gram operator of the
        V inner product.  G is circulant, so the solve is diagonal in Fourier
        space.
        """
        gram = 1.0 - self.laplacian_eigenvalues()
        w_hat = np.fft.fft(w, axis=-1)
        return self.h * np.sum(np.abs(w_hat) ** 2 / gram, axis=-1) / self.n

    def sample(self, func, t: float | None = None) -> np.ndarray:
        """Evaluate ``func(x)`` or ``func(t, x)`` on the nodes as a float array."""
        x = self.nodes
        out = func(x) if t is None else func(t, x)
        return np.broadcast_to(np.asarray(out, dtype=float), (self.n,)).copy()


@dataclass(frozen=True, eq=False)
class StateVector:
    """Grid samples of one element of H."""

    values: np.ndarray
    space: GridSpace

    def __post_init__(self) -> None:
        values = self.space.check(self.values)
        if values.ndim != 1:
            raise DimensionError(f"a state is one grid vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("state contains non-finite entries")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, space: GridSpace, func) -> StateVector:
        return cls(space.sample(func), space)

    def _wrap(self, values: np.ndarray) -> StateVector:
        return StateVector(values, self.space)

    def __add__(self, other: StateVector) -> StateVector:
        return self._wrap(self.values + other.values)

    def __sub__(self, other: StateVector) -> StateVector:
        return self._wrap(self.values - other.values)

    def __mul__(self, scalar: float) -> StateVector:
        return self._wrap(self.values * scalar)

    __rmul__ = __mul__

    def __len__(self) -> int:
        return self.space.n


def h_inner(u: StateVector, v: StateVector) -> float:
    return float(u.space.inner(u.values, v.values))


def h_norm_sq(v: StateVector) -> float:
    return float(v.space.h_norm_sq(v.values))


def v_norm_sq(v: StateVector) -> float:
    return float(v.space.v_norm_sq(v.values))


def vstar_norm_sq(v: StateVector) -> float:
    return float(v.space.vstar_norm_sq(v.values))


def forward_diff(v: StateVector) -> StateVector:
    return StateVector(v.space.diff(v.values), v.space)


def div_weighted(w: StateVector, coeff) -> StateVector:
    coeff = np.asarray(coeff, dtype=float)
    if coeff.ndim != 1 or coeff.shape[0] != w.space.n:
        raise DimensionError(
            f"coefficient must be a vector of length {w.space.n}, got shape {coeff.shape}"
        )
    return StateVector(w.space.div_weighted(w.values, coeff), w.space)


def laplacian(v: StateVector) -> StateVector:
    return StateVector(v.space.laplacian(v.values), v.space)
