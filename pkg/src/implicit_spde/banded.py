"""Cyclic tridiagonal systems arising from the periodic 3-point stencils.

A cyclic tridiagonal matrix is stored as three bands of length ``n``:
``sub[i]`` couples row ``i`` to ``i-1``, ``diag[i]`` to ``i`` and ``sup[i]`` to
``i+1`` (indices mod n).  Solves remove the two corner entries with a rank-one
Sherman-Morrison correction and hand the remaining tridiagonal system to
LAPACK's banded LU.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack, solve_banded

__all__ = ["matvec", "to_dense", "solve", "CyclicTridiagonalFactor", "SingularSystemError"]


class SingularSystemError(np.linalg.LinAlgError):
    pass


def matvec(sub, diag, sup, x):
    """Apply the cyclic tridiagonal matrix to ``x`` along the last axis."""
    return sub * np.roll(x, 1, axis=-1) + diag * x + sup * np.roll(x, -1, axis=-1)


def to_dense(sub, diag, sup) -> np.ndarray:
    n = len(diag)
    eye = np.eye(n)
    # column j of the matrix is matvec(e_j)
    return matvec(np.asarray(sub)[None, :], np.asarray(diag)[None, :],
                  np.asarray(sup)[None, :], eye).T


def _corner_split(sub, diag, sup):
    """Tridiagonal part and Sherman-Morrison vectors u, v with M = T + u v^T.

    Returns the modified diagonal plus u and v restricted to their two nonzero
    slots (first and last).
    """
    gamma = -diag[..., 0]
    if np.any(gamma == 0):
        raise SingularSystemError("zero leading diagonal entry")
    diag_t = diag.copy()
    diag_t[..., 0] = diag[..., 0] - gamma
    diag_t[..., -1] = diag[..., -1] - sup[..., -1] * sub[..., 0] / gamma
    u_first, u_last = gamma, sup[..., -1]
    v_first, v_last = np.ones_like(gamma), sub[..., 0] / gamma
    return diag_t, (u_first, u_last), (v_first, v_last)


def _sherman_morrison(y, z, v):
    v_first, v_last = v
    vy = v_first * y[..., 0] + v_last * y[..., -1]
    vz = v_first * z[..., 0] + v_last * z[..., -1]
    denom = 1.0 + vz
    if np.any(denom == 0):
        raise SingularSystemError("cyclic correction is singular")
    return y - (vy / denom)[..., None] * z


def solve(sub, diag, sup, rhs) -> np.ndarray:
    """Solve M x = rhs for a batch of cyclic tridiagonal systems.

    Bands and ``rhs`` broadcast against each other over the leading axes, so
    each path of a block may carry its own matrix.  The batch is solved as one
    block-diagonal banded system; blocks never exchange pivots, so every
    system's answer is independent of what else is in the batch.
    """
    rhs = np.asarray(rhs, dtype=float)
    shape = np.broadcast_shapes(np.shape(sub), np.shape(diag), np.shape(sup), rhs.shape)
    n = shape[-1]
    sub, diag, sup, rhs = (np.broadcast_to(a, shape).astype(float) for a in (sub, diag, sup, rhs))
    if n < 3:
        dense = np.zeros(shape[:-1] + (n, n))
        for i in range(n):
            dense[..., i, (i - 1) % n] += sub[..., i]
            dense[..., i, i] += diag[..., i]
            dense[..., i, (i + 1) % n] += sup[..., i]
        try:
            return np.linalg.solve(dense, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(str(exc)) from exc

    diag_t, (u_first, u_last), v = _corner_split(sub, diag, sup)
    u = np.zeros(shape)
    u[..., 0] = u_first
    u[..., -1] = u_last

    batch = int(np.prod(shape[:-1], dtype=int))
    size = batch * n
    ab = np.zeros((3, size))
    upper = sup.reshape(batch, n).copy()
    upper[:, -1] = 0.0
    lower = sub.reshape(batch, n).copy()
    lower[:, 0] = 0.0
    ab[0, 1:] = upper.ravel()[:-1]
    ab[1, :] = diag_t.ravel()
    ab[2, :-1] = lower.ravel()[1:]
    cols = np.stack([rhs.reshape(size), u.reshape(size)], axis=1)
    try:
        sol = solve_banded((1, 1), ab, cols, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    y = sol[:, 0].reshape(shape)
    z = sol[:, 1].reshape(shape)
    return _sherman_morrison(y, z, v)


class CyclicTridiagonalFactor:
    """LU factorization of one cyclic tridiagonal matrix, reused across solves."""

    def __init__(self, sub, diag, sup):
        sub, diag, sup = (np.array(a, dtype=float) for a in (sub, diag, sup))
        self.n = n = diag.shape[0]
        if n < 3:
            try:
                self._dense = np.linalg.inv(to_dense(sub, diag, sup))
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError(str(exc)) from exc
            return
        self._dense = None
        diag_t, (u_first, u_last), self._v = _corner_split(sub, diag, sup)
        ab = np.zeros((4, n))
        ab[1, 1:] = sup[:-1]
        ab[2, :] = diag_t
        ab[3, :-1] = sub[1:]
        lu, piv, info = lapack.dgbtrf(ab, 1, 1)
        if info != 0:
            raise SingularSystemError(f"banded LU failed (info={info})")
        self._lu, self._piv = lu, piv
        u = np.zeros(n)
        u[0], u[-1] = u_first, u_last
        self._z = self._solve_tridiagonal(u[:, None])[:, 0]

    def _solve_tridiagonal(self, cols: np.ndarray) -> np.ndarray:
        x, info = lapack.dgbtrs(self._lu, 1, 1, cols, self._piv)
        if info != 0:
            raise SingularSystemError(f"banded solve failed (info={info})")
        return x

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self._dense is not None:
            return rhs @ self._dense.T
        lead = rhs.shape[:-1]
        cols = np.ascontiguousarray(rhs.reshape(-1, self.n).T)
        y = self._solve_tridiagonal(cols).T.reshape(lead + (self.n,))
        return _sherman_morrison(y, np.broadcast_to(self._z, y.shape), self._v)
