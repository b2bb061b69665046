"""Drift-implicit Euler stepping with time-averaged coefficients.

One step solves

    x - tau * Abar_i(x) = y,   y = u_i + sum_k Bbar_{k,i}(u_i) dW^k_i,

where ``Abar_i`` averages the drift over [t_i, t_{i+1}] and ``Bbar_{k,i}``
averages B_k over the previous interval [t_{i-1}, t_i] (zero on the first
step).  In ``endpoint`` mode the averages are replaced by A(t_{i+1}, .) and
B_k(t_i, .).

The runner works on blocks of paths: arrays carry a leading batch axis and
every operation is row-wise, so a path's result does not depend on the block
it was computed in.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import banded
from .problem import EvolutionProblem
from .space import GridSpace, StateVector

__all__ = [
    "InnerSolverConfig",
    "SchemeConfig",
    "Trajectory",
    "BatchRun",
    "StepFailure",
    "AdmissibilityError",
    "averaged_drift",
    "averaged_diffusion",
    "implicit_step",
    "newton_solve",
    "picard_solve",
    "run_scheme",
    "run_batch",
]

logger = logging.getLogger(__name__)

COEFF_MODES = ("averaged", "endpoint")
FIRST_STEP_MODES = ("paper", "natural")
METHODS = ("auto", "direct", "newton", "picard")


class AdmissibilityError(ValueError):
    """The step size is too large for the declared monotonicity constant."""


class StepFailure(RuntimeError):
    def __init__(self, step: int, residual: float, message: str = ""):
        self.step, self.residual = step, residual
        super().__init__(
            message or f"inner solve failed at step {step} (best residual {residual:.3e})"
        )


@dataclass(frozen=True)
class InnerSolverConfig:
    """How each step's equation x - tau Abar(x) = y is solved.

    ``auto`` picks ``direct`` for linear drifts and ``newton`` otherwise.  The
    residual tolerance is ``max(rtol * |y|_H, atol)``.
    """

    method: str = "auto"
    rtol: float = 1e-10
    atol: float = 1e-14
    max_iter: int = 50

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown inner method {self.method!r}, expected one of {METHODS}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")

    def tolerance(self, y_norm: np.ndarray) -> np.ndarray:
        return np.maximum(self.rtol * y_norm, self.atol)


@dataclass(frozen=True)
class SchemeConfig:
    m: int
    coeff_mode: str = "averaged"
    quadrature_points: int = 8
    inner: InnerSolverConfig = field(default_factory=InnerSolverConfig)
    first_step_diffusion: str = "paper"

    def __post_init__(self) -> None:
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"number of steps must be a positive integer, got {self.m}")
        if self.coeff_mode not in COEFF_MODES:
            raise ValueError(f"coeff_mode must be one of {COEFF_MODES}, got {self.coeff_mode!r}")
        if self.first_step_diffusion not in FIRST_STEP_MODES:
            raise ValueError(
                f"first_step_diffusion must be one of {FIRST_STEP_MODES}, "
                f"got {self.first_step_diffusion!r}"
            )
        if int(self.quadrature_points) != self.quadrature_points or self.quadrature_points < 1:
            raise ValueError("quadrature_points must be a positive integer")

    @classmethod
    def for_problem(cls, problem: EvolutionProblem, m: int, **kwargs) -> SchemeConfig:
        cfg = cls(m, **kwargs)
        cfg.check_admissible(problem)
        return cfg

    def tau(self, horizon: float) -> float:
        return horizon / self.m

    def with_steps(self, m: int) -> SchemeConfig:
        return dataclasses.replace(self, m=m)

    def check_admissible(self, problem: EvolutionProblem) -> None:
        """Require 1 - L tau >= 1/2 for the declared monotonicity constant L."""
        margin = 1.0 - problem.declared.L * self.tau(problem.horizon)
        if margin < 0.5:
            raise AdmissibilityError(
                f"m={self.m} is too coarse: 1 - L*tau = {margin:.4g} < 1/2 "
                f"(L={problem.declared.L}, T={problem.horizon})"
            )


# Time averaging


def _midpoints(horizon: float, m: int, start: int, q: int) -> list[float]:
    return [horizon * (start + (j + 0.5) / q) / m for j in range(q)]


def _average(fn: Callable, times: list[float]):
    """Mean of ``fn`` over ``times``; values may be arrays or tuples of arrays."""
    if len(times) == 1:
        return fn(times[0])
    total = fn(times[0])
    for t in times[1:]:
        value = fn(t)
        if isinstance(total, tuple):
            total = tuple(a + b for a, b in zip(total, value))
        else:
            total = total + value
    q = len(times)
    if isinstance(total, tuple):
        return tuple(a / q for a in total)
    return total / q


def _drift_times(p: EvolutionProblem, cfg: SchemeConfig, i: int) -> list[float]:
    T, m = p.horizon, cfg.m
    if cfg.coeff_mode == "endpoint":
        return [T * (i + 1) / m]
    if not p.drift_time_dependent:
        return [T * i / m]
    return _midpoints(T, m, i, cfg.quadrature_points)


def _diffusion_times(p: EvolutionProblem, cfg: SchemeConfig, i: int) -> Optional[list[float]]:
    T, m = p.horizon, cfg.m
    if cfg.coeff_mode == "endpoint":
        return [T * i / m]
    if cfg.first_step_diffusion == "paper":
        if i == 0:
            return None
        start = i - 1
    else:
        start = i
    if not p.diffusion_time_dependent:
        return [T * i / m]
    return _midpoints(T, m, start, cfg.quadrature_points)


def _values(v):
    return v.values if isinstance(v, StateVector) else np.asarray(v, dtype=float)


def averaged_drift(p: EvolutionProblem, i: int, cfg: SchemeConfig, v):
    """Drift operator of step ``i`` applied to ``v``.

    Composite midpoint average of A(s, v) over [t_i, t_{i+1}] in ``averaged``
    mode, A(t_{i+1}, v) in ``endpoint`` mode.
    """
    out = _average(lambda t: p.drift(t, _values(v)), _drift_times(p, cfg, i))
    return StateVector(out, p.space) if isinstance(v, StateVector) else out


def averaged_diffusion(p: EvolutionProblem, i: int, cfg: SchemeConfig, v):
    """Diffusion operators of step ``i`` applied to ``v``, one per Wiener component.

    Returns a list of StateVectors for a StateVector input, otherwise an array
    of shape ``(..., d1, n)``.
    """
    vals = _values(v)
    times = _diffusion_times(p, cfg, i)
    if times is None:
        out = np.zeros(vals.shape[:-1] + (p.d1, p.space.n))
    else:
        out = _average(lambda t: p.diffusion(t, vals), times)
    if isinstance(v, StateVector):
        return [StateVector(row, p.space) for row in out]
    return out


# Inner solvers


def _h_norm(space: GridSpace) -> Callable[[np.ndarray], np.ndarray]:
    return lambda r: np.sqrt(space.h_norm_sq(r))


def _banded_solve_rows(bands, rhs):
    """Batched cyclic solve; rows whose own system is singular come back as NaN."""
    try:
        return banded.solve(*bands, rhs)
    except banded.SingularSystemError:
        out = np.full_like(rhs, np.nan)
        for j in range(rhs.shape[0]):
            try:
                out[j] = banded.solve(*(np.broadcast_to(b, rhs.shape)[j] for b in bands), rhs[j])
            except banded.SingularSystemError:
                pass
        return out


@dataclass
class SolveResult:
    x: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    diverged: Optional[np.ndarray] = None


def newton_solve(
    residual: Callable[[np.ndarray, np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray, np.ndarray], tuple],
    x0: np.ndarray,
    tol: np.ndarray,
    max_iter: int,
    norm: Callable[[np.ndarray], np.ndarray],
) -> SolveResult:
    """Newton iteration for R(x) = 0 on a block of rows.

    ``residual(x, rows)`` and ``jacobian(x, rows)`` act on the subset ``rows``
    of the block; the Jacobian is returned as cyclic tridiagonal bands.  A row
    stops iterating as soon as its residual norm is within its tolerance.
    """
    x = np.array(x0, dtype=float)
    batch = x.shape[0]
    res = np.full(batch, np.inf)
    iters = np.zeros(batch, dtype=int)
    done = np.zeros(batch, dtype=bool)
    rows = np.arange(batch)
    for k in range(max_iter + 1):
        R = residual(x[rows], rows)
        rn = norm(R)
        res[rows] = rn
        conv = rn <= tol[rows]
        done[rows[conv]] = True
        keep = ~conv & np.isfinite(rn)
        rows, R = rows[keep], R[keep]
        if rows.size == 0 or k == max_iter:
            break
        delta = _banded_solve_rows(jacobian(x[rows], rows), -R)
        x[rows] += delta
        iters[rows] += 1
    return SolveResult(x, res, iters, done)


def picard_solve(
    contraction: Callable[[np.ndarray, np.ndarray], np.ndarray],
    residual: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0: np.ndarray,
    tol: np.ndarray,
    max_iter: int,
    norm: Callable[[np.ndarray], np.ndarray],
) -> SolveResult:
    """Fixed-point iteration x <- contraction(x) until the residual is within ``tol``.

    A row whose residual grows on two consecutive sweeps is flagged in
    ``diverged`` and left where it was, so the caller can hand it to Newton.
    """
    x = np.array(x0, dtype=float)
    batch = x.shape[0]
    res = np.full(batch, np.inf)
    iters = np.zeros(batch, dtype=int)
    done = np.zeros(batch, dtype=bool)
    diverged = np.zeros(batch, dtype=bool)
    rises = np.zeros(batch, dtype=int)
    rows = np.arange(batch)
    for k in range(max_iter + 1):
        rn = norm(residual(x[rows], rows))
        grew = rn > res[rows]
        rises[rows] = np.where(grew, rises[rows] + 1, 0)
        res[rows] = rn
        conv = rn <= tol[rows]
        done[rows[conv]] = True
        bad = ~np.isfinite(rn) | (rises[rows] >= 2)
        diverged[rows[bad & ~conv]] = True
        rows = rows[~conv & ~bad]
        if rows.size == 0 or k == max_iter:
            break
        x[rows] = contraction(x[rows], rows)
        iters[rows] += 1
    return SolveResult(x, res, iters, done, diverged)


class _Stepper:
    """Per-run state: method choice and the cached linear factorization."""

    def __init__(self, p: EvolutionProblem, cfg: SchemeConfig):
        self.p, self.cfg = p, cfg
        self.tau = cfg.tau(p.horizon)
        self.norm = _h_norm(p.space)
        method = cfg.inner.method
        if method == "auto":
            method = "direct" if p.is_linear else "newton"
        if method == "direct" and not p.is_linear:
            raise ValueError("direct inner solves need a linear drift")
        if method == "picard" and p.linear_part is None:
            raise ValueError("picard inner solves need the drift's linear part")
        if method == "newton" and p.drift_jacobian is None:
            raise ValueError("newton inner solves need the drift Jacobian")
        if method == "picard":
            K = p.declared.nonlinear_lipschitz
            if K is None or self.tau * K >= 1.0:
                logger.info("fixed-point contraction not guaranteed (tau*K >= 1); using newton")
                method = "newton"
        self.method = method
        self._factor: Optional[banded.CyclicTridiagonalFactor] = None

    def linear_factor(self, i: int) -> banded.CyclicTridiagonalFactor:
        """Factorization of I - tau * Lbar_i, computed once if L does not vary in time."""
        lin = self.p.linear_part
        if self._factor is not None and not lin.time_dependent:
            return self._factor
        sub, diag, sup = _average(lin.bands, self._linear_times(i))
        factor = banded.CyclicTridiagonalFactor(-self.tau * sub, 1.0 - self.tau * diag, -self.tau * sup)
        if not lin.time_dependent:
            self._factor = factor
        return factor

    def _linear_times(self, i: int) -> list[float]:
        lin = self.p.linear_part
        if self.cfg.coeff_mode == "endpoint":
            return [self.p.horizon * (i + 1) / self.cfg.m]
        if not lin.time_dependent:
            return [self.p.horizon * i / self.cfg.m]
        return _midpoints(self.p.horizon, self.cfg.m, i, self.cfg.quadrature_points)

    def rhs(self, i: int, prev: np.ndarray, dW: np.ndarray) -> np.ndarray:
        bbar = averaged_diffusion(self.p, i, self.cfg, prev)
        y = prev.copy()
        for k in range(self.p.d1):
            y += bbar[..., k, :] * dW[..., k, None]
        return y

    def solve(self, i: int, y: np.ndarray) -> SolveResult:
        p, cfg, tau = self.p, self.cfg, self.tau
        inner = cfg.inner
        tol = inner.tolerance(self.norm(y))

        def residual(x, rows):
            return x - tau * averaged_drift(p, i, cfg, x) - y[rows]

        def jacobian(x, rows):
            sub, diag, sup = _average(lambda t: p.drift_jacobian(t, x), _drift_times(p, cfg, i))
            return -tau * sub, 1.0 - tau * diag, -tau * sup

        if self.method == "newton":
            return newton_solve(residual, jacobian, y, tol, inner.max_iter, self.norm)

        factor = self.linear_factor(i)

        def refine(x, rows):
            return x - factor.solve(residual(x, rows))

        if self.method == "direct":
            lin = p.linear_part
            rhs = y
            if lin.forcing is not None:
                rhs = y + tau * _average(lin.forcing, self._linear_times(i))
            x0 = factor.solve(rhs)
            out = picard_solve(refine, residual, x0, tol, inner.max_iter, self.norm)
            out.iterations += 1
            return out

        out = picard_solve(refine, residual, y, tol, inner.max_iter, self.norm)
        if out.diverged.any():
            rows = np.flatnonzero(out.diverged)
            logger.info("step %d: %d rows stopped contracting, switching to newton", i, rows.size)
            sub_y = y[rows]

            def sub_residual(x, r):
                return x - tau * averaged_drift(p, i, cfg, x) - sub_y[r]

            fallback = newton_solve(sub_residual, jacobian, out.x[rows], tol[rows], inner.max_iter, self.norm)
            out.x[rows] = fallback.x
            out.residual[rows] = fallback.residual
            out.iterations[rows] += fallback.iterations
            out.converged[rows] = fallback.converged
        return out


# Runners


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States u(t_0), u(t_r), u(t_2r), ... of one path, ``r = record_every``."""

    space: GridSpace
    horizon: float
    m: int
    values: np.ndarray
    residuals: np.ndarray
    tolerances: np.ndarray
    iteration_counts: np.ndarray
    record_every: int = 1

    @property
    def tau(self) -> float:
        return self.horizon / self.m

    @property
    def step_indices(self) -> np.ndarray:
        return np.arange(self.values.shape[0]) * self.record_every

    @property
    def times(self) -> np.ndarray:
        return self.step_indices * self.tau

    @property
    def states(self) -> list[StateVector]:
        return [StateVector(row, self.space) for row in self.values]


@dataclass(eq=False)
class BatchRun:
    """Result of :func:`run_batch` for a block of ``B`` paths.

    ``states`` has shape ``(m // record_every + 1, B, n)``.  The running
    statistics are over all steps, recorded or not: ``max_h_sq`` and
    ``max_v_sq`` are max_i |u_i|^2, ``sum_v_sq`` is sum_{i>=1} |u_i|_V^2 tau
    and ``max_incr_v_sq`` is max_i |u_{i+1} - u_i|_V^2.
    """

    m: int
    tau: float
    record_every: int
    states: np.ndarray
    residuals: np.ndarray
    tolerances: np.ndarray
    iterations: np.ndarray
    ok: np.ndarray
    failed_step: np.ndarray
    max_h_sq: np.ndarray
    max_v_sq: np.ndarray
    sum_v_sq: np.ndarray
    max_incr_v_sq: np.ndarray


def run_batch(
    p: EvolutionProblem,
    cfg: SchemeConfig,
    increments: np.ndarray,
    initial: Optional[np.ndarray] = None,
    record_every: int = 1,
) -> BatchRun:
    """Run the scheme for a block of paths.

    Args:
        increments: Wiener increments of shape ``(B, d1, m)``.
        initial: start values, shape ``(n,)`` or ``(B, n)``; defaults to the
            problem's initial datum.
        record_every: keep every ``record_every``-th state (must divide m).

    A path whose inner solve fails is frozen at its last good state and
    marked in ``ok``/``failed_step``; the other paths carry on.
    """
    cfg.check_admissible(p)
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 3 or increments.shape[1:] != (p.d1, cfg.m):
        raise ValueError(
            f"increments must have shape (B, {p.d1}, {cfg.m}), got {increments.shape}"
        )
    if record_every < 1 or cfg.m % record_every:
        raise ValueError(f"record_every={record_every} must divide m={cfg.m}")
    space = p.space
    batch = increments.shape[0]
    u = np.array(np.broadcast_to(p.initial if initial is None else initial, (batch, space.n)), dtype=float)
    stepper = _Stepper(p, cfg)

    states = np.empty((cfg.m // record_every + 1, batch, space.n))
    states[0] = u
    residuals = np.full((cfg.m, batch), np.nan)
    tolerances = np.full((cfg.m, batch), np.nan)
    iterations = np.zeros((cfg.m, batch), dtype=int)
    ok = np.ones(batch, dtype=bool)
    failed_step = np.full(batch, -1)
    max_h = space.h_norm_sq(u)
    max_v = space.v_norm_sq(u)
    sum_v = np.zeros(batch)
    max_incr = np.zeros(batch)

    for i in range(cfg.m):
        rows = np.flatnonzero(ok)
        if rows.size == 0:
            # every path has failed: the rest of the record is the frozen state
            states[i // record_every + 1:] = u
            break
        prev = u[rows]
        y = stepper.rhs(i, prev, increments[rows, :, i])
        out = stepper.solve(i, y)
        residuals[i, rows] = out.residual
        tolerances[i, rows] = cfg.inner.tolerance(stepper.norm(y))
        iterations[i, rows] = out.iterations
        good = out.converged & np.all(np.isfinite(out.x), axis=-1)
        if not good.all():
            bad = rows[~good]
            ok[bad] = False
            failed_step[bad] = i
            logger.warning("step %d: %d path(s) failed the inner solve", i, bad.size)
        r, x = rows[good], out.x[good]
        vn = space.v_norm_sq(x)
        max_h[r] = np.maximum(max_h[r], space.h_norm_sq(x))
        max_v[r] = np.maximum(max_v[r], vn)
        sum_v[r] += vn * stepper.tau
        max_incr[r] = np.maximum(max_incr[r], space.v_norm_sq(x - prev[good]))
        u[r] = x
        if (i + 1) % record_every == 0:
            states[(i + 1) // record_every] = u

    return BatchRun(
        m=cfg.m,
        tau=stepper.tau,
        record_every=record_every,
        states=states,
        residuals=residuals,
        tolerances=tolerances,
        iterations=iterations,
        ok=ok,
        failed_step=failed_step,
        max_h_sq=max_h,
        max_v_sq=max_v,
        sum_v_sq=sum_v,
        max_incr_v_sq=max_incr,
    )


def run_scheme(
    p: EvolutionProblem,
    cfg: SchemeConfig,
    increments: np.ndarray,
    record_every: int = 1,
    initial: Optional[np.ndarray] = None,
) -> Trajectory:
    """Run the scheme along one Brownian path.

    Args:
        increments: shape ``(d1, m)``.

    Raises:
        StepFailure: if some step's inner solve does not reach its tolerance.
    """
    increments = np.asarray(increments, dtype=float)
    if increments.shape != (p.d1, cfg.m):
        raise ValueError(f"increments must have shape ({p.d1}, {cfg.m}), got {increments.shape}")
    run = run_batch(p, cfg, increments[None], initial=initial, record_every=record_every)
    if not run.ok[0]:
        step = int(run.failed_step[0])
        raise StepFailure(step, float(run.residuals[step, 0]))
    return Trajectory(
        space=p.space,
        horizon=p.horizon,
        m=cfg.m,
        values=run.states[:, 0, :],
        residuals=run.residuals[:, 0],
        tolerances=run.tolerances[:, 0],
        iteration_counts=run.iterations[:, 0],
        record_every=record_every,
    )


def implicit_step(p: EvolutionProblem, i: int, cfg: SchemeConfig, prev, noise_incr):
    """Advance one step from ``prev`` with increments ``noise_incr`` (length d1).

    Returns:
        (next state, residual norm, inner iteration count)
    """
    cfg.check_admissible(p)
    prev_vals = _values(prev)
    dW = np.asarray(noise_incr, dtype=float).reshape(1, p.d1)
    stepper = _Stepper(p, cfg)
    y = stepper.rhs(i, prev_vals[None], dW)
    out = stepper.solve(i, y)
    if not out.converged[0] or not np.all(np.isfinite(out.x[0])):
        raise StepFailure(i, float(out.residual[0]))
    x = out.x[0]
    if isinstance(prev, StateVector):
        x = StateVector(x, p.space)
    return x, float(out.residual[0]), int(out.iterations[0])
