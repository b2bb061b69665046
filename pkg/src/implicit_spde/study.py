"""Monte-Carlo convergence studies by self-convergence.

Every path draws one Brownian lattice on the finest mesh.  The scheme runs
once at ``m_fine`` (the reference) and once per coarse level on the
aggregated increments; errors are measured at the coarse grid times.  Paths
are processed in fixed blocks, so results never depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import noise
from .io import atomic_write_text
from .problem import EvolutionProblem
from .space import GridSpace, StateVector
from .stepper import BatchRun, SchemeConfig, Trajectory, run_batch

__all__ = [
    "ErrorSample",
    "ConvergenceReport",
    "StudyError",
    "error_metrics",
    "fit_rate",
    "heat_exact_oracle",
    "surrogate_T2_T3_check",
    "run_study",
    "apriori_bound_study",
    "oracle_study",
    "write_report_csv",
    "report_csv_text",
    "config_hash",
]

logger = logging.getLogger(__name__)

METRICS = ("max_H_sq", "sum_V_sq", "sup_grid")
CSV_COLUMNS = (
    "m", "tau", "mean_max_H_sq", "stderr_max_H_sq", "mean_sum_V_sq",
    "stderr_sum_V_sq", "mean_sup_grid", "n_paths_ok",
)
DEFAULT_LEVELS = (16, 32, 64, 128, 256)
DEFAULT_M_FINE = 2**13
DEFAULT_BLOCK = 25


class StudyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ErrorSample:
    """Errors of one coarse run against the reference at the shared times.

    ``max_H_sq`` = max_i |e_i|_H^2, ``sum_V_sq`` = sum_{i=0}^m |e_i|_V^2 tau and
    ``sup_grid`` = max_i max_x |e_i(x)|.
    """

    m: int
    max_H_sq: float
    sum_V_sq: float
    sup_grid: float


def _error_arrays(space: GridSpace, coarse: np.ndarray, fine: np.ndarray, tau: float) -> dict:
    """Per-path metrics from aligned states of shape (m+1, ..., n)."""
    e = coarse - fine
    return {
        "max_H_sq": np.max(space.h_norm_sq(e), axis=0),
        "sum_V_sq": np.sum(space.v_norm_sq(e), axis=0) * tau,
        "sup_grid": np.max(np.abs(e), axis=(0, -1)),
    }


def error_metrics(coarse: Trajectory, fine: Trajectory) -> ErrorSample:
    """Compare a coarse trajectory with a finer one on the coarse grid times.

    Raises:
        ValueError: if the meshes are not nested, the coarse trajectory is not
            fully recorded, or the fine one lacks a shared time.
    """
    if coarse.space.n != fine.space.n or coarse.horizon != fine.horizon:
        raise ValueError("trajectories live on different grids or horizons")
    if coarse.record_every != 1 or fine.m % coarse.m:
        raise ValueError(f"coarse level {coarse.m} is not nested in fine level {fine.m}")
    ratio = fine.m // coarse.m
    if ratio % fine.record_every:
        raise ValueError("fine trajectory does not record every shared time")
    step = ratio // fine.record_every
    aligned = fine.values[::step]
    if aligned.shape != coarse.values.shape:
        raise ValueError("fine trajectory does not cover the horizon")
    out = _error_arrays(coarse.space, coarse.values, aligned, coarse.tau)
    return ErrorSample(coarse.m, *(float(out[k]) for k in METRICS))


def fit_rate(taus: Sequence[float], means: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line through (log2 tau, log2 mean).

    Returns:
        (slope, intercept, standard error of the slope)

    Raises:
        ValueError: with fewer than three levels or a nonpositive mean.
    """
    taus = np.asarray(taus, dtype=float)
    means = np.asarray(means, dtype=float)
    if taus.shape != means.shape or taus.size < 3:
        raise ValueError("need at least three (tau, mean) pairs")
    if not np.all(means > 0) or not np.all(taus > 0):
        raise ValueError(f"rate fit needs positive means, got {means}")
    fit = stats.linregress(np.log2(taus), np.log2(means))
    return float(fit.slope), float(fit.intercept), float(fit.stderr)


def heat_exact_oracle(space: GridSpace, diffusion_coeff: float, u0, t: float):
    """exp(t a Lap_h) u0 through the circulant eigen-decomposition of the grid Laplacian."""
    values = u0.values if isinstance(u0, StateVector) else np.asarray(u0, dtype=float)
    factors = np.exp(t * diffusion_coeff * space.laplacian_eigenvalues())
    out = np.fft.ifft(np.fft.fft(values, axis=-1) * factors, axis=-1).real
    return StateVector(out, space) if isinstance(u0, StateVector) else out


def surrogate_T2_T3_check(fine: Trajectory, nu: float = 0.5) -> dict:
    """Discrete stand-ins for the solution regularity assumptions.

    Reports max_i |u_{i+1} - u_i|_V^2 / tau^{2 nu} (time increments) and
    max_i |u_i|_V (uniform V bound) along a fully recorded trajectory.
    """
    if fine.record_every != 1:
        raise ValueError("increment statistic needs every step recorded")
    space, values = fine.space, fine.values
    incr = space.v_norm_sq(np.diff(values, axis=0))
    scaled = incr / fine.tau ** (2.0 * nu)
    return {
        "increment_ratio": float(scaled.max()) if scaled.size else 0.0,
        "increment_ratio_argmax": int(np.argmax(scaled)) if scaled.size else 0,
        "v_sup": float(np.sqrt(space.v_norm_sq(values).max())),
    }


@dataclass
class ConvergenceReport:
    levels: list[int]
    taus: list[float]
    mean: dict
    stderr: dict
    n_ok: int
    n_failed: int
    slopes: dict
    metadata: dict
    samples: dict = field(default_factory=dict)
    surrogate: dict = field(default_factory=dict)

    def slope(self, metric: str = "max_H_sq") -> float:
        return self.slopes[metric][0]


def config_hash(description: dict) -> str:
    blob = json.dumps(description, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _validate_levels(levels, m_fine, problem, cfg):
    levels = [int(m) for m in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"levels must be strictly increasing, got {levels}")
    if not levels:
        raise ValueError("need at least one level")
    for m in levels + [m_fine]:
        if m_fine % m:
            raise ValueError(f"level {m} does not divide m_fine={m_fine}")
        cfg.with_steps(m).check_admissible(problem)
    if not noise.is_power_of_two(m_fine):
        raise ValueError(f"m_fine must be a power of 2, got {m_fine}")
    return levels


def _path_increments(problem, m_fine, base_seed, paths):
    return np.stack([
        noise.generate(problem.d1, m_fine, problem.horizon, noise.path_seed(base_seed, p)).increments
        for p in paths
    ])


def _check_telescoping(increments, levels):
    chain = sorted(set(levels))
    for m_small, m_big in zip(chain, chain[1:]):
        direct = noise.coarsen_increments(increments, m_small)
        nested = noise.coarsen_increments(noise.coarsen_increments(increments, m_big), m_small)
        if not np.array_equal(direct, nested):
            raise StudyError(f"coarsening {m_big}->{m_small} is not telescoping")


def _run_block(problem, cfg, levels, m_fine, base_seed, paths):
    inc = _path_increments(problem, m_fine, base_seed, paths)
    _check_telescoping(inc, levels)
    stride = m_fine // max(levels)
    fine = run_batch(problem, cfg.with_steps(m_fine), inc, record_every=stride)
    ok = fine.ok.copy()
    per_level = {}
    for m in levels:
        run = run_batch(problem, cfg.with_steps(m), noise.coarsen_increments(inc, m))
        ok &= run.ok
        aligned = fine.states[:: (m_fine // m) // stride]
        per_level[m] = _error_arrays(problem.space, run.states, aligned, run.tau)
    surrogate = {
        "increment_ratio": fine.max_incr_v_sq / fine.tau ** (2.0 * problem.declared.nu),
        "v_sup": np.sqrt(fine.max_v_sq),
    }
    return ok, per_level, surrogate


def _blocks(n_paths: int, block_size: int) -> list[range]:
    return [range(s, min(s + block_size, n_paths)) for s in range(0, n_paths, block_size)]


def _mean_stderr(values: np.ndarray) -> tuple[float, float]:
    if values.size == 0:
        return float("nan"), float("nan")
    mean = float(np.mean(values))
    if values.size < 2:
        return mean, float("nan")
    return mean, float(np.std(values, ddof=1) / np.sqrt(values.size))


def run_study(
    problem: EvolutionProblem,
    levels: Sequence[int] = DEFAULT_LEVELS,
    m_fine: int = DEFAULT_M_FINE,
    n_paths: int = 200,
    base_seed: int = 0,
    cfg: Optional[SchemeConfig] = None,
    threads: int = 1,
    block_size: int = DEFAULT_BLOCK,
    max_failure_fraction: float = 0.01,
) -> ConvergenceReport:
    """Estimate the discrete error norms per level and fit their decay rates.

    ``cfg`` supplies everything but the step count.  Paths whose inner solves
    fail at any level are excluded; more than ``max_failure_fraction`` of
    them aborts with :class:`StudyError`.
    """
    cfg = cfg or SchemeConfig(m=max(levels))
    levels = _validate_levels(levels, m_fine, problem, cfg)
    if n_paths < 1:
        raise ValueError("need at least one path")
    blocks = _blocks(n_paths, block_size)

    def work(paths):
        return _run_block(problem, cfg, levels, m_fine, base_seed, paths)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(b) for b in blocks]

    ok = np.concatenate([r[0] for r in results])
    n_failed = int((~ok).sum())
    if n_failed > max_failure_fraction * n_paths:
        raise StudyError(f"{n_failed} of {n_paths} paths failed their inner solves")

    samples = {
        m: {k: np.concatenate([r[1][m][k] for r in results])[ok] for k in METRICS}
        for m in levels
    }
    surrogate = {
        k: np.concatenate([r[2][k] for r in results])[ok] for k in ("increment_ratio", "v_sup")
    }
    taus = [problem.horizon / m for m in levels]
    mean, stderr = {}, {}
    for k in METRICS:
        pairs = [_mean_stderr(samples[m][k]) for m in levels]
        mean[k] = [a for a, _ in pairs]
        stderr[k] = [b for _, b in pairs]
    slopes = {}
    if len(levels) >= 3 and ok.any():
        for k in ("max_H_sq", "sum_V_sq"):
            slopes[k] = fit_rate(taus, mean[k])
    metadata = {
        "problem": problem.name,
        "base_seed": base_seed,
        "generator_version": noise.GENERATOR_VERSION,
        "config_hash": config_hash({
            "problem": problem.params or problem.name,
            "scheme": _scheme_description(cfg),
            "levels": levels,
            "m_fine": m_fine,
            "n_paths": n_paths,
            "base_seed": base_seed,
            "block_size": block_size,
        }),
    }
    return ConvergenceReport(levels, taus, mean, stderr, int(ok.sum()), n_failed, slopes,
                             metadata, samples, surrogate)


def _scheme_description(cfg: SchemeConfig) -> dict:
    return {
        "coeff_mode": cfg.coeff_mode,
        "quadrature_points": cfg.quadrature_points,
        "first_step_diffusion": cfg.first_step_diffusion,
        "inner": {
            "method": cfg.inner.method,
            "rtol": cfg.inner.rtol,
            "atol": cfg.inner.atol,
            "max_iter": cfg.inner.max_iter,
        },
    }


def apriori_bound_study(
    problem: EvolutionProblem,
    levels: Sequence[int],
    n_paths: int,
    base_seed: int = 0,
    cfg: Optional[SchemeConfig] = None,
    block_size: int = DEFAULT_BLOCK,
) -> dict:
    """Mean of max_i |u_i|_H^2 + sum_{i>=1} |u_i|_V^2 tau per level, on coupled paths."""
    cfg = cfg or SchemeConfig(m=max(levels))
    levels = sorted(int(m) for m in levels)
    m_top = levels[-1]
    values = {m: [] for m in levels}
    for paths in _blocks(n_paths, block_size):
        inc = _path_increments(problem, m_top, base_seed, paths)
        for m in levels:
            run = run_batch(problem, cfg.with_steps(m), noise.coarsen_increments(inc, m), record_every=m)
            stat = run.max_h_sq + run.sum_v_sq
            values[m].append(stat[run.ok])
    return {m: float(np.mean(np.concatenate(values[m]))) for m in levels}


def oracle_study(problem: EvolutionProblem, levels: Sequence[int], cfg: Optional[SchemeConfig] = None) -> dict:
    """H-norm error at the horizon of the noise-free scheme against the heat oracle."""
    if problem.heat_coefficient is None:
        raise ValueError(f"problem {problem.name!r} has no closed-form heat solution")
    cfg = cfg or SchemeConfig(m=max(levels))
    exact = heat_exact_oracle(problem.space, problem.heat_coefficient, problem.initial, problem.horizon)
    errors = []
    for m in levels:
        run = run_batch(problem, cfg.with_steps(m), np.zeros((1, problem.d1, m)), record_every=m)
        errors.append(float(np.sqrt(problem.space.h_norm_sq(run.states[-1, 0] - exact))))
    taus = [problem.horizon / m for m in levels]
    slope, intercept, se = fit_rate(taus, errors)
    return {"levels": list(levels), "taus": taus, "errors": errors, "slope": slope,
            "intercept": intercept, "stderr": se}


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def report_csv_text(report: ConvergenceReport, timestamp: Optional[str] = None) -> str:
    """CSV text of a report.

    Comment lines carry the metadata; the timestamp, if any, sits on its own
    first line so the rest is reproducible byte for byte.
    """
    buf = io.StringIO()
    if timestamp is not None:
        buf.write(f"# timestamp={timestamp}\n")
    meta = report.metadata
    for key in ("problem", "config_hash", "base_seed", "generator_version"):
        buf.write(f"# {key}={meta[key]}\n")
    buf.write(f"# n_paths_failed={report.n_failed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for j, m in enumerate(report.levels):
        writer.writerow([
            _fmt(m), _fmt(report.taus[j]),
            _fmt(report.mean["max_H_sq"][j]), _fmt(report.stderr["max_H_sq"][j]),
            _fmt(report.mean["sum_V_sq"][j]), _fmt(report.stderr["sum_V_sq"][j]),
            _fmt(report.mean["sup_grid"][j]), _fmt(report.n_ok),
        ])
    for k, (slope, intercept, se) in report.slopes.items():
        writer.writerow([f"slope_{k}", _fmt(slope), _fmt(se), _fmt(intercept)])
    return buf.getvalue()


def write_report_csv(report: ConvergenceReport, path, timestamp: Optional[str] = None) -> None:
    atomic_write_text(path, report_csv_text(report, timestamp))
