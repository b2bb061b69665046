"""Randomized checks of the structural conditions on an assembled problem.

A probe never raises on failure; it returns a :class:`ProbeReport` with the
worst sample it saw.  Samples mix rough states (i.i.d. normal grid values
scaled by 1/sqrt(n)) with smooth low-frequency trigonometric ones, including
constants, and spread amplitudes over four decades.  Results depend only on
``rng_seed``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .problem import EvolutionProblem, ParabolicityError, QuasilinearSpec, parabolicity_margin
from .space import GridSpace

__all__ = [
    "ProbeReport",
    "probe_strong_monotonicity",
    "probe_lipschitz_B",
    "probe_lipschitz_A",
    "probe_time_regularity_B",
    "probe_growth",
    "probe_coercivity",
    "probe_parabolicity",
    "run_all_probes",
]

REL_TOL = 1e-9


@dataclass
class ProbeReport:
    """Outcome of one probe.

    ``statistic`` is the worst value seen (a slack for inequality probes, a
    ratio for Lipschitz-type probes) and ``threshold`` the bound it is held
    against; ``fitted`` carries constants estimated from the samples.
    """

    name: str
    condition: str
    passed: bool
    statistic: float
    threshold: float
    trials: int
    worst: dict = field(default_factory=dict)
    fitted: dict = field(default_factory=dict)
    skipped: bool = False
    note: str = ""
    lower_bound: bool = False

    @property
    def violation(self) -> float:
        """How far the statistic is on the wrong side of the threshold (> 0 means violated)."""
        if self.lower_bound:
            return self.threshold - self.statistic
        return self.statistic - self.threshold

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "condition": self.condition,
            "passed": self.passed,
            "skipped": self.skipped,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "violation": self.violation,
            "trials": self.trials,
            "worst": self.worst,
            "fitted": self.fitted,
            "note": self.note,
        }

    def line(self) -> str:
        if self.skipped:
            return f"SKIP {self.condition:<6} {self.name}: {self.note}"
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} {self.condition:<6} {self.name}: worst {self.statistic:.6g} "
            f"vs {self.threshold:.6g} over {self.trials} samples"
        )


def _skipped(name: str, condition: str, note: str) -> ProbeReport:
    return ProbeReport(name, condition, True, float("nan"), float("nan"), 0, skipped=True, note=note)


def sample_state(space: GridSpace, rng: np.random.Generator) -> np.ndarray:
    amplitude = 10.0 ** rng.uniform(-2.0, 2.0)
    if rng.random() < 0.5:
        v = rng.standard_normal(space.n) / np.sqrt(space.n)
    else:
        x = space.nodes
        v = np.full(space.n, rng.standard_normal())
        for k in range(1, 4):
            c, s = rng.standard_normal(2)
            v += c * np.cos(2 * np.pi * k * x) + s * np.sin(2 * np.pi * k * x)
        if rng.random() < 0.1:
            v = np.full(space.n, rng.standard_normal())
    return amplitude * v


def _sample_pair(space, rng):
    u = sample_state(space, rng)
    # half the time the second state is a small perturbation of the first
    if rng.random() < 0.5:
        return u, u + sample_state(space, rng) * 10.0 ** rng.uniform(-4.0, 0.0)
    return u, sample_state(space, rng)


def _time(p: EvolutionProblem, rng) -> float:
    # (C1) is required on ]0, T]
    return float(p.horizon * (1.0 - rng.random()))


def _b_diff_sq(p, t, u, v) -> float:
    dB = p.diffusion(t, u) - p.diffusion(t, v)
    return float(np.sum(p.space.h_norm_sq(dB)))


def probe_strong_monotonicity(p: EvolutionProblem, trials: int = 1000, rng_seed: int = 0) -> ProbeReport:
    """Maximum over samples of
    2<u-v, A(u)-A(v)> + sum_k |B_k(u)-B_k(v)|_H^2 + lam |u-v|_V^2 - L |u-v|_H^2.

    A sample passes when this slack is at most 1e-9 times the sum of the
    absolute values of the four terms plus the rounding scale of <w, A(u)-A(v)>.
    """
    space, c = p.space, p.declared
    rng = np.random.default_rng(rng_seed)
    worst_excess, worst = -np.inf, {}
    max_slack = -np.inf
    for _ in range(trials):
        t = _time(p, rng)
        u, v = _sample_pair(space, rng)
        w = u - v
        Au, Av = p.drift(t, u), p.drift(t, v)
        w_norm = float(np.sqrt(space.h_norm_sq(w)))
        terms = (
            2.0 * float(space.inner(w, Au - Av)),
            _b_diff_sq(p, t, u, v),
            c.lam * float(space.v_norm_sq(w)),
            -c.L * float(space.h_norm_sq(w)),
        )
        slack = sum(terms)
        # A(u) - A(v) cancels relative to |A(u)|, not |A(u) - A(v)|
        rounding = 2.0 * w_norm * float(np.sqrt(space.h_norm_sq(Au)) + np.sqrt(space.h_norm_sq(Av)))
        excess = slack - REL_TOL * (sum(abs(x) for x in terms) + rounding)
        max_slack = max(max_slack, slack)
        if excess > worst_excess:
            worst_excess = excess
            worst = {"t": t, "slack": slack, "terms": list(terms), "w_v_norm_sq": float(space.v_norm_sq(w))}
    return ProbeReport(
        "strong monotonicity", "C1", worst_excess <= 0.0, max_slack, 0.0, trials, worst,
        {"lam": c.lam, "L": c.L},
    )


def _ratio_probe(name, condition, p, trials, rng_seed, numerator, bound) -> ProbeReport:
    space = p.space
    rng = np.random.default_rng(rng_seed)
    worst_ratio, worst = 0.0, {}
    for _ in range(trials):
        t = float(p.horizon * rng.random())
        u, v = _sample_pair(space, rng)
        denom = float(space.v_norm_sq(u - v))
        if denom == 0.0:
            continue
        ratio = numerator(t, u, v) / denom
        if ratio > worst_ratio:
            worst_ratio, worst = ratio, {"t": t, "ratio": ratio, "v_norm_sq": denom}
    passed = worst_ratio <= bound * (1.0 + REL_TOL) + REL_TOL
    return ProbeReport(name, condition, passed, worst_ratio, bound, trials, worst,
                       {"observed_constant": worst_ratio})


def probe_lipschitz_B(p: EvolutionProblem, trials: int = 1000, rng_seed: int = 0) -> ProbeReport:
    """Worst ratio sum_k |B_k(t,u)-B_k(t,v)|_H^2 / |u-v|_V^2 against L1."""
    if p.declared.L1 is None:
        return _skipped("Lipschitz B", "C2", "no L1 declared")
    return _ratio_probe("Lipschitz B", "C2", p, trials, rng_seed,
                        lambda t, u, v: _b_diff_sq(p, t, u, v), p.declared.L1)


def probe_lipschitz_A(p: EvolutionProblem, trials: int = 1000, rng_seed: int = 0) -> ProbeReport:
    """Worst ratio |A(t,u)-A(t,v)|_{V*}^2 / |u-v|_V^2 against L2."""
    if p.declared.L2 is None:
        return _skipped("Lipschitz A", "C3", "drift declared non-Lipschitz")
    space = p.space

    def num(t, u, v):
        return float(space.vstar_norm_sq(p.drift(t, u) - p.drift(t, v)))

    return _ratio_probe("Lipschitz A", "C3", p, trials, rng_seed, num, p.declared.L2)


def probe_time_regularity_B(p: EvolutionProblem, trials: int = 1000, rng_seed: int = 0) -> ProbeReport:
    """Worst ratio sum_k |B_k(t,v)-B_k(s,v)|_H^2 / (|t-s|^{2 nu} (eta + C |v|_V^2)).

    Half of the time pairs are uniform on [0, T]^2; the rest sit within
    10^-6..1 of each other so that a too-optimistic exponent shows up.
    """
    c, space = p.declared, p.space
    rng = np.random.default_rng(rng_seed)
    T = p.horizon
    worst_ratio, worst = 0.0, {}
    fitted_eta = 0.0
    for _ in range(trials):
        t = float(T * rng.random())
        if rng.random() < 0.5:
            s = float(T * rng.random())
        else:
            s = float(np.clip(t + rng.choice([-1.0, 1.0]) * T * 10.0 ** rng.uniform(-6.0, 0.0), 0.0, T))
        if s == t:
            continue
        v = sample_state(space, rng)
        num = float(np.sum(space.h_norm_sq(p.diffusion(t, v) - p.diffusion(s, v))))
        weight = abs(t - s) ** (2.0 * c.nu)
        vn = float(space.v_norm_sq(v))
        fitted_eta = max(fitted_eta, num / weight - c.holder_C * vn)
        denom = weight * (c.holder_eta + c.holder_C * vn)
        if num == 0.0:
            continue
        ratio = num / denom if denom > 0 else np.inf
        if ratio > worst_ratio:
            worst_ratio, worst = ratio, {"t": t, "s": s, "ratio": ratio}
    passed = worst_ratio <= 1.0 + REL_TOL
    return ProbeReport(
        "time regularity of B", "T1", passed, worst_ratio, 1.0, trials, worst,
        {"nu": c.nu, "eta": c.holder_eta, "C": c.holder_C, "smallest_eta_for_C": fitted_eta},
    )


def _zero_bounds(p: EvolutionProblem, n_times: int = 65) -> tuple[float, float]:
    """sup_t sum_k |B_k(t,0)|_H^2 and sup_t |A(t,0)|_{V*}^2 on a time lattice."""
    zero = np.zeros(p.space.n)
    K1 = K2 = 0.0
    for t in np.linspace(0.0, p.horizon, n_times):
        K1 = max(K1, float(np.sum(p.space.h_norm_sq(p.diffusion(t, zero)))))
        K2 = max(K2, float(p.space.vstar_norm_sq(p.drift(t, zero))))
    return K1, K2


def probe_growth(p: EvolutionProblem, trials: int = 1000, rng_seed: int = 0) -> ProbeReport:
    """Check |A(t,v)|_{V*}^2 <= 2 L2 |v|_V^2 + 2 K2 and sum_k |B_k|_H^2 <= 2 L1 |v|_V^2 + 2 K1.

    K1, K2 are fitted as the sup over a time lattice of the operators at v = 0.
    The statistic is the worst ratio of left to right side over both bounds.
    """
    c, space = p.declared, p.space
    if c.L1 is None or c.L2 is None:
        return _skipped("growth", "growth", "needs both L1 and L2")
    K1, K2 = _zero_bounds(p)
    rng = np.random.default_rng(rng_seed)
    worst_ratio, worst = 0.0, {}
    for _ in range(trials):
        t = float(p.horizon * rng.random())
        v = sample_state(space, rng)
        vn = float(space.v_norm_sq(v))
        pairs = (
            ("A", float(space.vstar_norm_sq(p.drift(t, v))), 2 * c.L2 * vn + 2 * K2),
            ("B", float(np.sum(space.h_norm_sq(p.diffusion(t, v)))), 2 * c.L1 * vn + 2 * K1),
        )
        for which, lhs, rhs in pairs:
            if lhs == 0.0:
                continue
            ratio = lhs / rhs if rhs > 0 else np.inf
            if ratio > worst_ratio:
                worst_ratio, worst = ratio, {"operator": which, "t": t, "ratio": ratio}
    return ProbeReport("growth", "growth", worst_ratio <= 1.0 + REL_TOL, worst_ratio, 1.0, trials,
                       worst, {"K1": K1, "K2": K2})


def probe_coercivity(p: EvolutionProblem, trials: int = 1000, rng_seed: int = 0) -> ProbeReport:
    """Check 2<v,A(t,v)> + sum_k |B_k(t,v)|^2 + lam/2 |v|_V^2 - L |v|_H^2 <= K3.

    K3 = 4 K2 / lam + (1 + 4 L1 / lam) K1 is the constant obtained from strong
    monotonicity, the Lipschitz bound on B and the bounds at v = 0.  The
    largest observed left side is reported as the fitted K3.
    """
    c, space = p.declared, p.space
    if c.L1 is None:
        return _skipped("coercivity", "coerc", "needs L1")
    K1, K2 = _zero_bounds(p)
    K3 = 4.0 * K2 / c.lam + (1.0 + 4.0 * c.L1 / c.lam) * K1
    rng = np.random.default_rng(rng_seed)
    worst_excess, worst, fitted = -np.inf, {}, -np.inf
    for _ in range(trials):
        t = _time(p, rng)
        v = sample_state(space, rng)
        terms = (
            2.0 * float(space.inner(v, p.drift(t, v))),
            float(np.sum(space.h_norm_sq(p.diffusion(t, v)))),
            0.5 * c.lam * float(space.v_norm_sq(v)),
            -c.L * float(space.h_norm_sq(v)),
        )
        lhs = sum(terms)
        fitted = max(fitted, lhs)
        excess = lhs - K3 - REL_TOL * (sum(abs(x) for x in terms) + K3)
        if excess > worst_excess:
            worst_excess, worst = excess, {"t": t, "lhs": lhs, "terms": list(terms)}
    return ProbeReport("coercivity", "coerc", worst_excess <= 0.0, fitted, K3, trials, worst,
                       {"K1": K1, "K2": K2, "K3_bound": K3, "K3_fitted": fitted})


def probe_parabolicity(spec: QuasilinearSpec, space: GridSpace) -> ProbeReport:
    """Minimum of a - 1/2 sum_k b_k^2 on the assembly lattice against the declared constant."""
    margin, t, x = parabolicity_margin(spec, space)
    return ProbeReport(
        "stochastic parabolicity", "A1", margin >= spec.parabolicity, margin, spec.parabolicity,
        space.n * 17, {"t": t, "x": x, "margin": margin}, lower_bound=True,
    )


def parabolicity_failure(err: ParabolicityError) -> ProbeReport:
    return ProbeReport(
        "stochastic parabolicity", "A1", False, err.margin, err.required, 0,
        {"t": err.t, "x": err.x, "margin": err.margin}, note=str(err), lower_bound=True,
    )


def run_all_probes(
    p: EvolutionProblem,
    trials: int = 1000,
    rng_seed: int = 0,
    spec: Optional[QuasilinearSpec] = None,
) -> list[ProbeReport]:
    reports = []
    if spec is not None:
        reports.append(probe_parabolicity(spec, p.space))
    reports += [
        probe_strong_monotonicity(p, trials, rng_seed),
        probe_lipschitz_B(p, trials, rng_seed + 1),
        probe_lipschitz_A(p, trials, rng_seed + 2),
        probe_growth(p, trials, rng_seed + 3),
        probe_coercivity(p, trials, rng_seed + 4),
        probe_time_regularity_B(p, trials, rng_seed + 5),
    ]
    return reports
