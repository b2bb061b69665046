"""Command-line driver: ``implicit-spde --config run.json``.

A run configuration is a JSON object::

    {
      "command": "convergence",
      "problem": {"name": "G1", "n": 64},
      "scheme": {"coeff_mode": "averaged", "inner": {"method": "auto"}},
      "study": {"levels": [16, 32, 64, 128, 256], "m_fine": 8192,
                "n_paths": 200, "base_seed": 0},
      "output": "results"
    }

Unknown keys are errors.  Exit status: 0 success, 1 completed with a failed
check (probe, acceptance window, too many failed paths), 2 bad configuration
or usage.  Output files are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import gallery, noise, probes, study
from .io import atomic_write_text
from .problem import EvolutionProblem, ParabolicityError
from .stepper import AdmissibilityError, InnerSolverConfig, SchemeConfig, StepFailure, run_scheme

logger = logging.getLogger("implicit_spde")

OUTPUT_ENV = "IMPLICIT_SPDE_OUTPUT"
COMMANDS = ("check", "solve", "oracle", "convergence", "first-step-compare")
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
U64_MAX = 2**64 - 1

_TOP_KEYS = {"command", "problem", "scheme", "study", "probes", "output"}
_SCHEME_KEYS = {"m", "coeff_mode", "quadrature_points", "first_step_diffusion", "inner"}
_INNER_KEYS = {"method", "rtol", "atol", "max_iter"}
_STUDY_KEYS = {"levels", "m_fine", "n_paths", "base_seed", "block_size", "windows"}
_PROBE_KEYS = {"trials", "seed"}
_WINDOW_KEYS = {"max_H_sq", "sum_V_sq", "oracle"}


class ConfigError(ValueError):
    """Invalid run configuration (exit status 2)."""


@dataclass
class RunConfig:
    command: str
    problem: dict
    scheme: dict = field(default_factory=dict)
    study: dict = field(default_factory=dict)
    probes: dict = field(default_factory=dict)
    output: str = "."

    @classmethod
    def from_dict(cls, raw) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        _reject_unknown(raw, _TOP_KEYS, "top level")
        if "command" not in raw:
            raise ConfigError("missing 'command'")
        if raw["command"] not in COMMANDS:
            raise ConfigError(f"unknown command {raw['command']!r}, expected one of {COMMANDS}")
        problem = raw.get("problem")
        if not isinstance(problem, dict) or not isinstance(problem.get("name"), str):
            raise ConfigError("'problem' must be an object with a string 'name'")
        sections = {}
        for key, allowed in (("scheme", _SCHEME_KEYS), ("study", _STUDY_KEYS), ("probes", _PROBE_KEYS)):
            value = raw.get(key, {})
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be an object")
            _reject_unknown(value, allowed, key)
            sections[key] = value
        inner = sections["scheme"].get("inner", {})
        if not isinstance(inner, dict):
            raise ConfigError("'scheme.inner' must be an object")
        _reject_unknown(inner, _INNER_KEYS, "scheme.inner")
        windows = sections["study"].get("windows", {})
        if not isinstance(windows, dict):
            raise ConfigError("'study.windows' must be an object")
        _reject_unknown(windows, _WINDOW_KEYS, "study.windows")
        output = raw.get("output", ".")
        if not isinstance(output, str):
            raise ConfigError("'output' must be a string")
        return cls(raw["command"], dict(problem), **sections, output=output)


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}:{err.colno}: malformed JSON: {err.msg}") from None
    return RunConfig.from_dict(raw)


# Building blocks shared by the commands


def _int(value, what: str, low: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < low:
        raise ConfigError(f"{what} must be an integer >= {low}, got {value!r}")
    return value


def build_problem(rc: RunConfig) -> EvolutionProblem:
    overrides = {k: v for k, v in rc.problem.items() if k != "name"}
    n = _int(overrides.pop("n", 64), "problem.n", 3)
    try:
        return gallery.make_problem(rc.problem["name"], n=n, **overrides)
    except KeyError as err:
        raise ConfigError(f"unknown problem {rc.problem['name']!r}; known: {', '.join(gallery.GALLERY)}") from err
    except TypeError as err:
        raise ConfigError(f"bad problem override: {err}") from err


def build_scheme(rc: RunConfig, m: int) -> SchemeConfig:
    raw = dict(rc.scheme)
    raw.pop("m", None)
    try:
        inner = InnerSolverConfig(**raw.pop("inner", {}))
        return SchemeConfig(m=m, inner=inner, **raw)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad scheme settings: {err}") from err


def _study_settings(rc: RunConfig) -> dict:
    s = rc.study
    levels = s.get("levels", list(study.DEFAULT_LEVELS))
    if not isinstance(levels, list) or not levels:
        raise ConfigError("study.levels must be a non-empty list")
    levels = [_int(m, "each level") for m in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError(f"study.levels must be strictly increasing, got {levels}")
    m_fine = _int(s.get("m_fine", study.DEFAULT_M_FINE), "study.m_fine")
    if not noise.is_power_of_two(m_fine):
        raise ConfigError(f"study.m_fine must be a power of 2, got {m_fine}")
    for m in levels:
        if m_fine % m or not noise.is_power_of_two(m_fine // m):
            raise ConfigError(f"level {m} is not a dyadic divisor of m_fine={m_fine}")
    base_seed = _int(s.get("base_seed", 0), "study.base_seed", 0)
    if base_seed > U64_MAX:
        raise ConfigError("study.base_seed must fit in 64 bits")
    return {
        "levels": levels,
        "m_fine": m_fine,
        "n_paths": _int(s.get("n_paths", 200), "study.n_paths"),
        "base_seed": base_seed,
        "block_size": _int(s.get("block_size", study.DEFAULT_BLOCK), "study.block_size"),
    }


def _windows(rc: RunConfig, problem: EvolutionProblem) -> dict:
    # The theorems bound the squared errors by C tau^{2 nu}: the H window sits
    # at 2 nu +- 0.2, the V-sum only has the lower bound.
    two_nu = 2.0 * problem.declared.nu
    out = {
        "max_H_sq": [two_nu - 0.2, two_nu + 0.2],
        "sum_V_sq": [two_nu - 0.2, float("inf")],
        "oracle": [0.9, 1.1],
    }
    for key, value in rc.study.get("windows", {}).items():
        if (not isinstance(value, list) or len(value) != 2
                or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
                or value[0] > value[1]):
            raise ConfigError(f"study.windows.{key} must be [low, high], got {value!r}")
        out[key] = [float(value[0]), float(value[1])]
    return out


def _check_levels_admissible(problem, scheme: SchemeConfig, levels) -> None:
    for m in levels:
        try:
            scheme.with_steps(m).check_admissible(problem)
        except AdmissibilityError as err:
            raise ConfigError(str(err)) from err


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _in_window(value: float, window) -> bool:
    return bool(window[0] <= value <= window[1])


# Commands


def cmd_check(rc: RunConfig, out: Path, threads: int) -> int:
    trials = _int(rc.probes.get("trials", 1000), "probes.trials")
    seed = _int(rc.probes.get("seed", 0), "probes.seed", 0)
    spec = None
    try:
        problem = build_problem(rc)
    except ParabolicityError as err:
        reports = [probes.parabolicity_failure(err)]
        print(f"FAIL: {err}", file=sys.stderr)
    else:
        if rc.problem["name"] != "anti_monotone":
            overrides = {k: v for k, v in rc.problem.items() if k not in ("name", "n")}
            spec = gallery.quasilinear_spec(rc.problem["name"], **overrides)
        reports = probes.run_all_probes(problem, trials, seed, spec=spec)
    lines = [r.line() for r in reports]
    atomic_write_text(out / "probes.txt", "\n".join(lines) + "\n")
    payload = {"problem": rc.problem, "trials": trials, "seed": seed,
               "reports": [r.as_dict() for r in reports]}
    atomic_write_text(out / "probes.json", json.dumps(payload, indent=2, default=_json_default) + "\n")
    for line in lines:
        print(line)
    return EXIT_OK if all(r.passed or r.skipped for r in reports) else EXIT_FAIL


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def cmd_solve(rc: RunConfig, out: Path, threads: int) -> int:
    problem = build_problem(rc)
    m = _int(rc.scheme.get("m", 256), "scheme.m")
    scheme = build_scheme(rc, m)
    _check_levels_admissible(problem, scheme, [m])
    if not noise.is_power_of_two(m):
        raise ConfigError(f"scheme.m must be a power of 2, got {m}")
    seed = noise.path_seed(_study_settings(rc)["base_seed"], 0)
    inc = noise.generate(problem.d1, m, problem.horizon, seed).increments
    try:
        traj = run_scheme(problem, scheme, inc)
    except StepFailure as err:
        print(f"FAIL: {err}", file=sys.stderr)
        return EXIT_FAIL
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"u{j}" for j in range(problem.space.n)])
    for t, row in zip(traj.times, traj.values):
        w.writerow([_fmt(t)] + [_fmt(x) for x in row])
    atomic_write_text(out / "trajectory.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "residual", "tolerance", "iterations"])
    for i, (r, tol, it) in enumerate(zip(traj.residuals, traj.tolerances, traj.iteration_counts)):
        w.writerow([i, _fmt(r), _fmt(tol), int(it)])
    atomic_write_text(out / "residuals.csv", buf.getvalue())
    print(f"solved {problem.name} with m={m}; max residual {traj.residuals.max():.3e}")
    return EXIT_OK


def cmd_oracle(rc: RunConfig, out: Path, threads: int) -> int:
    problem = build_problem(rc)
    if problem.heat_coefficient is None:
        raise ConfigError(f"problem {problem.name!r} has no closed-form heat solution")
    settings = _study_settings(rc)
    scheme = build_scheme(rc, max(settings["levels"]))
    _check_levels_admissible(problem, scheme, settings["levels"])
    if len(settings["levels"]) < 3:
        raise ConfigError("the oracle rate fit needs at least three levels")
    window = _windows(rc, problem)["oracle"]
    res = study.oracle_study(problem, settings["levels"], scheme)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "tau", "error_H"])
    for m, tau, err in zip(res["levels"], res["taus"], res["errors"]):
        w.writerow([m, _fmt(tau), _fmt(err)])
    w.writerow(["slope_error_H", _fmt(res["slope"]), _fmt(res["stderr"]), _fmt(res["intercept"])])
    atomic_write_text(out / "oracle.csv", buf.getvalue())
    ok = _in_window(res["slope"], window)
    print(f"{'PASS' if ok else 'FAIL'} oracle slope {res['slope']:.4f} in [{window[0]}, {window[1]}]")
    return EXIT_OK if ok else EXIT_FAIL


def _prepare_study(rc: RunConfig):
    problem = build_problem(rc)
    settings = _study_settings(rc)
    scheme = build_scheme(rc, max(settings["levels"]))
    _check_levels_admissible(problem, scheme, settings["levels"] + [settings["m_fine"]])
    if len(settings["levels"]) < 3:
        raise ConfigError("a rate fit needs at least three levels")
    return problem, settings, scheme


def cmd_convergence(rc: RunConfig, out: Path, threads: int) -> int:
    problem, settings, scheme = _prepare_study(rc)
    windows = _windows(rc, problem)
    try:
        report = study.run_study(problem, cfg=scheme, threads=threads, **settings)
    except study.StudyError as err:
        print(f"FAIL: {err}", file=sys.stderr)
        return EXIT_FAIL
    study.write_report_csv(report, out / "convergence.csv", timestamp=_timestamp())
    ok = True
    for metric in ("max_H_sq", "sum_V_sq"):
        slope, _, se = report.slopes[metric]
        inside = _in_window(slope, windows[metric])
        ok &= inside
        print(f"{'PASS' if inside else 'FAIL'} slope {metric} = {slope:.4f} (stderr {se:.3g}) "
              f"window [{windows[metric][0]}, {windows[metric][1]}]")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_first_step_compare(rc: RunConfig, out: Path, threads: int) -> int:
    problem, settings, scheme = _prepare_study(rc)
    reports = {}
    stamp = _timestamp()
    try:
        for mode in ("paper", "natural"):
            cfg = dataclasses.replace(scheme, first_step_diffusion=mode)
            reports[mode] = study.run_study(problem, cfg=cfg, threads=threads, **settings)
    except study.StudyError as err:
        print(f"FAIL: {err}", file=sys.stderr)
        return EXIT_FAIL
    for mode, report in reports.items():
        study.write_report_csv(report, out / f"convergence_{mode}.csv", timestamp=stamp)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "paper", "natural", "difference"])
    for metric in ("max_H_sq", "sum_V_sq"):
        a, b = reports["paper"].slopes[metric][0], reports["natural"].slopes[metric][0]
        w.writerow([f"slope_{metric}", _fmt(a), _fmt(b), _fmt(b - a)])
        print(f"slope {metric}: paper {a:.4f}, natural {b:.4f}, difference {b - a:+.4f}")
        for j, m in enumerate(settings["levels"]):
            a, b = reports["paper"].mean[metric][j], reports["natural"].mean[metric][j]
            w.writerow([f"mean_{metric}_m{m}", _fmt(a), _fmt(b), _fmt(b - a)])
    atomic_write_text(out / "first_step_compare.csv", buf.getvalue())
    return EXIT_OK


HANDLERS = {
    "check": cmd_check,
    "solve": cmd_solve,
    "oracle": cmd_oracle,
    "convergence": cmd_convergence,
    "first-step-compare": cmd_first_step_compare,
}


def _default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="implicit-spde",
        description="Implicit Euler scheme for monotone SPDEs: probes, solves and convergence studies.",
    )
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--output", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for studies (default: available CPUs)")
    parser.add_argument("--seed", type=int, default=None, help="base seed, overrides the config")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed <= U64_MAX:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            rc.study = {**rc.study, "base_seed": args.seed}
            rc.probes = {**rc.probes, "seed": args.seed}
        threads = args.threads if args.threads is not None else _default_threads()
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = Path(args.output or os.environ.get(OUTPUT_ENV) or rc.output)
        return HANDLERS[rc.command](rc, out, threads)
    except (ConfigError, ParabolicityError, noise.ConfigurationError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
