import dataclasses

import numpy as np
import pytest

from implicit_spde import gallery, noise, probes, stepper
from implicit_spde.problem import DeclaredConstants, EvolutionProblem, Nonlinearity, QuasilinearSpec, assemble_quasilinear
from implicit_spde.space import GridSpace, StateVector
from implicit_spde.stepper import (
    AdmissibilityError,
    InnerSolverConfig,
    SchemeConfig,
    StepFailure,
    averaged_diffusion,
    averaged_drift,
    implicit_step,
    run_batch,
    run_scheme,
)
from implicit_spde.study import heat_exact_oracle

from conftest import linear_problem


def cfg(m, method="auto", **kw):
    return SchemeConfig(m, inner=InnerSolverConfig(method=method), **kw)


def scaled_problem(n=8):
    """A(s, v) = s * Lap v and B(s, v) = s * cos(2 pi x): both affine in time."""
    space = GridSpace(n)
    c = np.cos(2 * np.pi * space.nodes)
    return EvolutionProblem(
        space=space,
        drift=lambda t, v: t * space.laplacian(v),
        diffusion=lambda t, v: np.broadcast_to(t * c, np.shape(v)[:-1] + (1, n)).copy(),
        d1=1,
        initial=np.sin(2 * np.pi * space.nodes),
        horizon=1.0,
        declared=DeclaredConstants(lam=1e-6, L=0.0),
        drift_time_dependent=True,
        diffusion_time_dependent=True,
    ), c


def test_config_validation():
    with pytest.raises(ValueError):
        SchemeConfig(0)
    with pytest.raises(ValueError):
        SchemeConfig(4, coeff_mode="midpoint")
    with pytest.raises(ValueError):
        SchemeConfig(4, first_step_diffusion="zero")
    with pytest.raises(ValueError):
        SchemeConfig(4, quadrature_points=0)
    with pytest.raises(ValueError):
        InnerSolverConfig(method="gmres")
    assert SchemeConfig(4).first_step_diffusion == "paper"
    assert InnerSolverConfig().tolerance(np.array([1.0, 0.0])).tolist() == [1e-10, 1e-14]


def test_admissibility_guard():
    p = gallery.make_problem("G2")  # L = 4: tau <= 1/8
    SchemeConfig.for_problem(p, 8)
    with pytest.raises(AdmissibilityError):
        SchemeConfig.for_problem(p, 7)
    with pytest.raises(AdmissibilityError):
        run_batch(p, SchemeConfig(4), np.zeros((1, 1, 4)))


def test_time_independent_average_is_pointwise():
    p = gallery.make_problem("G2")
    v = np.random.default_rng(0).standard_normal(64)
    assert np.array_equal(averaged_drift(p, 3, cfg(16), v), p.drift(0.0, v))
    assert np.array_equal(averaged_diffusion(p, 3, cfg(16), v), p.diffusion(0.0, v))


def test_midpoint_average_exact_for_linear_time_dependence():
    p, c = scaled_problem()
    v = np.sin(2 * np.pi * p.space.nodes)
    got = averaged_drift(p, 0, cfg(1), v)
    assert np.allclose(got, 0.5 * p.space.laplacian(v), rtol=1e-14, atol=1e-12)
    assert isinstance(averaged_drift(p, 0, cfg(1), StateVector(v, p.space)), StateVector)
    # paper mode, m = 2, i = 1 averages over [0, 1/2]
    assert np.allclose(averaged_diffusion(p, 1, cfg(2), v)[0], 0.25 * c, atol=1e-15)


def test_endpoint_mode_uses_endpoints():
    p, c = scaled_problem()
    v = np.sin(2 * np.pi * p.space.nodes)
    e = cfg(4, coeff_mode="endpoint")
    assert np.allclose(averaged_drift(p, 1, e, v), 0.5 * p.space.laplacian(v), atol=1e-12)
    assert np.allclose(averaged_diffusion(p, 1, e, v)[0], 0.25 * c)
    assert np.allclose(averaged_diffusion(p, 0, e, v)[0], 0.0)


def test_first_step_diffusion_conventions():
    p, c = scaled_problem()
    v = np.zeros(8)
    assert np.all(averaged_diffusion(p, 0, cfg(4), v) == 0.0)
    natural = averaged_diffusion(p, 0, cfg(4, first_step_diffusion="natural"), v)
    assert np.allclose(natural[0], 0.125 * c)
    sv = averaged_diffusion(p, 0, cfg(4), StateVector(v, p.space))
    assert isinstance(sv, list) and isinstance(sv[0], StateVector)


def test_zero_operators_leave_state_unchanged():
    p = linear_problem(n=8, initial=np.arange(8.0))
    x, res, iters = implicit_step(p, 0, cfg(4), np.arange(8.0), [0.3])
    assert np.array_equal(x, np.arange(8.0))
    traj = run_scheme(p, cfg(16), noise.generate(1, 16, 1.0, 0).increments)
    assert np.all(traj.values == np.arange(8.0))


def test_scalar_decay_step():
    # drift -v, tau = 1/2: (1 + tau) x = 1
    p = linear_problem(n=5, diag=-1.0, horizon=1.0)
    for method in ("direct", "newton", "picard"):
        x, res, _ = implicit_step(p, 0, cfg(2, method), np.ones(5), [0.0])
        assert np.allclose(x, 2.0 / 3.0, rtol=1e-14)


def test_newton_one_iteration_on_linear_drift(rng):
    p = gallery.make_problem("G1")
    y = rng.standard_normal(64)
    xn, _, it = implicit_step(p, 2, cfg(32, "newton"), y, [0.0])
    xd, _, _ = implicit_step(p, 2, cfg(32, "direct"), y, [0.0])
    assert it == 1
    assert np.sqrt(p.space.h_norm_sq(xn - xd)) <= 1e-9


def test_solvers_agree_on_nonlinear_steps(rng):
    F = Nonlinearity(lambda t, x, p, r: np.sin(r), lambda t, x, p, r: 0 * p,
                     lambda t, x, p, r: np.cos(r), bound=1.0)
    spec = QuasilinearSpec(initial=lambda x: np.sin(2 * np.pi * x),
                           declared=DeclaredConstants(lam=1.0, L=3.0, L1=0.0, L2=4.0, nonlinear_lipschitz=1.0),
                           parabolicity=0.5, F=F)
    p = assemble_quasilinear(spec, GridSpace(64))
    for _ in range(20):
        y = probes.sample_state(p.space, rng)
        xn, rn, _ = implicit_step(p, 0, cfg(64, "newton"), y, [0.0])
        xp, rp, _ = implicit_step(p, 0, cfg(64, "picard"), y, [0.0])
        tol = InnerSolverConfig().tolerance(np.sqrt(p.space.h_norm_sq(y)))
        assert rn <= tol and rp <= tol
        assert np.sqrt(p.space.h_norm_sq(xn - xp)) <= 10 * tol


def test_picard_zero_map_returns_rhs(rng):
    y = rng.standard_normal((3, 8))
    out = stepper.picard_solve(lambda x, r: x, lambda x, r: np.zeros_like(x), y, np.full(3, 1e-12), 10,
                               lambda r: np.sqrt(np.sum(r**2, axis=-1)))
    assert np.array_equal(out.x, y) and np.all(out.iterations == 0)


def test_picard_flags_divergence():
    y = np.ones((1, 4))
    out = stepper.picard_solve(lambda x, r: 2 * x, lambda x, r: x, y, np.full(1, 1e-12), 20,
                               lambda r: np.sqrt(np.sum(r**2, axis=-1)))
    assert out.diverged[0] and not out.converged[0]


def test_picard_falls_back_to_newton_when_tau_K_large():
    p = gallery.make_problem("G2")
    s = stepper._Stepper(p, cfg(8, "picard"))  # tau * K = 1.25 / 8 < 1
    assert s.method == "picard"
    big = dataclasses.replace(p, declared=dataclasses.replace(p.declared, nonlinear_lipschitz=100.0))
    assert stepper._Stepper(big, cfg(8, "picard")).method == "newton"


def test_direct_rejects_nonlinear_drift():
    with pytest.raises(ValueError):
        stepper._Stepper(gallery.make_problem("G2"), cfg(16, "direct"))


def test_residual_contract_along_paths():
    p = gallery.make_problem("G2")
    inc = np.stack([noise.generate(1, 64, 1.0, s).increments for s in range(4)])
    run = run_batch(p, cfg(64), inc)
    assert run.ok.all()
    assert np.all(run.residuals <= run.tolerances)


def test_step_failure_raised():
    p = gallery.make_problem("G2")
    c = SchemeConfig(16, inner=InnerSolverConfig(method="newton", max_iter=1, rtol=1e-300, atol=1e-300))
    with pytest.raises(StepFailure) as info:
        run_scheme(p, c, noise.generate(1, 16, 1.0, 0).increments)
    assert info.value.step == 0


def test_failed_paths_are_frozen_not_fatal():
    p = gallery.make_problem("G2")
    c = SchemeConfig(16, inner=InnerSolverConfig(method="newton", max_iter=1, rtol=1e-300, atol=1e-300))
    run = run_batch(p, c, np.zeros((2, 1, 16)))
    assert not run.ok.any() and np.all(run.failed_step == 0)


def test_heat_first_order_against_oracle():
    # short horizon keeps the slowest mode e^{-mu t} well above rounding
    p = gallery.make_problem("heat", horizon=0.05)
    exact = heat_exact_oracle(p.space, 1.0, p.initial, 0.05)
    errors = []
    for m in (16, 32, 64, 128):
        traj = run_scheme(p, cfg(m), np.zeros((1, m)))
        errors.append(np.sqrt(p.space.h_norm_sq(traj.values[-1] - exact)))
    ratios = np.array(errors[:-1]) / np.array(errors[1:])
    assert np.all((ratios > 1.7) & (ratios < 2.3)), ratios
    assert errors[-1] <= 0.05 / 128 * 5


def test_dissipativity_of_symmetric_linear_drift():
    p = gallery.make_problem("heat")
    rng = np.random.default_rng(1)
    traj = run_scheme(p, cfg(64), np.zeros((1, 64)), initial=rng.standard_normal(64))
    norms = p.space.h_norm_sq(traj.values)
    # the constant mode is preserved exactly up to rounding
    assert np.all(norms[1:] <= norms[:-1] * (1 + 1e-12))


def test_affinity_in_data_and_noise(rng):
    p = gallery.make_problem("G1")
    m = 32
    ua, ub = rng.standard_normal((2, 64))
    wa, wb = rng.standard_normal((2, 1, m)) * np.sqrt(1 / m)

    def run(u0, dw):
        return run_scheme(p, cfg(m), dw, initial=u0).values

    lhs = run(ua + ub, wa + wb) + run(np.zeros(64), np.zeros((1, m)))
    rhs = run(ua, wa) + run(ub, wb)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))


@pytest.mark.parametrize("name", ["G1", "G2", "heat"])
def test_endpoint_equals_averaged_on_time_independent_problems(name):
    p = gallery.make_problem(name)
    inc = np.stack([noise.generate(1, 32, 1.0, s).increments for s in range(3)])
    a = run_batch(p, cfg(32, first_step_diffusion="natural"), inc)
    e = run_batch(p, cfg(32, coeff_mode="endpoint"), inc)
    assert np.array_equal(a.states, e.states)


def test_batch_rows_match_single_runs():
    p = gallery.make_problem("G2")
    inc = np.stack([noise.generate(1, 32, 1.0, s).increments for s in range(5)])
    batch = run_batch(p, cfg(32), inc)
    for b in range(5):
        single = run_scheme(p, cfg(32), inc[b])
        assert np.array_equal(batch.states[:, b], single.values)


def test_recording_and_running_statistics():
    p = gallery.make_problem("G1")
    inc = noise.generate(1, 64, 1.0, 3).increments[None]
    full = run_batch(p, cfg(64), inc)
    thin = run_batch(p, cfg(64), inc, record_every=8)
    assert thin.states.shape == (9, 1, 64)
    assert np.array_equal(full.states[::8], thin.states)
    s = p.space
    assert thin.max_h_sq[0] == pytest.approx(s.h_norm_sq(full.states[:, 0]).max())
    assert thin.sum_v_sq[0] == pytest.approx(s.v_norm_sq(full.states[1:, 0]).sum() / 64)
    traj = run_scheme(p, cfg(64), inc[0], record_every=16)
    assert np.allclose(traj.times, [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValueError):
        run_batch(p, cfg(64), inc, record_every=5)
    with pytest.raises(ValueError):
        run_scheme(p, cfg(64), inc[0][:, :32])


def test_apriori_bound_on_fixed_path():
    # a-priori bound statistic stays bounded as the mesh is refined
    p = gallery.make_problem("G2")
    inc = noise.generate(1, 1024, 1.0, 0).increments[None]
    stats = [
        float((r.max_h_sq + r.sum_v_sq)[0])
        for r in (run_batch(p, cfg(m), noise.coarsen_increments(inc, m), record_every=m) for m in (16, 64, 256, 1024))
    ]
    assert max(stats) / min(stats) < 2.0


def test_all_failed_batch_records_frozen_states():
    p = gallery.make_problem("G2")
    c = SchemeConfig(16, inner=InnerSolverConfig(method="newton", max_iter=1, rtol=1e-300, atol=1e-300))
    run = run_batch(p, c, np.zeros((2, 1, 16)), record_every=4)
    assert np.all(run.states == p.initial)
