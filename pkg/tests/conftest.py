import numpy as np
import pytest

from implicit_spde.problem import DeclaredConstants, EvolutionProblem, LinearPart
from implicit_spde.space import GridSpace


def linear_problem(n=8, diag=0.0, sub=0.0, sup=0.0, noise=0.0, initial=None, horizon=1.0,
                   declared=None, name="linear"):
    """Constant-coefficient problem A(v) = Lv, B(v) = noise * v with L tridiagonal."""
    space = GridSpace(n)
    bands = tuple(np.full(n, float(c)) for c in (sub, diag, sup))

    def drift(t, v):
        v = np.asarray(v, dtype=float)
        return bands[0] * np.roll(v, 1, axis=-1) + bands[1] * v + bands[2] * np.roll(v, -1, axis=-1)

    def diffusion(t, v):
        return (noise * np.asarray(v, dtype=float))[..., None, :]

    return EvolutionProblem(
        space=space,
        drift=drift,
        diffusion=diffusion,
        d1=1,
        initial=np.ones(n) if initial is None else initial,
        horizon=horizon,
        declared=declared or DeclaredConstants(lam=1e-6, L=0.0),
        drift_jacobian=lambda t, v: bands,
        linear_part=LinearPart(lambda t: bands),
        is_linear=True,
        name=name,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
