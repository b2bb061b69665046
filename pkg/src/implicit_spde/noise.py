"""Coupled Brownian increments for every time level of a study.

Increments are drawn once on the finest mesh and then aggregated upward, so
the coarse runs and the fine reference see the same Brownian path.  Each
Wiener component ``k`` is driven by its own Philox (counter-based) stream
keyed from ``(seed, k)``; standard normals come from numpy's Generator.

Aggregation order is canonical: a level with ``m`` steps is obtained from the
level with ``2m`` steps by adding adjacent pairs, left child first.  Any
coarsening is a sequence of such halvings, which makes
``coarsen(coarsen(x, m2), m1) == coarsen(x, m1)`` hold bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GENERATOR_VERSION",
    "BrownianLattice",
    "ConfigurationError",
    "generate",
    "coarsen",
    "coarsen_increments",
    "path_seed",
    "is_power_of_two",
]

GENERATOR_VERSION = f"philox4x64-keyed(seed,k)/normal-ziggurat/numpy-{np.__version__}/pairwise-v1"


class ConfigurationError(ValueError):
    pass


def is_power_of_two(m: int) -> bool:
    return m >= 1 and (m & (m - 1)) == 0


def _stream(seed: int, component: int) -> np.random.Generator:
    key = np.random.SeedSequence([seed, component]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def path_seed(base_seed: int, path: int) -> int:
    """Seed of Monte-Carlo path ``path``, mixed from ``base_seed`` via SeedSequence."""
    words = np.random.SeedSequence([base_seed, path, 0x5EED]).generate_state(2, np.uint64)
    return (int(words[0]) << 64) | int(words[1])


@dataclass(frozen=True, eq=False)
class BrownianLattice:
    d1: int
    m_fine: int
    horizon: float
    increments: np.ndarray
    seed: int

    @property
    def tau(self) -> float:
        return self.horizon / self.m_fine


def generate(d1: int, m_fine: int, horizon: float, seed: int) -> BrownianLattice:
    """Draw i.i.d. N(0, horizon/m_fine) increments for ``d1`` Wiener components.

    Raises:
        ConfigurationError: if ``m_fine`` is not a power of two or the horizon
            is not positive.
    """
    if not is_power_of_two(int(m_fine)) or int(m_fine) != m_fine:
        raise ConfigurationError(f"m_fine must be a power of 2, got {m_fine}")
    if not horizon > 0:
        raise ConfigurationError(f"horizon must be positive, got {horizon}")
    if d1 < 1:
        raise ConfigurationError(f"need at least one Wiener component, got {d1}")
    if seed < 0:
        raise ConfigurationError("seed must be nonnegative")
    scale = np.sqrt(horizon / m_fine)
    rows = [_stream(seed, k).standard_normal(m_fine) * scale for k in range(d1)]
    increments = np.stack(rows)
    increments.flags.writeable = False
    return BrownianLattice(d1, int(m_fine), float(horizon), increments, seed)


def coarsen_increments(increments: np.ndarray, m: int) -> np.ndarray:
    """Aggregate increments along the last axis down to ``m`` steps."""
    increments = np.asarray(increments, dtype=float)
    m_fine = increments.shape[-1]
    if m < 1 or m_fine % m != 0:
        raise ConfigurationError(f"level {m} does not divide {m_fine}")
    if not is_power_of_two(m_fine // m):
        raise ConfigurationError(f"level {m} is not a dyadic coarsening of {m_fine}")
    out = increments
    while out.shape[-1] > m:
        out = out[..., 0::2] + out[..., 1::2]
    return out.copy() if out is increments else out


def coarsen(lat: BrownianLattice, m: int) -> np.ndarray:
    """Increments of ``lat`` over the ``m``-step mesh, shape ``(d1, m)``."""
    return coarsen_increments(lat.increments, m)
