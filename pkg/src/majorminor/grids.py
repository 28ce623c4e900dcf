"""Time discretization and reproducible sampling of the driving Brownian noises.

Every stochastic quantity in the package is driven by one `NoiseBundle`:
idiosyncratic increments ``dB`` per (scenario, particle, step) and common
increments ``dW0`` per (scenario, step), shared by all particles of a
scenario.  Bundles are regenerated from their seed, never serialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

__all__ = ["TimeGrid", "NoiseBundle", "build_grid", "sample_noise"]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*T/steps on [0, T]."""

    horizon: float
    steps: int
    nodes: np.ndarray

    @property
    def dt(self) -> float:
        return self.horizon / self.steps


def build_grid(horizon: float, steps: int) -> TimeGrid:
    """Uniform time grid with `steps` intervals on [0, horizon]."""
    problems = []
    if not np.isfinite(horizon) or horizon <= 0.0:
        problems.append(f"horizon must be a positive real, got {horizon!r}")
    if steps < 1:
        problems.append(f"steps must be >= 1, got {steps!r}")
    if problems:
        raise ConfigurationError(problems)
    nodes = np.linspace(0.0, horizon, steps + 1)
    return TimeGrid(horizon=float(horizon), steps=int(steps), nodes=nodes)


@dataclass(frozen=True)
class NoiseBundle:
    """Brownian increments for one run.

    dB  : (M_c, P, N_t, d)   idiosyncratic, variance dt per component
    dW0 : (M_c, N_t, d0)     common, shared by every particle of a scenario
    """

    dB: np.ndarray
    dW0: np.ndarray
    seed: int

    @property
    def n_scenarios(self) -> int:
        return self.dB.shape[0]

    @property
    def n_particles(self) -> int:
        return self.dB.shape[1]


# Stream tags keep the idiosyncratic and common draws on disjoint Philox keys.
_STREAM_IDIO = 0
_STREAM_COMMON = 1


def _scenario_generator(seed: int, scenario: int, stream: int) -> np.random.Generator:
    # Counter-based Philox keyed by (seed, stream, scenario): each scenario's
    # block is independent of generation order, so parallel sampling across
    # scenarios is bit-identical to sequential sampling.
    key = np.array([np.uint64(seed), np.uint64((stream << 32) | scenario)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_noise(
    grid: TimeGrid,
    n_scenarios: int,
    n_particles: int,
    d: int = 1,
    d0: int = 1,
    seed: int = 0,
    antithetic: bool = False,
) -> NoiseBundle:
    """Sample Gaussian increments with variance dt for every driver.

    The map seed -> bundle is pure; identical seeds give bit-identical
    bundles.  With `antithetic` the second half of each scenario's particles
    mirrors the first half, and odd scenarios mirror even ones.
    """
    if n_scenarios < 1 or n_particles < 1:
        raise ConfigurationError(
            [f"n_scenarios and n_particles must be >= 1, got ({n_scenarios}, {n_particles})"]
        )
    if antithetic and (n_particles % 2 or n_scenarios % 2):
        raise ConfigurationError(["antithetic sampling needs even particle and scenario counts"])

    n_steps = grid.steps
    scale = np.sqrt(grid.dt)
    dB = np.empty((n_scenarios, n_particles, n_steps, d))
    dW0 = np.empty((n_scenarios, n_steps, d0))
    half_p = n_particles // 2
    for j in range(n_scenarios):
        if antithetic and j % 2:
            dW0[j] = -dW0[j - 1]
        else:
            gen0 = _scenario_generator(seed, j, _STREAM_COMMON)
            dW0[j] = scale * gen0.standard_normal((n_steps, d0))
        gen = _scenario_generator(seed, j, _STREAM_IDIO)
        if antithetic:
            block = scale * gen.standard_normal((half_p, n_steps, d))
            dB[j, :half_p] = block
            dB[j, half_p:] = -block
        else:
            dB[j] = scale * gen.standard_normal((n_particles, n_steps, d))
    dB.setflags(write=False)
    dW0.setflags(write=False)
    return NoiseBundle(dB=dB, dW0=dW0, seed=int(seed))
