"""Particle clouds, adapted controls, and the Hilbert geometry on them.

Conditional laws given the common filtration are represented by the particle
cloud of a scenario; conditional expectations are within-scenario averages.
The inner product <a,b>^T = E \\int_0^T a_t b_t dt is discretized with equal
particle weights and left-endpoint time sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .grids import TimeGrid

__all__ = [
    "ControlField",
    "EnsembleState",
    "ScenarioFeatures",
    "conditional_features",
    "inner_product_T",
    "norm_T",
    "wasserstein2_1d",
]


@dataclass
class ControlField:
    """Discretized element of the control space: minor controls per
    (scenario, particle, step), major control per (scenario, step)."""

    alpha_x: np.ndarray  # (M_c, P, N_t, d)
    alpha_q: np.ndarray  # (M_c, N_t, d0)

    def __post_init__(self):
        if self.alpha_x.ndim != 4 or self.alpha_q.ndim != 3:
            raise ContractError(
                f"control shapes must be (M,P,N,d) and (M,N,d0), got "
                f"{self.alpha_x.shape} and {self.alpha_q.shape}"
            )
        if self.alpha_x.shape[0] != self.alpha_q.shape[0] or self.alpha_x.shape[2] != self.alpha_q.shape[1]:
            raise ContractError("scenario/step axes of alpha_x and alpha_q disagree")

    # Vector-space operations used by the iteration kernels.
    def __add__(self, other: "ControlField") -> "ControlField":
        return ControlField(self.alpha_x + other.alpha_x, self.alpha_q + other.alpha_q)

    def __sub__(self, other: "ControlField") -> "ControlField":
        return ControlField(self.alpha_x - other.alpha_x, self.alpha_q - other.alpha_q)

    def __mul__(self, s: float) -> "ControlField":
        return ControlField(s * self.alpha_x, s * self.alpha_q)

    __rmul__ = __mul__

    def copy(self) -> "ControlField":
        return ControlField(self.alpha_x.copy(), self.alpha_q.copy())

    @staticmethod
    def zeros(n_scenarios: int, n_particles: int, n_steps: int, d: int = 1, d0: int = 1) -> "ControlField":
        return ControlField(
            np.zeros((n_scenarios, n_particles, n_steps, d)),
            np.zeros((n_scenarios, n_steps, d0)),
        )


@dataclass
class EnsembleState:
    """Time-indexed particle clouds and per-scenario paths of one solve.

    Scenario-level quantities (qf, qb, phi, Zphi, Zq) carry no particle axis;
    they are adapted to the common filtration by construction.
    """

    X: np.ndarray  # (M_c, P, N_t+1, d)
    U: np.ndarray  # (M_c, P, N_t+1, d)
    qf: np.ndarray  # (M_c, N_t+1, d0)
    qb: np.ndarray  # (M_c, N_t+1, d0)
    phi: np.ndarray  # (M_c, N_t+1)
    Zphi: np.ndarray  # (M_c, N_t, d0)
    Zq: np.ndarray  # (M_c, N_t, d0, d0)
    Z: np.ndarray | None = None  # (M_c, P, N_t, d, d+d0)

    def finite(self) -> bool:
        parts = [self.X, self.U, self.qf, self.qb, self.phi, self.Zphi, self.Zq]
        if self.Z is not None:
            parts.append(self.Z)
        return all(np.all(np.isfinite(p)) for p in parts)


@dataclass
class ScenarioFeatures:
    """Conditional empirical moments of (X, U) within each scenario.

    Arrays are shaped (M_c, 1, d) so they broadcast against particle clouds.
    """

    mean_x: np.ndarray
    mean_u: np.ndarray
    m2_x: np.ndarray
    m2_u: np.ndarray
    cross_xu: np.ndarray
    n_particles: int = field(default=0)


def conditional_features(x: np.ndarray, u: np.ndarray | None = None) -> ScenarioFeatures:
    """Within-scenario particle averages at one time slice.

    x, u: (M_c, P, d).  When u is omitted the U-moments are zero.
    """
    if x.ndim != 3:
        raise ContractError(f"expected (M,P,d) slice, got shape {x.shape}")
    if x.shape[1] == 0:
        raise ConfigurationError(["conditional features need at least one particle"])
    if u is None:
        u = np.zeros_like(x)
    mean_x = x.mean(axis=1, keepdims=True)
    mean_u = u.mean(axis=1, keepdims=True)
    return ScenarioFeatures(
        mean_x=mean_x,
        mean_u=mean_u,
        m2_x=(x * x).mean(axis=1, keepdims=True),
        m2_u=(u * u).mean(axis=1, keepdims=True),
        cross_xu=(x * u).mean(axis=1, keepdims=True),
        n_particles=x.shape[1],
    )


def features_at(state: EnsembleState, t_index: int) -> ScenarioFeatures:
    """Conditional features of (X, U) at a grid node."""
    return conditional_features(state.X[:, :, t_index, :], state.U[:, :, t_index, :])


def inner_product_T(a: ControlField, b: ControlField, grid: TimeGrid) -> float:
    """Discretized E \\int_0^T a.b dt on the product control space.

    Particle-borne components average over scenarios x particles, the
    scenario-borne component over scenarios only, so a scenario-level path
    contributes the same whether or not it is broadcast to particles.
    """
    if a.alpha_x.shape != b.alpha_x.shape or a.alpha_q.shape != b.alpha_q.shape:
        raise ContractError(
            f"mismatched control shapes {a.alpha_x.shape}/{b.alpha_x.shape}, "
            f"{a.alpha_q.shape}/{b.alpha_q.shape}"
        )
    if a.alpha_x.shape[2] != grid.steps:
        raise ContractError("control step axis does not match the grid")
    part = np.einsum("mpkd,mpkd->", a.alpha_x, b.alpha_x) / (a.alpha_x.shape[0] * a.alpha_x.shape[1])
    scen = np.einsum("mkd,mkd->", a.alpha_q, b.alpha_q) / a.alpha_q.shape[0]
    return float(grid.dt * (part + scen))


def norm_T(a: ControlField, grid: TimeGrid) -> float:
    return float(np.sqrt(max(inner_product_T(a, a, grid), 0.0)))


def path_sq_norm(arr: np.ndarray, dt: float, particle_borne: bool) -> float:
    """Squared ||.||_T of a path array over its first `steps` axis entries.

    arr: (M_c, P, N, ...) when particle_borne else (M_c, N, ...).
    """
    total = float(np.sum(arr * arr))
    denom = arr.shape[0] * (arr.shape[1] if particle_borne else 1)
    return dt * total / denom


def wasserstein2_1d(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """Order-2 Wasserstein distance between two 1-d empirical measures.

    Sorted-quantile coupling: sqrt(mean of squared sorted differences); unequal
    sizes are resampled to a common size at midpoint quantile levels.
    """
    a = np.asarray(sample_a, dtype=float).ravel()
    b = np.asarray(sample_b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ContractError("wasserstein2_1d needs nonempty samples")
    if a.size != b.size:
        n = max(a.size, b.size)
        levels = (np.arange(n) + 0.5) / n
        a = np.quantile(a, levels)
        b = np.quantile(b, levels)
    else:
        a = np.sort(a)
        b = np.sort(b)
    return float(np.sqrt(np.mean((a - b) ** 2)))
