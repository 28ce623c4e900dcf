"""Independent baselines: a Riccati field for the linear-quadratic family and
a Picard fixed-point iteration on the coupled system.

The affine ansatz
    U(t, x, q, mbar)  = a(t) x + b_u(t) q + c_u(t) mbar
    phi(t, q, mbar)   = k2(t) q^2/2 + k12(t) q mbar + kc(t) mbar^2/2 + k0(t)
substituted into the coupled dynamics (with mbar the within-scenario mean of
X) closes into seven scalar ODEs, integrated here with classical Runge-Kutta
on a refined grid - a different integrator family than the Euler/regression
solver on purpose, so shared bugs cannot cancel.  Before use as ground truth
the field is cross-validated against a fine-grid Picard solve at short
horizon (see the test suite).

Z-convention: the backward major equation is written with sqrt(2 sigma0)
outside the stochastic integral; we store its integrand, which equals the
q-gradient of the major value field.  `eval_oracle_field` returns exactly
that gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ensembles import ControlField, conditional_features, norm_T
from .errors import OracleBlowUpError, SimulationError
from .grids import NoiseBundle, TimeGrid, build_grid
from .models import CoefficientSet, LQParams, ModelConstants, PrimedCoefficientSet
from .solver import InitialCondition, RegressionBasis, SolveOutput, decoupled_solve

__all__ = [
    "RiccatiSolution",
    "riccati_oracle",
    "eval_oracle_field",
    "oracle_induced_control",
    "PicardResult",
    "picard_solve",
]

_BLOW_UP_LIMIT = 1e8


@dataclass(frozen=True)
class RiccatiSolution:
    """Backward-integrated coefficient functions of the affine/quadratic
    decoupling field, tabulated on a refined copy of the run grid."""

    times: np.ndarray
    a: np.ndarray
    b_u: np.ndarray
    c_u: np.ndarray
    k2: np.ndarray
    k12: np.ndarray
    kc: np.ndarray
    k0: np.ndarray
    params: LQParams
    constants: ModelConstants
    stats: dict = field(default_factory=dict)

    def coefficients_at(self, t):
        t = np.asarray(t, dtype=float)
        return tuple(
            np.interp(t, self.times, table)
            for table in (self.a, self.b_u, self.c_u, self.k2, self.k12, self.kc, self.k0)
        )


def _riccati_rhs(y: np.ndarray, p: LQParams, lam: float, sigma0: float) -> np.ndarray:
    a, b_u, c_u, k2, k12, kc, k0 = y
    return np.array(
        [
            a * a - (p.c1 + p.c3),
            b_u * (a + p.b + k2 + c_u) - p.c2,
            c_u * (2.0 * a + c_u) + b_u * k12 + p.c3,
            2.0 * k2 * (p.b + k2) + 2.0 * k12 * b_u - lam * k2 + k2 * k2 + p.r1,
            k12 * (p.b + 3.0 * k2 + a + c_u - lam) + kc * b_u + p.r2,
            2.0 * kc * (a + c_u) - lam * kc + 3.0 * k12 * k12,
            -lam * k0 - sigma0 * k2,
        ]
    )


def riccati_oracle(
    params: LQParams, constants: ModelConstants, grid: TimeGrid, refine: int = 10
) -> RiccatiSolution:
    """Integrate the coefficient ODEs backward from the terminal data.

    Classical 4th-order Runge-Kutta on the run grid refined `refine`-fold.
    Coefficients leaving the finite range raise a blow-up report carrying the
    forward time at which it happened.
    """
    n = grid.steps * refine
    times = np.linspace(0.0, grid.horizon, n + 1)
    h = grid.horizon / n
    lam = constants.discount
    tables = np.empty((7, n + 1))
    y = np.array([params.g1, params.g2, 0.0, params.p1, params.p2, 0.0, 0.0])
    tables[:, n] = y
    for i in range(n, 0, -1):
        k1 = _riccati_rhs(y, params, lam, constants.sigma0)
        k2 = _riccati_rhs(y - 0.5 * h * k1, params, lam, constants.sigma0)
        k3 = _riccati_rhs(y - 0.5 * h * k2, params, lam, constants.sigma0)
        k4 = _riccati_rhs(y - h * k3, params, lam, constants.sigma0)
        y = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > _BLOW_UP_LIMIT:
            raise OracleBlowUpError(times[i - 1])
        tables[:, i - 1] = y
    return RiccatiSolution(
        times=times,
        a=tables[0],
        b_u=tables[1],
        c_u=tables[2],
        k2=tables[3],
        k12=tables[4],
        kc=tables[5],
        k0=tables[6],
        params=params,
        constants=constants,
        stats={"refine": refine, "ode_steps": n, "max_abs_coeff": float(np.max(np.abs(tables)))},
    )


def eval_oracle_field(sol: RiccatiSolution, t, x, q, mbar):
    """Field values (U, phi, Zphi) at (t, x, q, mbar); Zphi is the stored
    integrand convention, i.e. the q-gradient of phi."""
    a, b_u, c_u, k2, k12, kc, k0 = sol.coefficients_at(t)
    x = np.asarray(x, dtype=float)
    q = np.asarray(q, dtype=float)
    mbar = np.asarray(mbar, dtype=float)
    u = a * x + b_u * q + c_u * mbar
    phi = 0.5 * k2 * q * q + k12 * q * mbar + 0.5 * kc * mbar * mbar + k0
    zphi = k2 * q + k12 * mbar
    return u, phi, zphi


def oracle_induced_control(
    sol: RiccatiSolution,
    cs: CoefficientSet,
    grid: TimeGrid,
    noise: NoiseBundle,
    init: InitialCondition,
) -> tuple[ControlField, dict]:
    """Simulate the coupled dynamics closed by the oracle field and read off
    the induced control (F, DzH) along the trajectory.

    Returns the control and the induced paths (X, q, U, Zphi) for reuse as a
    reference in convergence studies.
    """
    m, p, _ = init.X0.shape
    n = grid.steps
    d = init.X0.shape[2]
    d0 = init.q0.shape[1]
    dt = grid.dt
    sx = math.sqrt(2.0 * cs.constants.sigma)
    sq = math.sqrt(2.0 * cs.constants.sigma0)

    X = np.empty((m, p, n + 1, d))
    qpath = np.empty((m, n + 1, d0))
    U = np.empty((m, p, n + 1, d))
    Zphi = np.empty((m, n, d0))
    alpha_x = np.empty((m, p, n, d))
    alpha_q = np.empty((m, n, d0))
    X[:, :, 0] = init.X0
    qpath[:, 0] = init.q0
    for k in range(n + 1):
        t = grid.nodes[k]
        xk = X[:, :, k]
        qk = qpath[:, k][:, None, :]
        mbar = xk.mean(axis=1, keepdims=True)
        u_k, _, z_k = eval_oracle_field(sol, t, xk, qk, mbar)
        U[:, :, k] = u_k
        if k == n:
            break
        Zphi[:, k] = z_k[:, 0]
        feats = conditional_features(xk, u_k)
        alpha_x[:, :, k] = cs.F(xk, qk, u_k, z_k, feats)
        alpha_q[:, k] = cs.Hz(qk, z_k, feats)[:, 0]
        X[:, :, k + 1] = xk - alpha_x[:, :, k] * dt + sx * noise.dB[:, :, k]
        qpath[:, k + 1] = qpath[:, k] - alpha_q[:, k] * dt + sq * noise.dW0[:, k]
    control = ControlField(alpha_x, alpha_q)
    paths = {"X": X, "q": qpath, "U": U, "Zphi": Zphi}
    return control, paths


@dataclass
class PicardResult:
    """Outcome of the fixed-point sweep: converged, diverged-as-diagnosed, or
    stopped at the sweep cap."""

    converged: bool
    diverged: bool
    sweeps: int
    distances: list[float]
    control: ControlField
    solve: SolveOutput | None
    reason: str = ""

    @property
    def divergence_report(self) -> dict | None:
        if not self.diverged:
            return None
        return {"sweeps": self.sweeps, "distances": self.distances, "reason": self.reason}


def picard_solve(
    primed: PrimedCoefficientSet,
    grid: TimeGrid,
    noise: NoiseBundle,
    init: InitialCondition,
    basis: RegressionBasis,
    tol: float = 1e-6,
    max_iter: int = 40,
    compute_z: bool = False,
) -> PicardResult:
    """Freeze the coupling from the previous sweep and re-solve.

    The control of sweep n+1 is the coefficient pair (F, DzH) evaluated along
    sweep n's decoupled solution (states, midpoint major state, Zphi and the
    conditional law).  Stops when the successive-sweep distance in the control
    norm drops below `tol`; reports divergence when the distance grows over
    three consecutive sweeps.
    """
    cs = primed.base
    m, p, _ = init.X0.shape
    n = grid.steps
    control = ControlField.zeros(m, p, n, init.X0.shape[2], init.q0.shape[1])
    distances: list[float] = []
    solve = None
    for sweep in range(1, max_iter + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                solve = decoupled_solve(control, primed, noise, init, basis, grid, compute_z=compute_z)
        except SimulationError:
            # iterates left the finite range: no contraction at this horizon
            return PicardResult(
                False, True, sweep, distances, control, solve,
                reason="sweep produced non-finite values (no contraction)",
            )
        st = solve.state
        alpha_x = np.empty_like(control.alpha_x)
        alpha_q = np.empty_like(control.alpha_q)
        for k in range(n):
            xk = st.X[:, :, k]
            uk = st.U[:, :, k]
            qmid = 0.5 * (st.qf[:, k] + st.qb[:, k])[:, None, :]
            zk = st.Zphi[:, k][:, None, :]
            feats = conditional_features(xk, uk)
            alpha_x[:, :, k] = cs.F(xk, qmid, uk, zk, feats)
            alpha_q[:, k] = cs.Hz(qmid, zk, feats)[:, 0]
        new_control = ControlField(alpha_x, alpha_q)
        dist = norm_T(new_control - control, grid)
        distances.append(dist)
        control = new_control
        if dist <= tol:
            return PicardResult(True, False, sweep, distances, control, solve)
        if len(distances) >= 3 and distances[-1] > distances[-2] > distances[-3]:
            return PicardResult(
                False, True, sweep, distances, control, solve,
                reason="successive-sweep distance increased over 3 sweeps",
            )
    return PicardResult(False, False, max_iter, distances, control, solve)
