"""Problem instances: coefficient tuples, clamping, q-doubling, and the
Lipschitz inverse used to parametrize the decoupled system.

A `CoefficientSet` carries the six maps (F, G, Hz, LH, g, psi) plus constants.
Conventions for vectorized evaluation (d, d0 are the state dimensions):

- particle-borne args: x, u           shape (M, P, d)
- scenario-borne args: q, z           shape (M, 1, d0)
- conditional-law features            ScenarioFeatures with (M, 1, d) arrays
- outputs: F, G, g -> (M, P, d); Hz -> (M, 1, d0); LH, psi -> (M, 1)

Measure dependence is restricted to the declared empirical moments, which is
exact for the shipped linear-quadratic family and keeps evaluation O(P).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .ensembles import ScenarioFeatures, conditional_features
from .errors import ConfigurationError, EvaluationError, InversionError

__all__ = [
    "ModelConstants",
    "CoefficientSet",
    "PrimedCoefficientSet",
    "LQParams",
    "MonotonicityData",
    "eval_coefficients",
    "clamp_coefficients",
    "split_q",
    "theta_inverse",
    "make_lq_model",
    "make_zero_model",
    "lq_monotonicity_data",
]


@dataclass(frozen=True)
class ModelConstants:
    """Volatilities, discount, dimensions and clamp level of one instance."""

    sigma: float = 0.5
    sigma0: float = 0.5
    discount: float = 0.0  # coefficient of the phi term in the major driver
    d: int = 1
    d0: int = 1
    clamp_m: float = math.inf

    def __post_init__(self):
        problems = []
        if self.sigma < 0:
            problems.append(f"sigma must be >= 0, got {self.sigma}")
        if self.sigma0 < 0:
            problems.append(f"sigma0 must be >= 0, got {self.sigma0}")
        if self.discount < 0:
            problems.append(f"discount must be >= 0, got {self.discount}")
        if not (self.clamp_m > 0):
            problems.append(f"clamp level must be positive, got {self.clamp_m}")
        if problems:
            raise ConfigurationError(problems)


@dataclass(frozen=True)
class CoefficientSet:
    """The coefficient tuple of one major-minor instance.

    `theta`, when provided, is the closed-form inverse of the pair map
    (U, qb) -> (F', DzH') at frozen (X, qf, z); otherwise a damped fixed
    point is used.  `grad_alpha_L` exposes the control-gradient of the minor
    Lagrangian for optimality-residual checks.
    """

    F: Callable
    G: Callable
    Hz: Callable
    LH: Callable
    g: Callable
    psi: Callable
    constants: ModelConstants
    c_coef: float = 1.0
    omega: Callable[[float], float] = lambda m: 0.0
    clamp_m: float = math.inf
    theta: Callable | None = None
    grad_alpha_L: Callable | None = None
    name: str = "custom"


def eval_coefficients(cs: CoefficientSet, x, q, u, z, feats: ScenarioFeatures):
    """Evaluate (F, G, Hz, LH) at one broadcastable point.

    The set's own clamp applies to z before evaluation.  Non-finite inputs or
    outputs raise an evaluation error.
    """
    arrays = {"x": x, "q": q, "u": u, "z": z}
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise EvaluationError(f"non-finite input {name}")
    out = (cs.F(x, q, u, z, feats), cs.G(x, q, u, z, feats), cs.Hz(q, z, feats), cs.LH(q, z, feats))
    for name, arr in zip(("F", "G", "Hz", "LH"), out):
        if not np.all(np.isfinite(arr)):
            raise EvaluationError(f"non-finite output of {name}")
    return out


def clamp_coefficients(cs: CoefficientSet, level: float) -> CoefficientSet:
    """Truncate the z argument of (F, G, Hz, LH) at `level` componentwise.

    Identity for an infinite level; the returned set agrees with the input
    wherever |z| <= level and is globally Lipschitz in z afterwards.
    """
    if not (level > 0):
        raise ConfigurationError([f"clamp level must be positive, got {level}"])
    if math.isinf(level):
        return cs
    F, G, Hz, LH = cs.F, cs.G, cs.Hz, cs.LH

    def clip(z):
        return np.clip(z, -level, level)

    return replace(
        cs,
        F=lambda x, q, u, z, f: F(x, q, u, clip(z), f),
        G=lambda x, q, u, z, f: G(x, q, u, clip(z), f),
        Hz=lambda q, z, f: Hz(q, clip(z), f),
        LH=lambda q, z, f: LH(q, clip(z), f),
        clamp_m=float(level),
        constants=replace(cs.constants, clamp_m=float(level)),
    )


@dataclass(frozen=True)
class PrimedCoefficientSet:
    """Coefficients of the doubled system: the major state argument is the
    midpoint (qf + qb)/2 of its forward and backward copies."""

    base: CoefficientSet

    def Fp(self, x, qf, qb, u, z, feats):
        return self.base.F(x, 0.5 * (qf + qb), u, z, feats)

    def Gp(self, x, qf, qb, u, z, feats):
        return self.base.G(x, 0.5 * (qf + qb), u, z, feats)

    def Hzp(self, qf, qb, z, feats):
        return self.base.Hz(0.5 * (qf + qb), z, feats)

    def LHp(self, qf, qb, z, feats):
        return self.base.LH(0.5 * (qf + qb), z, feats)

    @property
    def g(self):
        return self.base.g

    @property
    def psi(self):
        return self.base.psi

    @property
    def constants(self):
        return self.base.constants


def split_q(cs: CoefficientSet) -> PrimedCoefficientSet:
    """Doubled coefficients; callers clamp first so the pair map stays
    globally Lipschitz."""
    return PrimedCoefficientSet(base=cs)


def theta_inverse(
    primed: PrimedCoefficientSet,
    X: np.ndarray,
    p: np.ndarray,
    z: np.ndarray,
    alpha_x: np.ndarray,
    alpha_q: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 400,
    rho: float = 0.5,
):
    """Invert (U, qb) -> (F', DzH')(X, U, p, qb, z, law(X, U)) at a target.

    Returns (U, qb) with F' = alpha_x and DzH' = alpha_q.  Uses the model's
    closed form when available, otherwise a damped fixed point on the strongly
    monotone map (F', DzH'/2); `rho` is the damping from the strong
    monotonicity / Lipschitz ratio.
    """
    base = primed.base
    if base.theta is not None:
        return base.theta(base, X, p, z, alpha_x, alpha_q)

    U = np.array(alpha_x, copy=True)
    qb = np.array(p, copy=True)
    target_q = 0.5 * alpha_q
    res = math.inf
    for _ in range(max_iter):
        feats = conditional_features(X, U)
        rx = primed.Fp(X, p, qb, U, z, feats) - alpha_x
        rq = 0.5 * primed.Hzp(p, qb, z, feats) - target_q
        res = math.sqrt(float(np.mean(rx * rx)) + float(np.mean(rq * rq)))
        if res <= tol:
            return U, qb
        U -= rho * rx
        qb -= rho * rq
    raise InversionError(f"theta inversion stalled at residual {res:.3e}", residual=res)


# ---------------------------------------------------------------------------
# Linear-quadratic family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LQParams:
    """Scalar linear-quadratic family (d = d0 = 1).

    Minor players: Lagrangian |alpha|^2/2 + state costs, so the optimal drift
    is the costate itself:
        F = u
        G = c1*x + c2*q + c3*(x - mean_x)
        g = g1*x + g2*q
    Major player: Hamiltonian b*q*z + z^2/2 - r1*q^2/2 - r2*q*mean_x:
        Hz = b*q + z
        LH = -z^2/2 - r1*q^2/2 - r2*q*mean_x
        psi = p1*q^2/2 + p2*q*mean_x
    The cone b > 0, c1 + c3 > 0, g1 > 0 (with p1 > 0) is jointly monotone for
    A = a*I with suitable a > 0; the verification module measures it.
    """

    c1: float = 0.0
    c2: float = 0.0
    c3: float = 0.0
    g1: float = 0.0
    g2: float = 0.0
    b: float = 0.0
    r1: float = 0.0
    r2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def perturbed(self, eps: float) -> "LQParams":
        """Every parameter shifted by eps (stability experiments)."""
        return LQParams(**{k: getattr(self, k) + eps for k in self.__dataclass_fields__})


def _make_lq_theta(b: float):
    # theta_F: grad_alpha L = alpha is self-inverse.  theta_H solves
    # b*(p+qb)/2 + clamp(z) = alpha_q; the b = 0 family is degenerate in q
    # and returns the forward copy.
    def theta(base, X, p, z, alpha_x, alpha_q):
        zc = z if math.isinf(base.clamp_m) else np.clip(z, -base.clamp_m, base.clamp_m)
        if b == 0.0:
            qb = np.array(np.broadcast_to(p, np.broadcast_shapes(p.shape, alpha_q.shape)), copy=True)
        else:
            qb = 2.0 * (alpha_q - zc) / b - p
        return np.array(alpha_x, copy=True), qb

    return theta


def make_lq_model(
    params: LQParams, constants: ModelConstants, region_radius: float = 3.0
) -> CoefficientSet:
    """Coefficient set of the linear-quadratic family.

    `region_radius` bounds the state region used for the declared Lipschitz
    constant (quadratic costs are only locally Lipschitz).
    """
    if constants.d != 1 or constants.d0 != 1:
        raise ConfigurationError(["the shipped LQ family is scalar: d = d0 = 1"])
    c1, c2, c3 = params.c1, params.c2, params.c3
    g1, g2, b = params.g1, params.g2, params.b
    r1, r2, p1, p2 = params.r1, params.r2, params.p1, params.p2

    def F(x, q, u, z, f):
        return u + 0.0 * q  # broadcast against the scenario axis

    def G(x, q, u, z, f):
        return c1 * x + c2 * q + c3 * (x - f.mean_x)

    def Hz(q, z, f):
        return b * q + z

    def LH(q, z, f):
        return (
            -0.5 * np.sum(z * z, axis=-1)
            - 0.5 * r1 * np.sum(q * q, axis=-1)
            - r2 * np.sum(q * f.mean_x, axis=-1)
        )

    def g(x, q, f):
        return g1 * x + g2 * q

    def psi(q, f):
        return 0.5 * p1 * np.sum(q * q, axis=-1) + p2 * np.sum(q * f.mean_x, axis=-1)

    R = float(region_radius)
    c_coef = max(
        1.0,
        abs(c1 + c3),
        abs(c2),
        abs(c3),
        abs(b),
        abs(g1),
        abs(g2),
        (abs(r1) + abs(r2)) * R,
        (abs(p1) + abs(p2)) * R,
    )
    cs = CoefficientSet(
        F=F,
        G=G,
        Hz=Hz,
        LH=LH,
        g=g,
        psi=psi,
        constants=constants,
        c_coef=c_coef,
        omega=lambda m: float(m),
        clamp_m=constants.clamp_m,
        theta=_make_lq_theta(b),
        grad_alpha_L=lambda x, q, a, f: a,
        name="lq",
    )
    if math.isfinite(constants.clamp_m):
        cs = clamp_coefficients(cs, constants.clamp_m)
    return cs


def make_zero_model(constants: ModelConstants | None = None) -> CoefficientSet:
    """All coefficients identically zero; theta of a zero target is zero."""
    constants = constants or ModelConstants(sigma=0.0, sigma0=0.0)

    def zero_particle(x, q, u, z, f):
        return np.zeros(np.broadcast_shapes(x.shape, u.shape))

    def zero_scen_vec(q, z, f):
        return np.zeros_like(q)

    def zero_scen(q, z, f):
        return np.zeros(q.shape[:-1])

    def theta(base, X, p, z, ax, aq):
        # The pair map vanishes identically; only the zero target is
        # invertible and it maps to (0, qf).
        return np.array(ax, copy=True), np.array(np.broadcast_to(p, p.shape), copy=True)

    return CoefficientSet(
        F=zero_particle,
        G=zero_particle,
        Hz=zero_scen_vec,
        LH=zero_scen,
        g=lambda x, q, f: np.zeros_like(x),
        psi=lambda q, f: np.zeros(q.shape[:-1]),
        constants=constants,
        c_coef=0.0,
        omega=lambda m: 0.0,
        theta=theta,
        grad_alpha_L=lambda x, q, a, f: a,
        name="zero",
    )


# ---------------------------------------------------------------------------
# Monotonicity data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonotonicityData:
    """Constants of the joint monotonicity inequalities and the growth
    functions feeding the volatility thresholds."""

    A: np.ndarray
    kappa: float
    beta0: float
    C_M: float
    C_H: float
    delta: float
    C_coef: float
    omega: Callable[[float], float] = lambda m: 0.0
    K: Callable[[float], float] = lambda m: 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        object.__setattr__(self, "A", A)
        if not np.allclose(A, A.T):
            raise ConfigurationError(["A must be symmetric"])
        if not (0.0 <= self.delta <= 1.0):
            raise ConfigurationError([f"delta must lie in [0,1], got {self.delta}"])

    @property
    def norm_A(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvalsh(self.A))))

    def validate_monotone(self):
        if self.kappa <= 0 or self.beta0 <= 0:
            raise ConfigurationError(
                [f"monotone mode needs kappa, beta0 > 0, got ({self.kappa}, {self.beta0})"]
            )


def lq_monotonicity_data(
    params: LQParams,
    constants: ModelConstants,
    a_scale: float = 1.0,
    region_radius: float = 3.0,
) -> MonotonicityData:
    """Analytic monotonicity constants of an LQ instance for A = a_scale*I.

    kappa is half the smallest Rayleigh quotient of the joint coefficient
    form (the other half absorbs the z cross terms; see `K`/`C_M` below),
    beta0 comes from completing the square in the terminal inequality on the
    stated region.  C_M and K derive from the declared (C_coef, omega) by a
    Cauchy-Schwarz absorption with equal splitting.
    """
    a = float(a_scale)
    R = float(region_radius)
    cs = make_lq_model(params, constants, region_radius=R)
    # Rayleigh bound of the coefficient form along (|dX|, |dU|, |dq|) after
    # bounding the mean-interaction term by the full x-displacement.
    block = np.array(
        [
            [params.c1 if params.c3 >= 0 else params.c1 + 2 * params.c3, -abs(params.c2) / 2.0],
            [-abs(params.c2) / 2.0, a * params.b],
        ]
    )
    kappa_pair = float(np.min(np.linalg.eigvalsh(block)))
    kappa_eq = min(1.0, kappa_pair)  # the F-block contributes |dU|^2 exactly
    # Terminal inequality: g1|dX|^2 - |g2||dq||dX| + a|dq|^2/2 >= beta0 |dpsi|^2
    # with |dpsi| <= (|p1| + |p2|) R |dq| on the sampling region.
    lip_psi = (abs(params.p1) + abs(params.p2)) * R
    if params.g1 > 0:
        quad = 0.5 * a - params.g2**2 / (4.0 * params.g1)
    else:
        quad = 0.5 * a if params.g2 == 0 else 0.0
    beta0 = max(quad, 0.0) / lip_psi**2 if lip_psi > 0 else max(quad, 0.0)
    C_H = (abs(params.r1) + 2.0 * abs(params.r2)) * R
    c_slack = (2.0 + a) ** 2 / kappa_eq if kappa_eq > 0 else math.inf
    return MonotonicityData(
        A=a * np.eye(constants.d0),
        kappa=0.5 * kappa_eq,
        beta0=beta0,
        C_M=c_slack * cs.c_coef**2 if math.isfinite(c_slack) else 0.0,
        C_H=C_H,
        delta=0.0,
        C_coef=cs.c_coef,
        omega=cs.omega,
        K=(lambda m, _c=c_slack: _c * float(m) ** 2) if math.isfinite(c_slack) else (lambda m: 0.0),
    )
