"""Numerical certification of the structural inequalities behind the solver.

Every check is a pure function of its inputs and a seed, samples random
Gaussian-mixture particle clouds (the documented generator below), reports
the worst margin together with its Monte Carlo standard error, and carries a
replayable witness when it fails.  Pass thresholds are stated as
margin >= -3 * SE so sampling noise cannot flip an analytically true
inequality into a failure except with probability ~0.3%.  A pass is
statistical evidence on the sampled region, not a proof.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ensembles import conditional_features
from .errors import ConfigurationError
from .grids import TimeGrid
from .models import CoefficientSet, MonotonicityData
from .solver import SolveOutput

__all__ = [
    "CertificationReport",
    "sample_cloud",
    "check_terminal_monotonicity",
    "check_coefficient_monotonicity",
    "check_v_monotonicity",
    "check_z_bound",
    "check_monotonicity_propagation",
    "compute_thresholds",
    "ThresholdReport",
    "check_pontryagin_residual",
    "search_scalar_A",
]


@dataclass
class CertificationReport:
    """One check's outcome: worst margin, its standard error, and a witness
    for replay when the check failed."""

    name: str
    passed: bool
    margin: float
    se: float
    samples: int
    seed: int
    witness: dict | None = None
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        def default(o):
            if isinstance(o, np.ndarray):
                return o.tolist()
            if isinstance(o, (np.floating, np.integer)):
                return o.item()
            raise TypeError(type(o))

        return json.dumps(self.__dict__, indent=2, default=default)


def sample_cloud(rng: np.random.Generator, n_particles: int, d: int, spread: float = 1.5) -> np.ndarray:
    """Two-component Gaussian mixture with random centers and scales; the
    documented sampling distribution of the hypothesis checks."""
    centers = rng.uniform(-spread, spread, (2, d))
    scales = rng.uniform(0.3, 1.0, (2, 1))
    comp = rng.integers(0, 2, n_particles)
    return centers[comp] + scales[comp] * rng.standard_normal((n_particles, d))


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def check_terminal_monotonicity(
    cs: CoefficientSet,
    A: np.ndarray,
    beta0: float,
    samples: int = 200,
    n_particles: int = 256,
    seed: int = 0,
    q_spread: float = 1.5,
) -> CertificationReport:
    """Joint monotonicity of the terminal pair (g, psi).

    Checks <g(X,q,L(X)) - g(Y,q',L(Y)), X - Y> + (q-q').A(q-q')/2
    >= beta0 |psi(q,L(X)) - psi(q',L(Y))|^2 on sampled cloud pairs.
    """
    A = np.atleast_2d(A)
    d, d0 = cs.constants.d, cs.constants.d0
    worst = math.inf
    worst_se = 0.0
    witness = None
    for i in range(samples):
        rng = _sample_rng(seed, i)
        X = sample_cloud(rng, n_particles, d)[None]
        Y = sample_cloud(rng, n_particles, d)[None]
        q = rng.normal(0.0, q_spread, (1, 1, d0))
        qp = rng.normal(0.0, q_spread, (1, 1, d0))
        fx = conditional_features(X)
        fy = conditional_features(Y)
        pair = np.sum((cs.g(X, q, fx) - cs.g(Y, qp, fy)) * (X - Y), axis=-1)[0]
        dq = (q - qp)[0, 0]
        quad = 0.5 * float(dq @ A @ dq)
        dpsi = float(cs.psi(q, fx)[0, 0] - cs.psi(qp, fy)[0, 0])
        margin = float(pair.mean()) + quad - beta0 * dpsi * dpsi
        se = float(pair.std(ddof=1) / math.sqrt(n_particles))
        if margin < worst:
            worst, worst_se = margin, se
            witness = {"sample": i, "q": q.ravel().tolist(), "q_prime": qp.ravel().tolist(), "margin": margin}
    passed = worst >= -3.0 * worst_se
    return CertificationReport(
        name="terminal_monotonicity",
        passed=bool(passed),
        margin=worst,
        se=worst_se,
        samples=samples,
        seed=seed,
        witness=None if passed else witness,
    )


def check_coefficient_monotonicity(
    cs: CoefficientSet,
    A: np.ndarray,
    samples: int = 200,
    n_particles: int = 256,
    seed: int = 0,
    z_pairs: bool = False,
    kappa: float | None = None,
    slack: tuple[float, "callable"] | None = None,
    q_spread: float = 1.5,
    z_spread: float = 1.5,
) -> CertificationReport:
    """Joint monotonicity of the coefficient triple (G, F, A DzH).

    With z_pairs=False this estimates kappa_hat, the smallest Rayleigh
    quotient of the shared-z form; pass means kappa_hat >= -3 SE.  With
    z_pairs=True the slack inequality with (C_M + K(|z| ^ |z'|)) |z - z'|^2
    against kappa |dX|^2 is verified instead (`slack` = (C_M, K), `kappa`
    required).
    """
    A = np.atleast_2d(A)
    d, d0 = cs.constants.d, cs.constants.d0
    worst = math.inf
    worst_se = 0.0
    witness = None
    used = 0
    for i in range(samples):
        rng = _sample_rng(seed, 1_000_000 + i)
        X = sample_cloud(rng, n_particles, d)[None]
        Y = sample_cloud(rng, n_particles, d)[None]
        U = sample_cloud(rng, n_particles, d)[None]
        V = sample_cloud(rng, n_particles, d)[None]
        q = rng.normal(0.0, q_spread, (1, 1, d0))
        qp = rng.normal(0.0, q_spread, (1, 1, d0))
        z = rng.normal(0.0, z_spread, (1, 1, d0))
        zp = rng.normal(0.0, z_spread, (1, 1, d0)) if z_pairs else z
        fxu = conditional_features(X, U)
        fyv = conditional_features(Y, V)
        dg = np.sum((cs.G(X, q, U, z, fxu) - cs.G(Y, qp, V, zp, fyv)) * (X - Y), axis=-1)[0]
        df = np.sum((cs.F(X, q, U, z, fxu) - cs.F(Y, qp, V, zp, fyv)) * (U - V), axis=-1)[0]
        dhz = (cs.Hz(q, z, fxu) - cs.Hz(qp, zp, fyv))[0, 0]
        dq = (q - qp)[0, 0]
        lhs = float(dg.mean()) + float(df.mean()) + float((A @ dhz) @ dq)
        den = float(np.mean(np.sum((X - Y) ** 2, -1)) + np.mean(np.sum((U - V) ** 2, -1)) + dq @ dq)
        if den < 1e-12:
            continue  # degenerate pair policy
        used += 1
        se_lhs = float((dg + df).std(ddof=1) / math.sqrt(n_particles))
        if z_pairs:
            c_m, K = slack if slack is not None else (0.0, lambda m: 0.0)
            zmin = min(float(np.linalg.norm(z)), float(np.linalg.norm(zp)))
            dz2 = float(np.sum((z - zp) ** 2))
            margin = lhs + (c_m + K(zmin)) * dz2 - (kappa or 0.0) * den
            se = se_lhs
        else:
            margin = lhs / den
            se = se_lhs / den
        if margin < worst:
            worst, worst_se = margin, se
            witness = {
                "sample": i,
                "q": q.ravel().tolist(),
                "q_prime": qp.ravel().tolist(),
                "z": z.ravel().tolist(),
                "margin": margin,
            }
    passed = worst >= -3.0 * worst_se
    name = "coefficient_monotonicity_zpair" if z_pairs else "coefficient_monotonicity"
    return CertificationReport(
        name=name,
        passed=bool(passed),
        margin=worst,
        se=worst_se,
        samples=used,
        seed=seed,
        witness=None if passed else witness,
        extras={"kappa_hat": worst} if not z_pairs else {},
    )


def _probe_control(op, rng, scale: float):
    """Random control with a persistent (constant-in-time) component.

    White-in-time probes hardly couple through the dynamics (their time
    integrals cancel), so violations of monotonicity would stay invisible;
    the constant part excites the compositional structure.
    """
    rough = op.random_control(rng, 0.4 * scale)
    m, p, n, d = rough.alpha_x.shape
    d0 = rough.alpha_q.shape[2]
    const_x = scale * rng.standard_normal((m, p, 1, d))
    const_q = scale * rng.standard_normal((m, 1, d0))
    from .ensembles import ControlField

    return ControlField(
        rough.alpha_x + np.broadcast_to(const_x, rough.alpha_x.shape).copy(),
        rough.alpha_q + np.broadcast_to(const_q, rough.alpha_q.shape).copy(),
    )


def check_v_monotonicity(
    op,
    pairs: int = 20,
    seed: int = 0,
    scale: float = 0.7,
) -> CertificationReport:
    """Monotonicity of the control-space operator on random control pairs.

    Reports the minimum inner product <v(a)-v(b), a-b>_T and the minimum
    Rayleigh quotient eta_hat over the sampled pairs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    dt = op.grid.dt
    worst_ip = math.inf
    worst_se = 0.0
    eta_hat = math.inf
    witness = None
    for i in range(pairs):
        a = _probe_control(op, rng, scale)
        b = _probe_control(op, rng, scale)
        va = op(a)
        vb = op(b)
        diff = a - b
        dv = va - vb
        denom = op.inner(diff, diff)
        if denom < 1e-12:
            continue
        per_scen = dt * (
            (dv.alpha_x * diff.alpha_x).mean(axis=1).sum(axis=(1, 2))
            + (dv.alpha_q * diff.alpha_q).sum(axis=(1, 2))
        )
        ip = float(per_scen.mean())
        se = float(per_scen.std(ddof=1) / math.sqrt(per_scen.size))
        eta_hat = min(eta_hat, ip / denom)
        if ip < worst_ip:
            worst_ip, worst_se = ip, se
            witness = {"pair": i, "inner_product": ip, "denominator": denom}
    passed = worst_ip >= -3.0 * worst_se
    return CertificationReport(
        name="v_monotonicity",
        passed=bool(passed),
        margin=worst_ip,
        se=worst_se,
        samples=pairs,
        seed=seed,
        witness=None if passed else witness,
        extras={"eta_hat": eta_hat},
    )


def check_z_bound(
    solve: SolveOutput,
    lip_q_phi: float,
    tol_rel: float = 0.05,
    reg_se: float | None = None,
) -> CertificationReport:
    """|Zphi| bounded by the Lipschitz constant of the major value field.

    Under the stored-integrand convention the bound is
    max |Zphi| <= lip_q_phi * (1 + tol_rel) + 3 * regression SE.
    """
    max_z = float(np.max(np.abs(solve.state.Zphi))) if solve.state.Zphi.size else 0.0
    se = float(reg_se) if reg_se is not None else float(np.max(solve.diagnostics.get("se_zphi", [0.0])))
    bound = lip_q_phi * (1.0 + tol_rel) + 3.0 * se
    margin = bound - max_z
    return CertificationReport(
        name="z_bound",
        passed=bool(margin >= 0.0),
        margin=margin,
        se=se,
        samples=int(solve.state.Zphi.size),
        seed=0,
        witness=None if margin >= 0 else {"max_abs_zphi": max_z, "bound": bound},
        extras={"max_abs_zphi": max_z, "lip_q_phi": lip_q_phi},
    )


def check_monotonicity_propagation(
    solve1: SolveOutput,
    solve2: SolveOutput,
    A: np.ndarray,
    beta_schedule,
    grid: TimeGrid,
) -> CertificationReport:
    """Propagated quantity along two coupled solves from distinct starts.

    V_s = <U1-U2, X1-X2> + (q1-q2).A(q1-q2)/2 - beta(T-s) |phi1-phi2|^2
    must satisfy E[V_s] >= 0 up to Monte Carlo error at every grid node.
    """
    A = np.atleast_2d(A)
    s1, s2 = solve1.state, solve2.state
    n = grid.steps
    ev = np.zeros(n + 1)
    se = np.zeros(n + 1)
    for k in range(n + 1):
        du_dx = np.sum((s1.U[:, :, k] - s2.U[:, :, k]) * (s1.X[:, :, k] - s2.X[:, :, k]), axis=-1)
        pair = du_dx.mean(axis=1)
        dq = s1.qf[:, k] - s2.qf[:, k]
        quad = 0.5 * np.einsum("mi,ij,mj->m", dq, A, dq)
        dphi = s1.phi[:, k] - s2.phi[:, k]
        beta = float(beta_schedule(grid.horizon - grid.nodes[k]))
        v = pair + quad - beta * dphi * dphi
        ev[k] = v.mean()
        se[k] = v.std(ddof=1) / math.sqrt(v.size)
    margins = ev + 3.0 * se
    worst = int(np.argmin(margins))
    passed = bool(margins[worst] >= 0.0)
    return CertificationReport(
        name="monotonicity_propagation",
        passed=passed,
        margin=float(ev[worst]),
        se=float(se[worst]),
        samples=s1.X.shape[0],
        seed=0,
        witness=None if passed else {"node": worst, "time": float(grid.nodes[worst])},
        extras={"ev": ev, "se": se},
    )


@dataclass
class ThresholdReport:
    """Arithmetic evaluation of the volatility thresholds."""

    gamma_star: float
    beta0: float
    decay_rate: float  # 2*lambda - gamma_star, exponent of beta*(t)
    beta_star_T: float
    sigma0_T: float
    sigma0_star: float | None
    branch: str

    def beta_star(self, t: float) -> float:
        return self.beta0 * math.exp(self.decay_rate * t)


def compute_thresholds(data: MonotonicityData, lam: float, horizon: float) -> ThresholdReport:
    """Volatility thresholds from the monotonicity constants.

    gamma* = (2/kappa) C_H^2 (|A| + beta0); beta*(t) = beta0 e^{(2 lam - gamma*) t};
    sigma0_T = omega^2(m_T)/(4 gamma*) + (C_M + K(m_T))/beta*(T) with
    m_T = sqrt(|A|/beta*(T)).  The horizon-free threshold exists on two
    branches: lam >= gamma*/2, or lam > 0 with delta < 1 (the smallness
    condition solved by bisection); otherwise it is reported as not
    computable.
    """
    data.validate_monotone()
    norm_A = data.norm_A
    gamma_star = (2.0 / data.kappa) * data.C_H**2 * (norm_A + data.beta0)
    decay = 2.0 * lam - gamma_star
    beta_T = data.beta0 * math.exp(decay * horizon)

    def sigma0_at(beta: float, first_factor: float) -> float:
        m = math.sqrt(norm_A / beta) if beta > 0 else math.inf
        w = data.omega(m)
        first = 0.0 if w == 0.0 else (math.inf if first_factor == 0.0 else w**2 / first_factor)
        return first + (data.C_M + data.K(m)) / beta

    sigma0_T = sigma0_at(beta_T, 4.0 * gamma_star)

    sigma0_star = None
    branch = "not computable by the horizon-free theorem"
    if lam > 0 and lam >= gamma_star / 2.0:
        sigma0_star = sigma0_at(data.beta0, 2.0 * lam)
        branch = "strong discount (lam >= gamma*/2)"
    elif lam > 0 and data.delta < 1.0:
        # largest beta with beta C_H^2 (1 + (|A|/beta)^delta) / (4 lam) <= kappa/2
        def small_enough(beta: float) -> bool:
            m = math.sqrt(norm_A / beta)
            return beta * data.C_H**2 * (1.0 + m ** (2.0 * data.delta)) / (4.0 * lam) <= data.kappa / 2.0

        hi = data.beta0
        if small_enough(hi):
            beta_kappa = hi
        else:
            lo = 1e-12
            if not small_enough(lo):
                beta_kappa = lo
            else:
                for _ in range(200):
                    mid = 0.5 * (lo + hi)
                    if small_enough(mid):
                        lo = mid
                    else:
                        hi = mid
                beta_kappa = lo
        beta_star = min(beta_kappa, data.beta0)
        sigma0_star = sigma0_at(beta_star, 2.0 * lam)
        branch = "sublinear growth (lam > 0, delta < 1)"

    return ThresholdReport(
        gamma_star=gamma_star,
        beta0=data.beta0,
        decay_rate=decay,
        beta_star_T=beta_T,
        sigma0_T=sigma0_T,
        sigma0_star=sigma0_star,
        branch=branch,
    )


def check_pontryagin_residual(
    solve: SolveOutput,
    cs: CoefficientSet,
    grid: TimeGrid,
    tol_disc: float,
) -> CertificationReport:
    """Costate-versus-control-gradient residual along a solve.

    ||U - grad_alpha L(X, q, theta_F, law)||_T vanishes at the optimum; the
    check compares against the supplied discretization floor.
    """
    if cs.grad_alpha_L is None:
        raise ConfigurationError(["model does not expose grad_alpha_L"])
    st = solve.state
    n = grid.steps
    total = 0.0
    for k in range(n):
        feats = conditional_features(st.X[:, :, k], solve.theta_F[:, :, k])
        grad = cs.grad_alpha_L(st.X[:, :, k], st.qf[:, k][:, None, :], solve.theta_F[:, :, k], feats)
        diff = st.U[:, :, k] - grad
        total += float(np.mean(np.sum(diff * diff, axis=-1)))
    residual = math.sqrt(grid.dt * total)
    passed = residual <= tol_disc
    return CertificationReport(
        name="pontryagin_residual",
        passed=bool(passed),
        margin=tol_disc - residual,
        se=0.0,
        samples=st.X.shape[0] * st.X.shape[1],
        seed=0,
        witness=None if passed else {"residual": residual, "tol": tol_disc},
        extras={"residual": residual},
    )


def estimate_decoupling_lipschitz(
    make_operator,
    init_base,
    run_config,
    dx: float = 0.2,
    dq: float = 0.2,
    dlaw: float = 0.25,
) -> dict:
    """Sensitivity of the converged fields to initial-condition shifts.

    `make_operator(init)` builds the residual operator for an initial
    condition; all runs share the noise bundle, so differences estimate the
    Lipschitz constants of the decoupling field in the state (x-shift), the
    major state (q-shift) and the law (spread scaling) directions.
    """
    from dataclasses import replace as _replace

    from .extragradient import run_extragradient
    from .solver import InitialCondition

    def converged_solve(init):
        op = make_operator(init)
        report = run_extragradient(op.zero(), run_config, op)
        op(report.final_alpha)
        return op.last_solve

    base = converged_solve(init_base)
    shifted_x = converged_solve(InitialCondition(X0=init_base.X0 + dx, q0=init_base.q0))
    shifted_q = converged_solve(InitialCondition(X0=init_base.X0, q0=init_base.q0 + dq))
    center = init_base.X0.mean(axis=1, keepdims=True)
    widened = InitialCondition(X0=center + (1.0 + dlaw) * (init_base.X0 - center), q0=init_base.q0)
    shifted_law = converged_solve(widened)

    def u0_dist(a, b):
        return float(np.sqrt(np.mean(np.sum((a.state.U[:, :, 0] - b.state.U[:, :, 0]) ** 2, -1))))

    def phi0_dist(a, b):
        return float(np.sqrt(np.mean((a.state.phi[:, 0] - b.state.phi[:, 0]) ** 2)))

    law_shift = float(
        np.sqrt(np.mean(np.sum((widened.X0 - init_base.X0) ** 2, -1)))
    )
    return {
        "lip_x_u": u0_dist(shifted_x, base) / dx,
        "lip_x_phi": phi0_dist(shifted_x, base) / dx,
        "lip_q_u": u0_dist(shifted_q, base) / dq,
        "lip_q_phi": phi0_dist(shifted_q, base) / dq,
        "lip_law_u": u0_dist(shifted_law, base) / max(law_shift, 1e-12),
        "lip_law_phi": phi0_dist(shifted_law, base) / max(law_shift, 1e-12),
    }


def search_scalar_A(
    cs: CoefficientSet,
    candidates=(0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0),
    samples: int = 60,
    seed: int = 0,
) -> tuple[float, float]:
    """Grid search for A = a I maximizing the coefficient Rayleigh bound."""
    best_a, best_kappa = None, -math.inf
    for a in candidates:
        rep = check_coefficient_monotonicity(
            cs, a * np.eye(cs.constants.d0), samples=samples, seed=seed
        )
        if rep.extras["kappa_hat"] > best_kappa:
            best_a, best_kappa = a, rep.extras["kappa_hat"]
    return float(best_a), float(best_kappa)
