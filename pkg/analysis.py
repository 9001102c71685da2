"""
Executable versions of the convergence theory: PI gain tuning and the
guaranteed rate, Lyapunov decay monitoring, closed-loop eigenvalue
analysis of quadratic problems, zero-dynamics checks and a KKT oracle.
"""
import cmath
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import linalg

from controllers import GainConfig
from errors import InvalidBounds, NotHurwitz, NotStationary, RankDeficient, SingularKKT
from integrator import stable_step_size
from problems import JointState, ProblemDef, QuadraticProblem

logger = logging.getLogger(__name__)

HURWITZ_MARGIN = 1e-12


class Branch(Enum):
    KI_RHO_PLUS_KP_BETA2 = "beta2"
    KI_RHO_PLUS_KP_BETA1 = "beta1"


class TuningParams(BaseModel):
    beta1: float = Field(gt=0.0)
    beta2: float = Field(gt=0.0)
    alpha1: float = Field(gt=0.0)
    alpha2: float = Field(gt=0.0)
    kp: float = Field(gt=0.0)
    rho: float = Field(gt=0.0)
    ki: float = Field(gt=0.0)
    mu: float = Field(gt=0.0)
    branch: Branch = Branch.KI_RHO_PLUS_KP_BETA2
    rho_factor: float = Field(2.0, gt=1.0)

    @model_validator(mode="after")
    def _consistent(self):
        if self.beta1 > self.beta2:
            raise ValueError("beta1 must not exceed beta2")
        delta = self.beta2 - self.beta1
        if self.rho < self.kp * delta ** 2 / (2.0 * self.beta1) * (1 - 1e-12):
            raise ValueError("rho is below kp (beta2 - beta1)^2 / (2 beta1)")
        return self

    def gains(self) -> GainConfig:
        return GainConfig(kp=self.kp, ki=self.ki)


def _check_bounds(beta1: float, beta2: float, *positives: float):
    values = (beta1, beta2) + positives
    if not all(math.isfinite(v) and v > 0 for v in values):
        raise InvalidBounds(f"Bounds and gains must be positive and finite, got {values}")
    if beta1 > beta2:
        raise InvalidBounds(f"beta1={beta1} exceeds beta2={beta2}")


def _branch_beta(beta1: float, beta2: float, branch: Branch) -> float:
    return beta2 if Branch(branch) is Branch.KI_RHO_PLUS_KP_BETA2 else beta1


def tune_pi_gains(
    beta1: float,
    beta2: float,
    alpha1: float,
    kp: float,
    branch: Branch = Branch.KI_RHO_PLUS_KP_BETA2,
    alpha2: Optional[float] = None,
    rho_factor: float = 2.0,
) -> TuningParams:
    """Gains with a guaranteed exponential rate mu > 0.

    rho is rho_factor times its lower bound kp (beta2 - beta1)^2 / (2 beta1);
    a factor above one keeps 2 beta1 - kp (beta2 - beta1)^2 / rho positive.
    When beta1 == beta2 the bound is zero and rho is floored at kp * beta1.
    """
    alpha2 = alpha1 if alpha2 is None else alpha2
    _check_bounds(beta1, beta2, alpha1, alpha2, kp)
    if alpha1 > alpha2:
        raise InvalidBounds(f"alpha1={alpha1} exceeds alpha2={alpha2}")
    if rho_factor <= 1:
        raise InvalidBounds("rho_factor must be greater than one")

    delta_sq = (beta2 - beta1) ** 2
    if delta_sq > 0:
        rho = rho_factor * kp * delta_sq / (2.0 * beta1)
    else:
        rho = kp * beta1
    ki = rho + kp * _branch_beta(beta1, beta2, branch)
    mu = min(kp * alpha1, 2.0 * beta1 - kp * delta_sq / rho)
    return TuningParams(
        beta1=beta1,
        beta2=beta2,
        alpha1=alpha1,
        alpha2=alpha2,
        kp=kp,
        rho=rho,
        ki=ki,
        mu=mu,
        branch=Branch(branch),
        rho_factor=rho_factor,
    )


def kp_from_ki(
    beta1: float, beta2: float, ki: float, branch: Branch = Branch.KI_RHO_PLUS_KP_BETA2
) -> Tuple[float, float]:
    """Solve rho = kp (beta2 - beta1)^2 / (2 beta1) and ki = rho + kp * beta jointly"""
    _check_bounds(beta1, beta2, ki)
    beta = _branch_beta(beta1, beta2, branch)
    lift = (beta2 - beta1) ** 2 / (2.0 * beta1)
    kp = ki / (beta + lift)
    rho = kp * lift if lift > 0 else kp * beta1
    return kp, rho


def pdgd_rate(eta: float, alpha1: float, alpha2: float, beta1: float, beta2: float) -> float:
    """Guaranteed PDGD rate min{eta alpha1 / (4 beta2), alpha1 beta1 / (4 alpha2)}"""
    _check_bounds(beta1, beta2, eta, alpha1, alpha2)
    return min(eta * alpha1 / (4.0 * beta2), alpha1 * beta1 / (4.0 * alpha2))


def min_kp_beating_pdgd(
    beta1: float,
    beta2: float,
    alpha1: float,
    alpha2: float,
    branch: Branch = Branch.KI_RHO_PLUS_KP_BETA2,
    rho_factor: float = 2.0,
    kp_start: float = 2.0 ** -20,
    kp_limit: float = 2.0 ** 40,
) -> TuningParams:
    """Smallest power-of-two kp whose tuned rate exceeds alpha1 beta1 / (4 alpha2)"""
    _check_bounds(beta1, beta2, alpha1, alpha2)
    target = alpha1 * beta1 / (4.0 * alpha2)
    kp = kp_start
    while kp <= kp_limit:
        params = tune_pi_gains(beta1, beta2, alpha1, kp, branch, alpha2=alpha2, rho_factor=rho_factor)
        if params.mu > target:
            return params
        kp *= 2.0
    raise InvalidBounds(f"No kp up to {kp_limit:g} beats the PDGD rate {target:g}")


def closed_loop_matrix(q: QuadraticProblem, kp: float, ki: float) -> np.ndarray:
    """[[-W, -C^T], [ki C - kp C W, -kp C C^T]] governing (x - x*, lambda - lambda*)"""
    W, C = q.W, q.C
    return np.block([[-W, -C.T], [ki * C - kp * C @ W, -kp * C @ C.T]])


def scalar_eigenvalues(w: float, kp: float, ki: float) -> Tuple[complex, complex]:
    """Closed-form eigenvalues for f = w x^2 / 2, h = x"""
    s = kp + w
    root = cmath.sqrt(s * s - 4.0 * ki)
    return (-s + root) / 2.0, (-s - root) / 2.0


@dataclass
class LTIStabilityReport:
    eigenvalues: np.ndarray
    hurwitz: bool
    spectral_abscissa: float
    suggested_dt: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [[float(mu.real), float(mu.imag)] for mu in self.eigenvalues],
            "hurwitz": self.hurwitz,
            "spectral_abscissa": self.spectral_abscissa,
            "suggested_dt": self.suggested_dt,
        }


def lti_closed_loop(q: QuadraticProblem, g: GainConfig, safety: float = 0.9) -> LTIStabilityReport:
    A = closed_loop_matrix(q, g.kp, g.ki)
    mu = linalg.eigvals(A)
    abscissa = float(np.max(mu.real))
    hurwitz = abscissa < -HURWITZ_MARGIN
    suggested = None
    if hurwitz:
        try:
            suggested = stable_step_size(A, safety)
        except NotHurwitz:
            suggested = None
    order = np.lexsort((mu.imag, mu.real))
    return LTIStabilityReport(mu[order], hurwitz, abscissa, suggested)


@dataclass
class LyapunovReport:
    times: np.ndarray
    values: np.ndarray
    envelope: np.ndarray
    mu: float
    passed: bool
    violations: int
    empirical_rate: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "passed": self.passed,
            "violations": self.violations,
            "empirical_rate": self.empirical_rate,
            "v0": float(self.values[0]) if self.values.size else None,
            "v_final": float(self.values[-1]) if self.values.size else None,
        }


def lyapunov_values(states: np.ndarray, z_star: JointState, rho: float) -> np.ndarray:
    """V = rho ||x - x*||^2 + ||lambda - lambda*||^2 for each stacked row"""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = z_star.n
    dx = states[:, :n] - z_star.x
    dl = states[:, n:] - z_star.lam
    return rho * np.sum(dx * dx, axis=1) + np.sum(dl * dl, axis=1)


def lyapunov_monitor(
    times: np.ndarray,
    states: np.ndarray,
    z_star: JointState,
    rho: float,
    mu: float,
    slack: float = 1e-9,
) -> LyapunovReport:
    """Check V(t) <= V(0) exp(-mu t) at every recorded sample"""
    times = np.asarray(times, dtype=float)
    values = lyapunov_values(states, z_star, rho)
    if values.size == 0:
        return LyapunovReport(times, values, values, mu, True, 0)
    envelope = values[0] * np.exp(-mu * (times - times[0]))
    violations = int(np.count_nonzero(values > envelope + slack))

    # Decay exponent from the samples that are still above roundoff
    usable = values > 1e-24
    rate = None
    if np.count_nonzero(usable) >= 2 and np.ptp(times[usable]) > 0:
        slope = np.polyfit(times[usable], np.log(values[usable]), 1)[0]
        rate = float(-slope)

    if violations:
        logger.info("Lyapunov bound violated at %d of %d samples", violations, values.size)
    return LyapunovReport(times, values, envelope, mu, violations == 0, violations, rate)


@dataclass
class ZeroDynamicsReport:
    jh_perp: np.ndarray
    reduced_hessian: np.ndarray
    min_eig: float
    second_order_sufficient: bool
    eigenvalues: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "min_eig": self.min_eig,
            "second_order_sufficient": self.second_order_sufficient,
            "reduced_hessian_eigenvalues": self.eigenvalues,
            "tangent_dimension": int(self.jh_perp.shape[0]),
        }


def tangent_basis(J: np.ndarray, rank_tolerance: float = 1e-10) -> np.ndarray:
    """Orthonormal rows spanning null(J), from a column-pivoted QR of J^T"""
    m, n = J.shape
    if m == 0:
        return np.eye(n)
    Q, R, _ = linalg.qr(J.T, pivoting=True)
    diag = np.abs(np.diag(R))
    scale = max(float(diag[0]), 1.0) if diag.size else 1.0
    rank = int(np.count_nonzero(diag > rank_tolerance * scale))
    if rank < m:
        raise RankDeficient(f"Constraint Jacobian has rank {rank} < m={m}")
    return Q[:, m:].T


def zero_dynamics_check(
    p: ProblemDef, x_star: np.ndarray, lambda_star: np.ndarray, stationarity_tol: float = 1e-5
) -> ZeroDynamicsReport:
    """Reduced Hessian of the Lagrangian on the constraint tangent space at a stationary point"""
    x_star = np.asarray(x_star, dtype=float)
    lambda_star = np.asarray(lambda_star, dtype=float)
    residual = p.lagrangian_gradient(x_star, lambda_star)
    if residual.size and float(np.max(np.abs(residual))) > stationarity_tol:
        raise NotStationary(
            f"{p.label}: ||grad_x L||_inf = {float(np.max(np.abs(residual))):.3g} > {stationarity_tol:g}"
        )
    jh_perp = tangent_basis(p.jac(x_star))
    H = p.hessian(x_star, lambda_star)
    reduced = jh_perp @ H @ jh_perp.T
    reduced = 0.5 * (reduced + reduced.T)
    if reduced.size:
        eigs = linalg.eigvalsh(reduced)
        min_eig = float(eigs[0])
    else:
        eigs = np.array([])
        min_eig = math.inf
    return ZeroDynamicsReport(
        jh_perp=jh_perp,
        reduced_hessian=reduced,
        min_eig=min_eig,
        second_order_sufficient=min_eig > 0,
        eigenvalues=[float(e) for e in eigs],
    )


def kkt_oracle(q: QuadraticProblem, max_condition: float = 1e14) -> Tuple[np.ndarray, np.ndarray]:
    """Solve [[W, C^T], [C, 0]] (x*, lambda*) = (0, -d) directly"""
    n, m = q.n, q.m
    K = np.block([[q.W, q.C.T], [q.C, np.zeros((m, m))]])
    rhs = np.concatenate([np.zeros(n), -q.d])
    if np.linalg.cond(K) > max_condition:
        raise SingularKKT("KKT matrix is singular to working precision")
    try:
        sol = linalg.solve(K, rhs)
    except linalg.LinAlgError as exc:
        raise SingularKKT(str(exc)) from exc
    return sol[:n], sol[n:]
