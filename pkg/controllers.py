"""
Closed-loop vector fields that drive the Lagrange multipliers of an
equality-constrained problem: pure integral (PDGD), PI control and
feedback linearization with a decoupled outer loop.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import linalg

from errors import SingularGram
from problems import JointState, ProblemDef

logger = logging.getLogger(__name__)


class ControllerKind(Enum):
    PDGD = "pdgd"
    PI = "pi"
    FL = "fl"


class GainConfig(BaseModel):
    kp: float = Field(0.0, ge=0.0)
    ki: float = Field(1.0, gt=0.0)
    fl_outer: List[float] = Field(default_factory=lambda: [1.0])
    regularization: float = Field(0.0, ge=0.0)

    @field_validator("fl_outer")
    @classmethod
    def _outer_gains_positive(cls, value: List[float]) -> List[float]:
        if not value or any(k <= 0 for k in value):
            raise ValueError("fl_outer gains must all be positive")
        return value

    def outer_gains(self, m: int) -> np.ndarray:
        """Per-constraint outer gains K_1..K_m; a single value is broadcast"""
        if len(self.fl_outer) == 1:
            return np.full(m, self.fl_outer[0])
        if len(self.fl_outer) != m:
            raise ValueError(f"Expected 1 or {m} outer gains, got {len(self.fl_outer)}")
        return np.array(self.fl_outer, dtype=float)


@dataclass
class Derivatives:
    xdot: np.ndarray
    y: np.ndarray
    lambdadot: Optional[np.ndarray] = None
    lambda_value: Optional[np.ndarray] = None


def plant_output(p: ProblemDef, x: np.ndarray) -> np.ndarray:
    """y = h(x)"""
    return p.h(x)


def plant_rhs(p: ProblemDef, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """xdot = -grad f(x) - J_h(x)^T lambda"""
    return -p.lagrangian_gradient(x, np.asarray(lam, dtype=float))


def _pi_derivatives(p: ProblemDef, x: np.ndarray, lam: np.ndarray, kp: float, ki: float) -> Derivatives:
    J = p.jac(x)
    grad_L = p.gradient(x) + J.T @ lam
    y = p.h(x)
    lambdadot = ki * y
    if kp:
        lambdadot = lambdadot - kp * (J @ grad_L)
    return Derivatives(xdot=-grad_L, y=y, lambdadot=lambdadot)


def pi_rhs(p: ProblemDef, z: JointState, g: GainConfig) -> Derivatives:
    """PI law in state-space form; kp = 0 gives PDGD"""
    z.check_dimensions(p)
    return _pi_derivatives(p, z.x, z.lam, g.kp, g.ki)


def decoupling_terms(p: ProblemDef, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """A(x) = -J_h J_h^T and b(x) = -J_h grad f, so that ydot = A(x) lambda + b(x)"""
    J = p.jac(x)
    return -(J @ J.T), -(J @ p.gradient(x))


def _fl_solve(J: np.ndarray, grad: np.ndarray, v: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Multipliers and primal field for ydot = v, from a QR factorization of J^T.

    R^T R = J J^T + eps I, so the Gram matrix is never formed. Without
    regularization the field is written as
    xdot = -(I - Q Q^T) grad f + Q R^-T v, which stays bounded when two
    constraint rows become nearly parallel while their residuals vanish.
    """
    m, n = J.shape
    if m > n:
        raise ValueError(f"Feedback linearization needs m <= n, got m={m}, n={n}")
    if m == 0:
        return np.zeros(0), -grad
    A = J.T if not eps else np.vstack([J.T, math.sqrt(eps) * np.eye(m)])
    Q, R = linalg.qr(A, mode="economic", check_finite=False)
    diag = np.abs(np.diag(R))
    if not diag.min() > np.finfo(float).eps * max(A.shape) * diag.max():
        raise SingularGram(f"J_h J_h^T + {eps:g} I is singular to working precision")
    if eps:
        lam = linalg.cho_solve((R, False), -(J @ grad) - v, check_finite=False)
        return lam, -(grad + J.T @ lam)
    w = linalg.solve_triangular(R, v, trans="T", check_finite=False)
    c = Q.T @ grad
    lam = linalg.solve_triangular(R, -c - w, check_finite=False)
    return lam, -grad + Q @ (c + w)


def fl_control(p: ProblemDef, x: np.ndarray, v: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Static linearizing feedback lambda = A(x)^-1 (-b(x) + v)"""
    lam, _ = _fl_solve(p.jac(x), p.gradient(x), np.asarray(v, dtype=float), eps)
    return lam


def fl_rhs(p: ProblemDef, x: np.ndarray, g: GainConfig) -> Derivatives:
    """Feedback linearization closed loop with outer law v = -K y"""
    J = p.jac(x)
    grad = p.gradient(x)
    y = p.h(x)
    v = -g.outer_gains(p.m) * y
    try:
        lam, xdot = _fl_solve(J, grad, v, g.regularization)
    except SingularGram:
        eps = 1e-10 * float(np.sum(J * J)) / max(p.m, 1)
        if g.regularization > 0 or eps <= 0:
            raise
        logger.debug("%s: singular Gram matrix, retrying with eps=%g", p.label, eps)
        lam, xdot = _fl_solve(J, grad, v, eps)
    return Derivatives(xdot=xdot, y=y, lambda_value=lam)


class LagrangeController:
    """Closed-loop vector field over a flat state vector.

    PI and PDGD evolve z = (x, lambda); feedback linearization evolves x
    only and reports lambda as an algebraic output.
    """

    def __init__(self, problem: ProblemDef, kind: ControllerKind, gains: GainConfig):
        self.problem = problem
        self.kind = ControllerKind(kind)
        if self.kind is ControllerKind.PDGD and gains.kp:
            gains = gains.model_copy(update={"kp": 0.0})
        self.gains = gains

        if self.kind is ControllerKind.FL:
            if problem.m > problem.n:
                raise ValueError(f"{problem.label}: feedback linearization needs m <= n")
            self.state_size = problem.n
        else:
            self.state_size = problem.n + problem.m

        # Last multipliers seen, for FL where lambda is not a state
        self.last_multipliers = np.zeros(problem.m)

    def initial_vector(self, z0: JointState) -> np.ndarray:
        z0.check_dimensions(self.problem)
        self.last_multipliers = z0.lam.copy()
        if self.kind is ControllerKind.FL:
            return z0.x.copy()
        return z0.stacked()

    def field(self, vec: np.ndarray) -> Tuple[np.ndarray, Derivatives]:
        """Time derivative of the flat state and the derivatives it came from"""
        p = self.problem
        if self.kind is ControllerKind.FL:
            derivs = fl_rhs(p, vec, self.gains)
            self.last_multipliers = derivs.lambda_value
            return derivs.xdot, derivs
        derivs = _pi_derivatives(p, vec[: p.n], vec[p.n:], self.gains.kp, self.gains.ki)
        return np.concatenate([derivs.xdot, derivs.lambdadot]), derivs

    def primal(self, vec: np.ndarray) -> np.ndarray:
        return vec[: self.problem.n]

    def joint_state(self, vec: np.ndarray, t: float) -> JointState:
        p = self.problem
        if self.kind is ControllerKind.FL:
            return JointState(vec.copy(), self.last_multipliers.copy(), t)
        return JointState.from_stacked(vec.copy(), p.n, t)

    def stacked(self, vec: np.ndarray) -> np.ndarray:
        """Full (x, lambda) vector for recording"""
        if self.kind is ControllerKind.FL:
            return np.concatenate([vec, self.last_multipliers])
        return vec
