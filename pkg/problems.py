"""
Equality-constrained problem definitions for the Lagrange-multiplier solvers.
Provides finite-difference derivative fallbacks, squared-slack lifting of
variable bounds and a derivative/rank validation harness.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Tuple

import numpy as np
from pydantic import BaseModel
from scipy import linalg

from errors import InvalidBound, NonFiniteEvaluation

logger = logging.getLogger(__name__)

Evaluator = Callable[[np.ndarray], np.ndarray]
HessianEvaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]
Sampler = Callable[[np.random.Generator], np.ndarray]


def _finite_array(values, what: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEvaluation(f"{what} returned non-finite values")
    return arr


def _start_point(x) -> np.ndarray:
    x = np.array(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("Evaluation point must be finite")
    return x


def default_step(x: np.ndarray) -> np.ndarray:
    """Per-component central-difference step max(1e-6, 1e-7*|x_i|)"""
    return np.maximum(1e-6, 1e-7 * np.abs(x))


def _steps(x: np.ndarray, step) -> np.ndarray:
    if step is None:
        return default_step(x)
    step = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    if np.any(step <= 0):
        raise ValueError("Finite-difference step must be positive")
    return step


@dataclass(frozen=True)
class ProblemDef:
    """min f(x) s.t. h(x) = 0 with optional analytic derivative oracles.

    Evaluators must be pure functions of their arguments so a ProblemDef
    can be shared by concurrent solver runs.
    """
    n: int
    m: int
    cost: Callable[[np.ndarray], float]
    constraints: Evaluator
    grad: Optional[Evaluator] = None
    jacobian: Optional[Evaluator] = None
    lagrangian_hessian: Optional[HessianEvaluator] = None
    label: str = "problem"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("Problem needs at least one primal variable")
        if self.m < 0:
            raise ValueError("Number of constraints cannot be negative")

    def f(self, x: np.ndarray) -> float:
        value = float(self.cost(x))
        if not math.isfinite(value):
            raise NonFiniteEvaluation(f"{self.label}: cost is not finite")
        return value

    def h(self, x: np.ndarray) -> np.ndarray:
        return _finite_array(self.constraints(x), f"{self.label}: constraints").reshape(self.m)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.grad is None:
            return eval_gradient_fd(self, x)
        return _finite_array(self.grad(x), f"{self.label}: gradient").reshape(self.n)

    def jac(self, x: np.ndarray) -> np.ndarray:
        if self.jacobian is None:
            return eval_jacobian_fd(self, x)
        J = _finite_array(self.jacobian(x), f"{self.label}: jacobian")
        if J.shape != (self.m, self.n):
            raise ValueError(f"{self.label}: jacobian has shape {J.shape}, expected {(self.m, self.n)}")
        return J

    def lagrangian_gradient(self, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """grad_x L(x, lambda) = grad f(x) + J_h(x)^T lambda"""
        return self.gradient(x) + self.jac(x).T @ lam

    def hessian(self, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Hessian of the Lagrangian in x, analytic or by differencing its gradient"""
        if self.lagrangian_hessian is not None:
            H = _finite_array(self.lagrangian_hessian(x, lam), f"{self.label}: lagrangian hessian")
            return 0.5 * (H + H.T)
        return eval_lagrangian_hessian_fd(self, x, lam)


@dataclass
class JointState:
    """Stacked primal-dual state z = (x, lambda) at simulation time t"""
    x: np.ndarray
    lam: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float).reshape(-1)
        self.lam = np.array(self.lam, dtype=float).reshape(-1)
        if self.t < 0:
            raise ValueError("Simulation time cannot be negative")

    @property
    def n(self) -> int:
        return self.x.size

    @property
    def m(self) -> int:
        return self.lam.size

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.x, self.lam])

    @classmethod
    def from_stacked(cls, z: np.ndarray, n: int, t: float = 0.0) -> "JointState":
        return cls(z[:n], z[n:], t)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.lam)))

    def check_dimensions(self, p: ProblemDef):
        if self.n != p.n or self.m != p.m:
            raise ValueError(
                f"State dimensions ({self.n}, {self.m}) do not match {p.label} ({p.n}, {p.m})"
            )


@dataclass(frozen=True)
class QuadraticProblem:
    """min 1/2 x^T W x  s.t.  C x + d = 0"""
    W: np.ndarray
    C: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=float, ndmin=2)
        C = np.array(self.C, dtype=float, ndmin=2)
        d = np.array(self.d, dtype=float).reshape(-1)
        if W.shape[0] != W.shape[1]:
            raise ValueError("W must be square")
        scale = max(1.0, float(np.max(np.abs(W))))
        if np.max(np.abs(W - W.T)) > 1e-12 * scale:
            raise ValueError("W must be symmetric")
        if C.shape[1] != W.shape[0] or C.shape[0] != d.size:
            raise ValueError(f"Inconsistent shapes W{W.shape}, C{C.shape}, d{d.shape}")
        object.__setattr__(self, "W", 0.5 * (W + W.T))
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "d", d)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def to_problem(self, label: str = "quadratic") -> ProblemDef:
        W, C, d = self.W, self.C, self.d
        return ProblemDef(
            n=self.n,
            m=self.m,
            cost=lambda x: 0.5 * float(x @ W @ x),
            constraints=lambda x: C @ x + d,
            grad=lambda x: W @ x,
            jacobian=lambda x: C,
            lagrangian_hessian=lambda x, lam: W,
            label=label,
        )


Bound = Tuple[int, float, float]


@dataclass(frozen=True)
class SlackTransform:
    """Variable bounds of a base problem, to be lifted into equalities.

    Each finite side gets its own slack: a lower bound l on x_i becomes
    (l - x_i) + z^2 = 0 and an upper bound u becomes (x_i - u) + z^2 = 0.
    Side k reads side_sign[k] * x[side_index[k]] + side_const[k].
    """
    base: ProblemDef
    bounds: Tuple[Bound, ...]
    side_index: np.ndarray = field(init=False, repr=False)
    side_sign: np.ndarray = field(init=False, repr=False)
    side_const: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cleaned = []
        index, sign, const = [], [], []
        for i, lower, upper in self.bounds:
            i, lower, upper = int(i), float(lower), float(upper)
            if not 0 <= i < self.base.n:
                raise InvalidBound(f"Bound index {i} outside 0..{self.base.n - 1}")
            if math.isnan(lower) or math.isnan(upper) or lower >= upper:
                raise InvalidBound(f"Invalid bound on x[{i}]: [{lower}, {upper}]")
            cleaned.append((i, lower, upper))
            if math.isfinite(lower):
                index.append(i)
                sign.append(-1.0)
                const.append(lower)
            if math.isfinite(upper):
                index.append(i)
                sign.append(1.0)
                const.append(-upper)
        object.__setattr__(self, "bounds", tuple(cleaned))
        object.__setattr__(self, "side_index", np.array(index, dtype=int))
        object.__setattr__(self, "side_sign", np.array(sign, dtype=float))
        object.__setattr__(self, "side_const", np.array(const, dtype=float))

    @property
    def slack_offset(self) -> int:
        return self.base.n

    @property
    def slack_count(self) -> int:
        return self.side_index.size

    def side_residuals(self, x: np.ndarray) -> np.ndarray:
        """g(x) per finite side; a side is satisfied when g(x) <= 0"""
        return self.side_sign * x[self.side_index] + self.side_const

    def initial_slacks(self, x: np.ndarray) -> np.ndarray:
        """z0 = sqrt(-g(x)) for satisfied sides, 0 for violated ones"""
        slack = -self.side_residuals(np.asarray(x, dtype=float))
        return np.sqrt(np.clip(slack, 0.0, None))

    def lift_point(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, self.initial_slacks(x)])

    def project(self, lifted: np.ndarray) -> np.ndarray:
        return np.asarray(lifted)[: self.slack_offset]

    def bound_violation(self, x: np.ndarray) -> float:
        if self.slack_count == 0:
            return 0.0
        return float(max(0.0, np.max(self.side_residuals(np.asarray(x, dtype=float)))))


def eval_gradient_fd(p: ProblemDef, x: np.ndarray, step=None) -> np.ndarray:
    """Central-difference approximation of grad f(x)"""
    x = _start_point(x)
    h = _steps(x, step)
    g = np.empty(x.size)
    probe = x.copy()
    for i in range(x.size):
        probe[i] = x[i] + h[i]
        f_plus = float(p.cost(probe))
        probe[i] = x[i] - h[i]
        f_minus = float(p.cost(probe))
        probe[i] = x[i]
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteEvaluation(f"{p.label}: cost probe along x[{i}] is not finite")
        g[i] = (f_plus - f_minus) / (2.0 * h[i])
    return g


def eval_jacobian_fd(p: ProblemDef, x: np.ndarray, step=None) -> np.ndarray:
    """Central-difference approximation of J_h(x); row i approximates grad h_i(x)^T"""
    x = _start_point(x)
    h = _steps(x, step)
    J = np.empty((p.m, x.size))
    probe = x.copy()
    for i in range(x.size):
        probe[i] = x[i] + h[i]
        h_plus = _finite_array(p.constraints(probe), f"{p.label}: constraint probe")
        probe[i] = x[i] - h[i]
        h_minus = _finite_array(p.constraints(probe), f"{p.label}: constraint probe")
        probe[i] = x[i]
        J[:, i] = (h_plus - h_minus).reshape(p.m) / (2.0 * h[i])
    return J


def eval_lagrangian_hessian_fd(p: ProblemDef, x: np.ndarray, lam: np.ndarray, step=None) -> np.ndarray:
    """Symmetrized central differences of grad_x L(x, lambda)"""
    x = _start_point(x)
    lam = np.asarray(lam, dtype=float)
    h = _steps(x, step) if step is not None else np.maximum(1e-5, 1e-5 * np.abs(x))
    H = np.empty((x.size, x.size))
    probe = x.copy()
    for i in range(x.size):
        probe[i] = x[i] + h[i]
        g_plus = p.lagrangian_gradient(probe, lam)
        probe[i] = x[i] - h[i]
        g_minus = p.lagrangian_gradient(probe, lam)
        probe[i] = x[i]
        H[:, i] = (g_plus - g_minus) / (2.0 * h[i])
    return 0.5 * (H + H.T)


def lift_with_slacks(t: SlackTransform) -> ProblemDef:
    """Equality-only problem over (x, z) with one squared slack per finite bound side"""
    base = t.base
    n, m, s = base.n, base.m, t.slack_count
    index, sign, const = t.side_index, t.side_sign, t.side_const
    rows = m + np.arange(s)
    slack_cols = n + np.arange(s)

    def cost(v):
        return base.f(v[:n])

    def grad(v):
        out = np.zeros(n + s)
        out[:n] = base.gradient(v[:n])
        return out

    def constraints(v):
        x, z = v[:n], v[n:]
        return np.concatenate([base.h(x), sign * x[index] + const + z * z])

    def jacobian(v):
        x, z = v[:n], v[n:]
        J = np.zeros((m + s, n + s))
        if m:
            J[:m, :n] = base.jac(x)
        J[rows, index] = sign
        J[rows, slack_cols] = 2.0 * z
        return J

    def lagrangian_hessian(v, lam):
        H = np.zeros((n + s, n + s))
        H[:n, :n] = base.hessian(v[:n], lam[:m])
        H[slack_cols, slack_cols] = 2.0 * lam[m:]
        return H

    logger.debug("Lifted %s: n=%d -> %d, m=%d -> %d", base.label, n, n + s, m, m + s)
    return ProblemDef(
        n=n + s,
        m=m + s,
        cost=cost,
        constraints=constraints,
        grad=grad,
        jacobian=jacobian,
        lagrangian_hessian=lagrangian_hessian,
        label=f"{base.label}+slacks",
    )


class ValidationReport(BaseModel):
    label: str
    samples: int
    tolerance: float
    grad_max_rel_error: Optional[float] = None
    jac_max_rel_error: Optional[float] = None
    min_gram_eigenvalue: Optional[float] = None
    grad_ok: bool = True
    jac_ok: bool = True
    rank_ok: Optional[bool] = None
    passed: bool = True


def _relative_error(analytic: np.ndarray, approx: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - approx)) / max(float(np.max(np.abs(approx))), 1.0))


def validate_problem(
    p: ProblemDef,
    samples: int = 10,
    seed: int = 0,
    tolerance: float = 1e-4,
    sampler: Optional[Sampler] = None,
    rank_tolerance: float = 1e-12,
) -> ValidationReport:
    """Cross-check analytic derivatives against finite differences at random points.

    The Gram rank flag (min eigenvalue of J_h J_h^T relative to the largest)
    is only reported when 0 < m <= n.
    """
    rng = np.random.default_rng(seed)
    grad_err = 0.0 if p.grad is not None else None
    jac_err = 0.0 if (p.jacobian is not None and p.m > 0) else None
    check_rank = 0 < p.m <= p.n
    min_eig = math.inf if check_rank else None
    rank_ok = True if check_rank else None

    for _ in range(samples):
        x = sampler(rng) if sampler is not None else rng.standard_normal(p.n)
        if grad_err is not None:
            grad_err = max(grad_err, _relative_error(p.gradient(x), eval_gradient_fd(p, x)))
        if jac_err is not None:
            jac_err = max(jac_err, _relative_error(p.jac(x), eval_jacobian_fd(p, x)))
        if check_rank:
            J = p.jac(x)
            eigs = linalg.eigvalsh(J @ J.T)
            min_eig = min(min_eig, float(eigs[0]))
            if eigs[0] <= rank_tolerance * max(float(eigs[-1]), 1.0):
                rank_ok = False

    grad_ok = grad_err is None or grad_err <= tolerance
    jac_ok = jac_err is None or jac_err <= tolerance
    report = ValidationReport(
        label=p.label,
        samples=samples,
        tolerance=tolerance,
        grad_max_rel_error=grad_err,
        jac_max_rel_error=jac_err,
        min_gram_eigenvalue=min_eig,
        grad_ok=grad_ok,
        jac_ok=jac_ok,
        rank_ok=rank_ok,
        passed=grad_ok and jac_ok and rank_ok is not False,
    )
    if not report.passed:
        logger.warning("Validation failed for %s: %s", p.label, report.model_dump())
    return report


def box_sampler(bounds: Iterable[Bound], n: int, fallback_scale: float = 1.0) -> Sampler:
    """Uniform sampler strictly inside finite boxes, normal elsewhere"""
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    for i, lo, hi in bounds:
        lower[i], upper[i] = lo, hi

    def sample(rng: np.random.Generator) -> np.ndarray:
        x = fallback_scale * rng.standard_normal(n)
        boxed = np.isfinite(lower) & np.isfinite(upper)
        width = upper[boxed] - lower[boxed]
        x[boxed] = lower[boxed] + width * rng.uniform(0.05, 0.95, size=width.size)
        only_lower = np.isfinite(lower) & ~np.isfinite(upper)
        x[only_lower] = lower[only_lower] + np.abs(x[only_lower]) + 0.05
        only_upper = ~np.isfinite(lower) & np.isfinite(upper)
        x[only_upper] = upper[only_upper] - np.abs(x[only_upper]) - 0.05
        return x

    return sample
