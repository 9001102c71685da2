"""
Small stand-in problems with known closed-form behaviour, used by the
CLI `solve`/`analyze` commands and the test suite.
"""
from typing import Callable, Dict

import numpy as np

from problems import ProblemDef, QuadraticProblem


def scalar_problem(w: float = 1.0) -> QuadraticProblem:
    """min w x^2 / 2 s.t. x = 0"""
    return QuadraticProblem(W=[[w]], C=[[1.0]], d=[0.0])


def indefinite_problem(d: float = 0.0) -> QuadraticProblem:
    """W = diag(1, -1), C = (0, 2): PDGD is unstable, PI with kp > 1/4 is not"""
    return QuadraticProblem(W=np.diag([1.0, -1.0]), C=[[0.0, 2.0]], d=[d])


def negative_curvature_problem() -> QuadraticProblem:
    """W = diag(-1, 1), C = (0, 2): the tangent direction has negative curvature"""
    return QuadraticProblem(W=np.diag([-1.0, 1.0]), C=[[0.0, 2.0]], d=[0.0])


def fl_demo_problem() -> QuadraticProblem:
    """min ||x||^2 / 2 s.t. x_1 - 1 = 0"""
    return QuadraticProblem(W=np.eye(2), C=[[1.0, 0.0]], d=[-1.0])


def coupled_problem() -> ProblemDef:
    """Nonlinear problem with n=5, m=3 and a full-rank, non-diagonal Jacobian"""

    def cost(x):
        return 0.25 * float(np.sum(x ** 4)) + 0.5 * float(x @ x)

    def grad(x):
        return x ** 3 + x

    def constraints(x):
        return np.array([
            x[0] ** 2 + x[1] - 1.0,
            np.sin(x[2]) + x[3] * x[4],
            x[0] * x[4] + x[1] - x[2],
        ])

    def jacobian(x):
        return np.array([
            [2.0 * x[0], 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, np.cos(x[2]), x[4], x[3]],
            [x[4], 1.0, -1.0, 0.0, x[0]],
        ])

    def lagrangian_hessian(x, lam):
        H = np.diag(3.0 * x ** 2 + 1.0)
        H[0, 0] += 2.0 * lam[0]
        H[2, 2] -= lam[1] * np.sin(x[2])
        H[3, 4] += lam[1]
        H[4, 3] += lam[1]
        H[0, 4] += lam[2]
        H[4, 0] += lam[2]
        return H

    return ProblemDef(
        n=5,
        m=3,
        cost=cost,
        constraints=constraints,
        grad=grad,
        jacobian=jacobian,
        lagrangian_hessian=lagrangian_hessian,
        label="coupled",
    )


QUADRATIC_PRESETS: Dict[str, Callable[[], QuadraticProblem]] = {
    "scalar": scalar_problem,
    "indefinite": indefinite_problem,
    "negative-curvature": negative_curvature_problem,
    "fl-demo": fl_demo_problem,
}


def get_preset(name: str) -> QuadraticProblem:
    try:
        return QUADRATIC_PRESETS[name]()
    except KeyError:
        raise ValueError(f"Unknown preset '{name}'") from None
