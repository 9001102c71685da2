"""
Fixed-step time integration of the closed-loop Lagrange-multiplier
dynamics, with convergence/divergence detection and trajectory recording.
"""
import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import linalg

from controllers import ControllerKind, Derivatives, GainConfig, LagrangeController
from errors import NonFiniteEvaluation, NotHurwitz, SingularGram
from problems import JointState, ProblemDef

logger = logging.getLogger(__name__)


class Method(str, Enum):
    EULER = "euler"
    RK4 = "rk4"


class SolveStatus(Enum):
    CONVERGED = "converged"
    MAX_TIME = "max_time_reached"
    DIVERGED = "diverged"
    SINGULAR_GRAM = "singular_gram"


class IntegratorConfig(BaseModel):
    method: Method = Method.RK4
    dt: float = Field(1e-3, gt=0.0)
    t_max: float = Field(10.0, gt=0.0)
    stop_constraint_tol: float = Field(1e-7, gt=0.0)
    stop_stationarity_tol: float = Field(1e-6, gt=0.0)
    record_stride: int = Field(1, ge=1)
    divergence_bound: float = Field(1e9, gt=0.0)
    record_states: bool = False

    @model_validator(mode="after")
    def _step_below_horizon(self):
        if self.dt >= self.t_max:
            raise ValueError("dt must be smaller than t_max")
        return self

    @property
    def max_steps(self) -> int:
        return int(math.ceil(self.t_max / self.dt - 1e-9))


@dataclass
class SolveReport:
    status: SolveStatus
    final_state: JointState
    iterations: int
    times: np.ndarray
    f_history: np.ndarray
    hinf_history: np.ndarray
    xdot_inf_history: np.ndarray
    wall_time: float
    final_f: float
    final_hinf: float
    final_xdot_inf: float
    controller: str = ""
    states: Optional[np.ndarray] = None

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED

    def summary(self) -> dict:
        return {
            "status": self.status.value,
            "controller": self.controller,
            "iterations": self.iterations,
            "t": self.final_state.t,
            "f": self.final_f,
            "hinf": self.final_hinf,
            "xdot_inf": self.final_xdot_inf,
            "wall_time": self.wall_time,
        }


class _Recorder:
    """Sampled trajectory series"""

    def __init__(self, problem: ProblemDef, keep_states: bool):
        self.problem = problem
        self.keep_states = keep_states
        self.times, self.f, self.hinf, self.xdot_inf, self.states = [], [], [], [], []
        self.last_iteration = -1

    def record(self, iteration: int, t: float, x: np.ndarray, derivs: Derivatives, stacked: np.ndarray):
        try:
            f_value = self.problem.f(x)
        except NonFiniteEvaluation:
            f_value = math.nan
        self.times.append(t)
        self.f.append(f_value)
        self.hinf.append(_inf_norm(derivs.y))
        self.xdot_inf.append(_inf_norm(derivs.xdot))
        if self.keep_states:
            self.states.append(np.array(stacked, dtype=float))
        self.last_iteration = iteration


def _inf_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _diverged(vec: np.ndarray, bound: float) -> bool:
    return not np.all(np.isfinite(vec)) or float(np.max(np.abs(vec))) > bound


def integrate(
    p: ProblemDef,
    controller: Union[ControllerKind, str],
    g: GainConfig,
    z0: JointState,
    cfg: IntegratorConfig,
    z_star: Optional[JointState] = None,
    reference_tol: float = 1e-6,
) -> SolveReport:
    """Advance the closed loop from z0 until convergence, divergence or t_max.

    Convergence is declared at the first step where ||h(x)||_inf and
    ||xdot||_inf are both within tolerance, or, when a reference solution
    z_star is given, where ||z - z_star||_inf <= reference_tol.
    """
    kind = ControllerKind(controller)
    loop = LagrangeController(p, kind, g)
    vec = loop.initial_vector(z0)
    dt = cfg.dt
    reference = None
    if z_star is not None:
        reference = z_star.x if kind is ControllerKind.FL else z_star.stacked()

    recorder = _Recorder(p, cfg.record_states)
    status = SolveStatus.MAX_TIME
    iterations = 0
    derivs = None
    start = time.perf_counter()

    with np.errstate(over="ignore", invalid="ignore"):
        try:
            dvec, derivs = loop.field(vec)
            recorder.record(0, 0.0, loop.primal(vec), derivs, loop.stacked(vec))
            for _ in range(cfg.max_steps):
                if cfg.method is Method.EULER:
                    new = vec + dt * dvec
                else:
                    k2, _ = loop.field(vec + 0.5 * dt * dvec)
                    k3, _ = loop.field(vec + 0.5 * dt * k2)
                    k4, _ = loop.field(vec + dt * k3)
                    new = vec + (dt / 6.0) * (dvec + 2.0 * k2 + 2.0 * k3 + k4)
                iterations += 1
                vec = new
                if _diverged(vec, cfg.divergence_bound):
                    status = SolveStatus.DIVERGED
                    derivs = None
                    break
                dvec, derivs = loop.field(vec)
                if iterations % cfg.record_stride == 0:
                    recorder.record(iterations, iterations * dt, loop.primal(vec), derivs, loop.stacked(vec))
                if reference is not None:
                    done = float(np.max(np.abs(vec - reference))) <= reference_tol
                else:
                    done = (
                        _inf_norm(derivs.y) <= cfg.stop_constraint_tol
                        and _inf_norm(derivs.xdot) <= cfg.stop_stationarity_tol
                    )
                if done:
                    status = SolveStatus.CONVERGED
                    break
        except (NonFiniteEvaluation, FloatingPointError, OverflowError) as exc:
            logger.debug("%s: non-finite evaluation after %d steps: %s", p.label, iterations, exc)
            status = SolveStatus.DIVERGED
            derivs = None
        except SingularGram as exc:
            logger.warning("%s: %s after %d steps", p.label, exc, iterations)
            status = SolveStatus.SINGULAR_GRAM
            derivs = None

    t_final = iterations * dt
    if derivs is not None and recorder.last_iteration != iterations:
        recorder.record(iterations, t_final, loop.primal(vec), derivs, loop.stacked(vec))

    final_state = loop.joint_state(vec, t_final)
    if derivs is not None:
        final_hinf, final_xdot = _inf_norm(derivs.y), _inf_norm(derivs.xdot)
        final_f = recorder.f[-1]
    else:
        final_hinf = final_xdot = final_f = math.nan

    report = SolveReport(
        status=status,
        final_state=final_state,
        iterations=iterations,
        times=np.array(recorder.times),
        f_history=np.array(recorder.f),
        hinf_history=np.array(recorder.hinf),
        xdot_inf_history=np.array(recorder.xdot_inf),
        wall_time=time.perf_counter() - start,
        final_f=final_f,
        final_hinf=final_hinf,
        final_xdot_inf=final_xdot,
        controller=kind.value,
        states=np.array(recorder.states) if cfg.record_states else None,
    )
    logger.debug(
        "%s/%s: %s after %d steps (%.2fs)", p.label, kind.value, status.value, iterations, report.wall_time
    )
    return report


def stable_step_size(A: np.ndarray, safety: float = 0.9) -> float:
    """Largest forward-Euler step keeping every mode of xdot = A x inside the unit disk, times safety"""
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    mu = linalg.eigvals(np.atleast_2d(np.asarray(A, dtype=float)))
    if np.any(mu.real >= 0):
        raise NotHurwitz(f"Spectral abscissa {float(np.max(mu.real)):.3g} is not negative")
    return safety * float(np.min(2.0 * np.abs(mu.real) / np.abs(mu) ** 2))
