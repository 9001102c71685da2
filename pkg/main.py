"""
lagflow command-line entry point.

    python main.py run quadratic-sweep --seed 7 --runs 400 --out results/
    python main.py solve --preset indefinite --controller pdgd
    python main.py analyze --preset scalar --w 1 --kp 2 --ki 1
    python main.py validate chemical
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator
from scipy import linalg

import settings
from analysis import (
    kkt_oracle,
    lti_closed_loop,
    pdgd_rate,
    scalar_eigenvalues,
    tune_pi_gains,
    zero_dynamics_check,
)
from benchmarks import ExperimentName, ExperimentSpec, make_quadratic, make_sysid, run_experiment, validate_builtin
from controllers import ControllerKind, GainConfig
from errors import LagflowError
from integrator import IntegratorConfig, Method, integrate
from presets import QUADRATIC_PRESETS, get_preset, scalar_problem
from problems import JointState
from reports import ReportWriter, RunSummary, default_output_dir, to_plain

logger = logging.getLogger(__name__)

# Integrator settings each experiment runs with unless overridden
EXPERIMENT_STEPS = {
    ExperimentName.SHIDOKU: (6.6e-4, 100.0),
    ExperimentName.SYSID: (1e-2, 20.0),
    ExperimentName.CHEMICAL: (5e-5, 3.0),
}


class RunConfig(BaseModel):
    experiment: Optional[ExperimentSpec] = None
    n: Optional[int] = Field(None, ge=1)
    m: Optional[int] = Field(None, ge=0)
    seed: int = Field(0, ge=0)
    controller: ControllerKind = ControllerKind.PI
    gains: GainConfig = Field(default_factory=GainConfig)
    integrator: IntegratorConfig = Field(default_factory=IntegratorConfig)
    output_dir: Path = Path(settings.OUTPUT_DIR)
    emit_trajectories: bool = False

    @model_validator(mode="after")
    def _consistent(self):
        if self.experiment is None:
            if self.n is None or self.m is None:
                raise ValueError("An ad-hoc solve needs both n and m")
            if self.controller is ControllerKind.FL and self.m > self.n:
                raise ValueError(f"Feedback linearization needs m <= n, got m={self.m}, n={self.n}")
        return self


def _emit(data: dict, as_json: bool):
    if as_json:
        print(json.dumps(to_plain(data), indent=2))


def cmd_run(args) -> int:
    name = ExperimentName(args.experiment)
    gains = None
    if args.kp is not None or args.ki is not None or args.gain is not None:
        gains = GainConfig(
            kp=args.kp if args.kp is not None else 0.1,
            ki=args.ki if args.ki is not None else 20.0 if name is ExperimentName.QUADRATIC_SWEEP else 1.0,
            fl_outer=[args.gain if args.gain is not None else 10.0 if name is ExperimentName.CHEMICAL else 1.0],
        )
    integrator = None
    if (args.dt is not None or args.tmax is not None) and name not in EXPERIMENT_STEPS:
        raise ValueError(f"--dt/--tmax do not apply to {name.value}, whose Euler steps come from the closed-loop spectrum")
    if args.dt is not None or args.tmax is not None:
        dt, t_max = EXPERIMENT_STEPS[name]
        integrator = IntegratorConfig(
            dt=args.dt if args.dt is not None else dt,
            t_max=args.tmax if args.tmax is not None else t_max,
        )
    spec = ExperimentSpec(name=name, seed=args.seed, runs=args.runs, gains=gains, integrator=integrator)
    config = RunConfig(
        experiment=spec,
        output_dir=args.out or default_output_dir(name.value, args.seed),
        emit_trajectories=args.csv,
    )

    options = {}
    if name is ExperimentName.SYSID and args.noise_std is not None:
        options["noise_std"] = args.noise_std
    result = run_experiment(spec, workers=args.workers, keep_reports=config.emit_trajectories, **options)

    writer = ReportWriter(config.output_dir)
    summary = RunSummary(
        experiment=name.value,
        seed=args.seed,
        config=result.config,
        runs=result.runs,
        aggregate=result.aggregate,
        passed=result.passed,
    )
    writer.write_summary(summary)
    if config.emit_trajectories:
        writer.write_table_csv("runs.csv", result.runs)
        if "table" in result.aggregate:
            writer.write_table_csv("table.csv", result.aggregate["table"])
        for key, report in result.reports.items():
            writer.write_trajectory_csv(f"{key}.csv", report)

    _emit(summary.model_dump(), args.json)
    print(f"{name.value}: {'PASSED' if result.passed else 'FAILED'} (output in {config.output_dir})")
    return 0 if result.passed else 1


def cmd_solve(args) -> int:
    if args.preset == "random":
        q = make_quadratic(args.n, args.m, args.seed)
    else:
        q = get_preset(args.preset)
    method = Method(args.method)
    config = RunConfig(
        n=q.n,
        m=q.m,
        seed=args.seed,
        controller=ControllerKind(args.controller),
        gains=GainConfig(kp=args.kp, ki=args.ki, fl_outer=[args.gain]),
        integrator=IntegratorConfig(method=method, dt=args.dt, t_max=args.tmax, record_states=args.csv),
        output_dir=args.out or default_output_dir(f"solve-{args.preset}", args.seed),
        emit_trajectories=args.csv,
    )

    p = q.to_problem(args.preset)
    rng = np.random.default_rng(config.seed)
    z0 = JointState(rng.standard_normal(q.n), rng.standard_normal(q.m))
    report = integrate(p, config.controller, config.gains, z0, config.integrator)

    summary = dict(report.summary())
    summary["x"] = report.final_state.x
    summary["lambda"] = report.final_state.lam
    try:
        x_star, lam_star = kkt_oracle(q)
        summary["kkt_distance"] = float(np.max(np.abs(report.final_state.stacked() - np.concatenate([x_star, lam_star]))))
    except LagflowError:
        summary["kkt_distance"] = None

    writer = ReportWriter(config.output_dir)
    writer.write_summary(
        RunSummary(
            experiment=f"solve-{args.preset}",
            seed=config.seed,
            config=config.model_dump(mode="json", exclude={"experiment"}),
            runs=[summary],
        )
    )
    if config.emit_trajectories:
        writer.write_trajectory_csv("trajectory.csv", report, n=q.n)

    _emit(summary, args.json)
    print(f"{p.label} ({q.n}x{q.m}) {config.controller.value}: {report.status.value} after {report.iterations} steps")
    return 0


def cmd_analyze(args) -> int:
    gains = GainConfig(kp=args.kp, ki=args.ki)
    out = {"preset": args.preset, "kp": args.kp, "ki": args.ki}

    if args.preset == "sysid":
        data = make_sysid(N=args.samples, seed=args.seed, noise_std=0.0)
        zd = zero_dynamics_check(data.problem, data.true_point(), np.zeros(data.problem.m))
        out["zero_dynamics"] = zd.to_dict()
    else:
        if args.preset == "scalar":
            q = scalar_problem(args.w)
            out["w"] = args.w
            out["closed_form"] = list(scalar_eigenvalues(args.w, args.kp, args.ki))
        elif args.preset == "quadratic":
            q = make_quadratic(args.n, args.m, args.seed)
        else:
            q = get_preset(args.preset)
        out["lti"] = lti_closed_loop(q, gains).to_dict()

        if args.preset == "quadratic" and args.kp > 0:
            beta = linalg.eigvalsh(q.W)
            alpha = linalg.eigvalsh(q.C @ q.C.T)
            tuned = tune_pi_gains(float(beta[0]), float(beta[-1]), float(alpha[0]), args.kp, alpha2=float(alpha[-1]))
            out["tuning"] = tuned.model_dump(mode="json")
            out["pdgd_rate"] = pdgd_rate(args.ki, float(alpha[0]), float(alpha[-1]), float(beta[0]), float(beta[-1]))

        if args.zero_dynamics:
            x_star, lam_star = kkt_oracle(q)
            out["kkt"] = {"x": x_star, "lambda": lam_star}
            out["zero_dynamics"] = zero_dynamics_check(q.to_problem(args.preset), x_star, lam_star).to_dict()

    if args.out:
        ReportWriter(args.out).write_json(f"analyze-{args.preset}.json", out)
    print(json.dumps(to_plain(out), indent=2))
    return 0


def cmd_validate(args) -> int:
    reports = validate_builtin(args.experiment, samples=args.samples, seed=args.seed)
    data = {"experiment": args.experiment, "reports": [r.model_dump() for r in reports]}
    if args.out:
        ReportWriter(args.out).write_json(f"validate-{args.experiment}.json", data)
    _emit(data, args.json)
    for r in reports:
        print(f"{r.label}: {'ok' if r.passed else 'FAILED'} (grad {r.grad_max_rel_error}, jac {r.jac_max_rel_error}, "
              f"min Gram eigenvalue {r.min_gram_eigenvalue})")
    return 0 if all(r.passed for r in reports) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lagflow",
        description="Equality-constrained optimization by feedback control of Lagrange multipliers",
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)
    experiments = [e.value for e in ExperimentName]

    run = sub.add_parser("run", help="Run a built-in experiment")
    run.add_argument("experiment", choices=experiments)
    run.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    run.add_argument("--runs", type=int, default=None, help="Number of runs (per m for the sweep)")
    run.add_argument("--out", type=Path, default=None)
    run.add_argument("--csv", action="store_true", help="Write per-run tables and trajectories")
    run.add_argument("--json", action="store_true", help="Print the JSON summary")
    run.add_argument("--workers", type=int, default=0, help="Parallel runs (0: LAGFLOW_THREADS)")
    run.add_argument("--kp", type=float, default=None)
    run.add_argument("--ki", type=float, default=None)
    run.add_argument("--gain", type=float, default=None, help="Outer feedback-linearization gain")
    run.add_argument("--dt", type=float, default=None, help="Step size (not accepted by quadratic-sweep)")
    run.add_argument("--tmax", type=float, default=None, help="Horizon (not accepted by quadratic-sweep)")
    run.add_argument("--noise-std", type=float, default=None, help="Measurement noise for sysid")
    run.set_defaults(func=cmd_run)

    solve = sub.add_parser("solve", help="Solve an ad-hoc quadratic problem")
    solve.add_argument("--preset", choices=["random"] + list(QUADRATIC_PRESETS), default="random")
    solve.add_argument("--n", type=int, default=10)
    solve.add_argument("--m", type=int, default=3)
    solve.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    solve.add_argument("--controller", choices=[c.value for c in ControllerKind], default="pi")
    solve.add_argument("--kp", type=float, default=1.0)
    solve.add_argument("--ki", type=float, default=1.0)
    solve.add_argument("--gain", type=float, default=1.0, help="Outer feedback-linearization gain")
    solve.add_argument("--method", choices=[m.value for m in Method], default="rk4")
    solve.add_argument("--dt", type=float, default=1e-3)
    solve.add_argument("--tmax", type=float, default=100.0)
    solve.add_argument("--out", type=Path, default=None)
    solve.add_argument("--csv", action="store_true", help="Write the trajectory with full states")
    solve.add_argument("--json", action="store_true")
    solve.set_defaults(func=cmd_solve)

    analyze = sub.add_parser("analyze", help="Closed-loop eigenvalues and zero dynamics of built-ins")
    analyze.add_argument("--preset", choices=list(QUADRATIC_PRESETS) + ["quadratic", "sysid"], default="scalar")
    analyze.add_argument("--w", type=float, default=1.0)
    analyze.add_argument("--kp", type=float, default=1.0)
    analyze.add_argument("--ki", type=float, default=1.0)
    analyze.add_argument("--n", type=int, default=8)
    analyze.add_argument("--m", type=int, default=3)
    analyze.add_argument("--samples", type=int, default=400, help="Sample count N for the sysid preset")
    analyze.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    analyze.add_argument("--zero-dynamics", action="store_true")
    analyze.add_argument("--out", type=Path, default=None)
    analyze.set_defaults(func=cmd_analyze)

    validate = sub.add_parser("validate", help="Check analytic derivatives against finite differences")
    validate.add_argument("experiment", choices=experiments)
    validate.add_argument("--samples", type=int, default=10)
    validate.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    validate.add_argument("--out", type=Path, default=None)
    validate.add_argument("--json", action="store_true")
    validate.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    level = logging.DEBUG if args.verbose else getattr(logging, settings.LOG_LEVEL, logging.INFO)
    logging.basicConfig(level=level, format='[%(module)s] %(message)s')

    try:
        return args.func(args)
    except (ValidationError, ValueError, LagflowError) as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
