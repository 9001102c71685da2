import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from benchmarks import make_quadratic, make_shidoku, make_sysid, validate_builtin
from errors import InvalidBound, NonFiniteEvaluation
from problems import (
    JointState,
    ProblemDef,
    QuadraticProblem,
    SlackTransform,
    default_step,
    eval_gradient_fd,
    eval_jacobian_fd,
    eval_lagrangian_hessian_fd,
    lift_with_slacks,
    validate_problem,
)
from presets import coupled_problem


def _unconstrained(cost, n=2):
    return ProblemDef(n=n, m=0, cost=cost, constraints=lambda x: np.zeros(0))


def _box_problem():
    """min x^2 with 0 <= x <= 1 and no equalities"""
    base = ProblemDef(
        n=1,
        m=0,
        cost=lambda x: float(x[0] ** 2),
        constraints=lambda x: np.zeros(0),
        grad=lambda x: 2.0 * x,
        jacobian=lambda x: np.zeros((0, 1)),
        label="box",
    )
    return SlackTransform(base, ((0, 0.0, 1.0),))


class TestFiniteDifferences:
    def test_gradient_of_quadratic(self):
        p = _unconstrained(lambda x: 0.5 * float(x @ x))
        g = eval_gradient_fd(p, np.array([1.0, 2.0]), step=1e-6)
        assert_allclose(g, [1.0, 2.0], atol=1e-8)

    def test_gradient_of_constant_is_zero(self):
        p = _unconstrained(lambda x: 3.0, n=4)
        assert np.all(eval_gradient_fd(p, np.array([0.3, -1.0, 7.0, 2.0])) == 0.0)

    def test_non_finite_probe_raises(self):
        p = _unconstrained(lambda x: math.nan if x[0] > 1.0 else 0.0, n=1)
        with pytest.raises(NonFiniteEvaluation):
            eval_gradient_fd(p, np.array([1.0]))

    def test_step_must_be_positive(self):
        p = _unconstrained(lambda x: 0.0)
        with pytest.raises(ValueError):
            eval_gradient_fd(p, np.zeros(2), step=0.0)

    def test_default_step(self):
        assert_allclose(default_step(np.array([0.0, 1.0, 1e3])), [1e-6, 1e-6, 1e-4])

    def test_sysid_gradient_matches_analytic(self):
        p = make_sysid(N=20, seed=3).problem
        x = np.random.default_rng(0).standard_normal(p.n)
        analytic = p.gradient(x)
        approx = eval_gradient_fd(p, x)
        assert np.max(np.abs(analytic - approx)) / max(np.max(np.abs(approx)), 1.0) <= 1e-5

    def test_affine_jacobian(self):
        q = make_quadratic(5, 3, 1)
        J = eval_jacobian_fd(q.to_problem(), np.random.default_rng(1).standard_normal(5))
        assert_allclose(J, q.C, atol=1e-8)

    def test_bilinear_jacobian(self):
        p = ProblemDef(n=2, m=1, cost=lambda x: 0.0, constraints=lambda x: np.array([x[0] * x[1]]))
        assert_allclose(eval_jacobian_fd(p, np.array([3.0, 5.0])), [[5.0, 3.0]], atol=1e-8)

    def test_shidoku_jacobian_matches_analytic(self):
        p = make_shidoku()
        x = np.random.default_rng(2).uniform(0.5, 4.5, p.n)
        assert np.max(np.abs(p.jac(x) - eval_jacobian_fd(p, x))) <= 1e-5

    def test_lagrangian_hessian(self):
        p = coupled_problem()
        rng = np.random.default_rng(4)
        x, lam = rng.standard_normal(p.n), rng.standard_normal(p.m)
        assert_allclose(p.hessian(x, lam), eval_lagrangian_hessian_fd(p, x, lam), atol=1e-5)


class TestProblemDef:
    def test_jacobian_shape_is_checked(self):
        p = ProblemDef(
            n=2, m=1, cost=lambda x: 0.0, constraints=lambda x: x[:1], jacobian=lambda x: np.ones((2, 2))
        )
        with pytest.raises(ValueError):
            p.jac(np.zeros(2))

    def test_non_finite_cost(self):
        p = _unconstrained(lambda x: math.inf)
        with pytest.raises(NonFiniteEvaluation):
            p.f(np.zeros(2))

    def test_joint_state_dimensions(self):
        p = make_quadratic(4, 2, 0).to_problem()
        JointState(np.zeros(4), np.zeros(2)).check_dimensions(p)
        with pytest.raises(ValueError):
            JointState(np.zeros(3), np.zeros(2)).check_dimensions(p)

    def test_joint_state_stacking(self):
        z = JointState([1.0, 2.0, 3.0], [4.0], t=0.5)
        back = JointState.from_stacked(z.stacked(), 3, z.t)
        assert_allclose(back.x, z.x)
        assert_allclose(back.lam, z.lam)
        assert back.is_finite()
        assert not JointState([math.nan], []).is_finite()

    def test_quadratic_must_be_symmetric(self):
        with pytest.raises(ValueError):
            QuadraticProblem(W=[[1.0, 2.0], [0.0, 1.0]], C=[[1.0, 0.0]], d=[0.0])


class TestSlackLifting:
    def test_dimensions(self):
        lifted = lift_with_slacks(_box_problem())
        assert (lifted.n, lifted.m) == (3, 2)

    def test_feasible_point(self):
        lifted = lift_with_slacks(_box_problem())
        v = np.array([0.5, math.sqrt(0.5), math.sqrt(0.5)])
        assert_allclose(lifted.h(v), [0.0, 0.0], atol=1e-15)

    def test_one_sided_bounds(self):
        t = SlackTransform(_box_problem().base, ((0, -math.inf, 2.0),))
        lifted = lift_with_slacks(t)
        assert (lifted.n, lifted.m) == (2, 1)
        assert_allclose(lifted.h(np.array([1.0, 1.0])), [0.0])

    @pytest.mark.parametrize("bound", [(0, 1.0, 1.0), (0, 2.0, 1.0), (3, 0.0, 1.0), (0, math.nan, 1.0)])
    def test_invalid_bounds(self, bound):
        with pytest.raises(InvalidBound):
            SlackTransform(_box_problem().base, (bound,))

    def test_side_layout(self):
        t = SlackTransform(_box_problem().base, ((0, -1.0, 2.0),))
        assert_allclose(t.side_index, [0, 0])
        assert_allclose(t.side_sign, [-1.0, 1.0])
        assert_allclose(t.side_const, [-1.0, -2.0])
        assert_allclose(t.side_residuals(np.array([0.5])), [-1.5, -1.5])

    def test_violated_side_starts_at_zero_slack(self):
        t = _box_problem()
        assert_allclose(t.initial_slacks(np.array([2.0])), [math.sqrt(2.0), 0.0])

    def test_lifted_derivatives_validate(self):
        q = make_quadratic(4, 2, 5)
        t = SlackTransform(q.to_problem(), ((0, -1.0, 1.0), (2, 0.0, math.inf)))
        report = validate_problem(lift_with_slacks(t), samples=5, seed=1)
        assert report.passed

    @given(
        st.floats(-5, 5, allow_nan=False),
        st.floats(-3, 3, allow_nan=False),
        st.floats(-3, 3, allow_nan=False),
    )
    def test_cost_is_preserved(self, x, z1, z2):
        t = _box_problem()
        lifted = lift_with_slacks(t)
        assert lifted.f(np.array([x, z1, z2])) == t.base.f(np.array([x]))

    @given(
        st.floats(-5, 5, allow_nan=False),
        st.floats(-3, 3, allow_nan=False),
        st.floats(-3, 3, allow_nan=False),
    )
    def test_bound_violation_bounded_by_residual(self, x, z1, z2):
        t = _box_problem()
        lifted = lift_with_slacks(t)
        residual = np.max(np.abs(lifted.h(np.array([x, z1, z2]))))
        assert t.bound_violation(np.array([x])) <= residual + 1e-12

    @given(st.floats(0.0, 1.0, allow_nan=False))
    def test_points_inside_bounds_lift_to_feasible(self, x):
        t = _box_problem()
        lifted = lift_with_slacks(t)
        v = t.lift_point(np.array([x]))
        assert np.max(np.abs(lifted.h(v))) <= 1e-12
        assert_allclose(t.project(v), [x])

    @given(st.floats(1.0 + 1e-6, 10.0, allow_nan=False))
    def test_points_outside_bounds_never_lift_to_feasible(self, x):
        t = _box_problem()
        lifted = lift_with_slacks(t)
        assert np.max(np.abs(lifted.h(t.lift_point(np.array([x]))))) >= x - 1.0 - 1e-12


class TestValidation:
    def test_exact_quadratic_passes(self):
        report = validate_problem(make_quadratic(6, 3, 0).to_problem(), samples=10, seed=0)
        assert report.grad_max_rel_error <= 1e-6
        assert report.jac_max_rel_error <= 1e-6
        assert report.rank_ok is True
        assert report.passed

    def test_wrong_gradient_fails(self):
        q = make_quadratic(6, 3, 0)
        good = q.to_problem()
        bad = ProblemDef(
            n=good.n,
            m=good.m,
            cost=good.cost,
            constraints=good.constraints,
            grad=lambda x: 2.0 * (q.W @ x),
            jacobian=good.jacobian,
        )
        report = validate_problem(bad, samples=5, seed=0)
        assert not report.grad_ok
        assert not report.passed

    def test_rank_deficient_constraints_fail(self):
        q = QuadraticProblem(W=np.eye(3), C=[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], d=[0.0, 0.0])
        report = validate_problem(q.to_problem(), samples=3)
        assert report.rank_ok is False
        assert not report.passed

    def test_rank_not_checked_when_m_exceeds_n(self):
        report = validate_problem(make_shidoku(), samples=2, sampler=lambda rng: rng.uniform(0.5, 4.5, 12))
        assert report.rank_ok is None
        assert report.min_gram_eigenvalue is None

    def test_chemical_lifted_has_full_rank(self):
        base_report, lifted_report = validate_builtin("chemical", samples=10, seed=0)
        assert base_report.passed
        assert lifted_report.passed
        assert lifted_report.rank_ok is True
        assert lifted_report.min_gram_eigenvalue > 0
