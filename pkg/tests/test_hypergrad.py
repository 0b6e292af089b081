import dataclasses

import numpy as np
import pytest

from unrolldiff import (
    GradientDescent,
    HyperVector,
    InnerState,
    Trajectory,
    WarmStartState,
    assemble_problem,
    exact_minimizer,
    fd_hypergrad,
    forward_hypergrad,
    reverse_hypergrad,
    ridge_quadratic,
    unroll,
    zero_init,
)
from unrolldiff.errors import (
    BoundaryTooClose,
    DimensionMismatch,
    NonFiniteState,
    TrajectoryMismatch,
)

from helpers import (
    CountingDynamics,
    FixedStateInit,
    LinearInit,
    ShiftQuadInner,
    SquareDistOuter,
    make_hyperclean,
    make_ridge,
    rel_inf,
    sample_feasible,
    scalar_shift_lam,
)


def scalar_problem(T: int):
    """L(w) = (w - shift)^2, E(w) = (w - 1)^2, w0 = 0, eta = 0.5."""
    inner = ShiftQuadInner()
    return assemble_problem(
        inner, SquareDistOuter(1.0), GradientDescent(inner, 0.5), zero_init(1), T
    )


def test_unroll_T0_is_init_only():
    traj = unroll(scalar_problem(0), scalar_shift_lam(3.0))
    assert traj.T == 0 and len(traj.states) == 1
    assert traj.final.params[0] == 0.0


def test_unroll_scalar_one_step():
    traj = unroll(scalar_problem(1), scalar_shift_lam(3.0))
    assert [s.params[0] for s in traj.states] == [0.0, 3.0]


def test_unroll_ridge_endpoint_reaches_closed_form():
    problem, lam0 = make_ridge(T=200, eta=0.005)
    q = ridge_quadratic(problem.train_data.X, problem.train_data.y, 0, lam0)
    w_star = exact_minimizer(q, lam0)
    assert np.max(np.abs(unroll(problem, lam0).final.params - w_star)) <= 1e-6
    prob500 = dataclasses.replace(problem, T=500)
    assert np.max(np.abs(unroll(prob500, lam0).final.params - w_star)) <= 1e-8


def test_reverse_scalar_analytic_gradient():
    # One GD step sends w to the shift, so f_1(shift) = (shift - 1)^2 and the
    # hypergradient at shift = 3 is 2 * (3 - 1) = 4.
    problem = scalar_problem(1)
    lam = scalar_shift_lam(3.0)
    res = reverse_hypergrad(problem, unroll(problem, lam))
    assert res.f_value == pytest.approx(4.0, abs=1e-14)
    assert res.grad[0] == pytest.approx(4.0, abs=1e-12)
    assert res.mode == "reverse"


def test_reverse_T0_pure_ho_gradient_is_zero():
    problem = scalar_problem(0)
    res = reverse_hypergrad(problem, unroll(problem, scalar_shift_lam(3.0)))
    np.testing.assert_array_equal(res.grad, np.zeros(1))


def test_reverse_matches_fd_on_hypercleaning_instance():
    problem, lam0, _ = make_hyperclean(n_train=50, n_val=40, d=20, T=10, eta=0.01)
    rng = np.random.default_rng(21)
    lam = sample_feasible("hyperclean", lam0, rng)
    rev = reverse_hypergrad(problem, unroll(problem, lam))
    fd = fd_hypergrad(problem, lam)
    np.testing.assert_allclose(rev.grad, fd.grad, rtol=1e-5, atol=1e-9)


def test_forward_matches_reverse_scalar():
    problem = scalar_problem(1)
    res = forward_hypergrad(problem, scalar_shift_lam(3.0))
    assert res.grad[0] == pytest.approx(4.0, abs=1e-12)
    assert res.mode == "forward"


def test_forward_matches_reverse_random_problem():
    problem, lam0, _ = make_hyperclean(T=25)
    rng = np.random.default_rng(3)
    for _ in range(3):
        lam = sample_feasible("hyperclean", lam0, rng)
        rev = reverse_hypergrad(problem, unroll(problem, lam))
        fwd = forward_hypergrad(problem, lam)
        assert rel_inf(rev.grad, fwd.grad) <= 1e-8


def test_forward_single_direction_matches_reverse_coordinate():
    problem, lam0, _ = make_hyperclean(T=10)
    lam = sample_feasible("hyperclean", lam0, np.random.default_rng(8))
    rev = reverse_hypergrad(problem, unroll(problem, lam))
    k = 4
    e_k = np.zeros((lam.dim, 1))
    e_k[k, 0] = 1.0
    fwd = forward_hypergrad(problem, lam, directions=e_k)
    assert fwd.grad.shape == (1,)
    assert abs(fwd.grad[0] - rev.grad[k]) <= 1e-8 * (abs(rev.grad[k]) + 1e-12)


def test_fd_scalar_analytic():
    res = fd_hypergrad(scalar_problem(1), scalar_shift_lam(3.0))
    assert res.grad[0] == pytest.approx(4.0, abs=1e-6)
    assert res.mode == "finite-diff"


def test_fd_matches_reverse_on_quadratic():
    problem, lam0 = make_ridge(T=10)
    lam = sample_feasible("ridge", lam0, np.random.default_rng(2))
    rev = reverse_hypergrad(problem, unroll(problem, lam))
    fd = fd_hypergrad(problem, lam)
    assert rel_inf(rev.grad, fd.grad) <= 1e-5


def test_fd_epsilon_sweep_is_u_shaped():
    problem, lam0 = make_ridge(T=10)
    lam = sample_feasible("ridge", lam0, np.random.default_rng(6))
    ref = reverse_hypergrad(problem, unroll(problem, lam)).grad
    errs = []
    for eps in np.logspace(-10, -2, 9):
        fd = fd_hypergrad(problem, lam, epsilon=eps)
        errs.append(abs(fd.grad[0] - ref[0]))
    best = int(np.argmin(errs))
    assert 0 < best < len(errs) - 1
    assert errs[best] < errs[0] and errs[best] < errs[-1]


def test_reverse_rejects_tampered_trajectory():
    problem, lam0 = make_ridge(T=3)
    traj = unroll(problem, lam0)
    states = list(traj.states)
    states[1] = InnerState(states[1].params + 1e-9)
    bad = Trajectory(tuple(states), traj.lam, traj.slices)
    with pytest.raises(TrajectoryMismatch) as exc:
        reverse_hypergrad(problem, bad)
    assert exc.value.step == 2


class _HugeGradInner(ShiftQuadInner):
    def grad_w(self, w, lam, data):
        return np.array([1e308])


def test_unroll_nonfinite_state_reports_step():
    inner = _HugeGradInner()
    problem = assemble_problem(
        inner, SquareDistOuter(0.0), GradientDescent(inner, 2.0), zero_init(1), 5
    )
    with np.errstate(over="ignore"), pytest.raises(NonFiniteState) as exc:
        unroll(problem, scalar_shift_lam(0.0))
    assert exc.value.step == 1


def test_fd_boundary_too_close_names_coordinate():
    problem, lam0, _ = make_hyperclean(T=2, w0=1.0)  # weights at the upper bound
    with pytest.raises(BoundaryTooClose) as exc:
        fd_hypergrad(problem, lam0)
    assert exc.value.coordinate == "weights[0]"


def test_unroll_rejects_infeasible_lambda():
    problem, lam0, _ = make_hyperclean(T=2)
    bad = lam0.with_values(lam0.values + 2.0)  # outside [0, 1]
    with pytest.raises(ValueError):
        unroll(problem, bad)
    with pytest.raises(ValueError):
        forward_hypergrad(problem, bad)


@pytest.mark.parametrize("dynamics", ["gd", "momentum"])
def test_warm_start_equals_cold_start_from_carried_state(dynamics):
    problem, lam0 = make_ridge(T=6, dynamics=dynamics)
    lam = sample_feasible("ridge", lam0, np.random.default_rng(14))
    carried = unroll(problem, lam).final

    warm = WarmStartState(carried, enabled=True)
    res_warm = reverse_hypergrad(problem, unroll(problem, lam, warm=warm))
    fwd_warm = forward_hypergrad(problem, lam, warm=warm)

    cold_problem = dataclasses.replace(problem, init=FixedStateInit(carried))
    res_cold = reverse_hypergrad(cold_problem, unroll(cold_problem, lam))

    np.testing.assert_array_equal(res_warm.grad, res_cold.grad)
    assert rel_inf(res_cold.grad, fwd_warm.grad) <= 1e-10
    assert res_warm.f_value == res_cold.f_value


def test_f_value_identical_across_modes():
    problem, lam0, _ = make_hyperclean(T=8)
    lam = sample_feasible("hyperclean", lam0, np.random.default_rng(10))
    f_rev = reverse_hypergrad(problem, unroll(problem, lam)).f_value
    f_fwd = forward_hypergrad(problem, lam).f_value
    f_fd = fd_hypergrad(problem, lam, coordinates=[0]).f_value
    assert f_rev == f_fwd == f_fd


def test_reverse_call_counts_depend_only_on_T():
    problem, lam0 = make_ridge(T=9)
    counting = CountingDynamics(problem.dynamics)
    problem = dataclasses.replace(problem, dynamics=counting)
    traj = unroll(problem, lam0)
    counting.reset()
    reverse_hypergrad(problem, traj)
    assert counting.counts["vjp_state"] == 9
    assert counting.counts["vjp_hyper"] <= 9 + 1
    assert counting.counts["jvp"] == 0


def test_lambda_dependent_init_degenerate_unroll():
    # Identity init map with T = 0: the hypergradient is exactly the outer
    # gradient evaluated at w = lambda (the adjoint must pass through the
    # init map's transpose product).
    inner = ShiftQuadInner()
    outer = SquareDistOuter(1.0)
    init = LinearInit(np.eye(1))
    problem = assemble_problem(inner, outer, GradientDescent(inner, 0.5), init, 0)
    lam = scalar_shift_lam(3.0)
    res = reverse_hypergrad(problem, unroll(problem, lam))
    assert res.grad[0] == pytest.approx(2.0 * (3.0 - 1.0), abs=1e-13)

    fwd = forward_hypergrad(problem, lam)
    assert fwd.grad[0] == pytest.approx(res.grad[0], abs=1e-12)


def test_lambda_dependent_init_all_modes_agree():
    rng = np.random.default_rng(17)
    problem, lam0 = make_ridge(T=3)
    M = rng.standard_normal((5, lam0.dim))
    problem = dataclasses.replace(problem, init=LinearInit(M))
    lam = sample_feasible("ridge", lam0, rng)
    rev = reverse_hypergrad(problem, unroll(problem, lam))
    fwd = forward_hypergrad(problem, lam)
    fd = fd_hypergrad(problem, lam)
    assert rel_inf(rev.grad, fwd.grad) <= 1e-10
    assert rel_inf(rev.grad, fd.grad) <= 1e-5


def test_forward_rejects_bad_direction_shape():
    problem, lam0 = make_ridge(T=2)
    with pytest.raises(DimensionMismatch):
        forward_hypergrad(problem, lam0, directions=np.ones((lam0.dim + 1, 2)))


def test_stochastic_slices_replay_deterministically():
    problem, lam0 = make_ridge(T=5)
    rng = np.random.default_rng(30)
    slices = [rng.choice(problem.train_data.n, size=12, replace=False) for _ in range(5)]
    traj = unroll(problem, lam0, slices=slices)
    rev = reverse_hypergrad(problem, traj)
    fd = fd_hypergrad(problem, lam0, slices=slices)
    assert rel_inf(rev.grad, fd.grad) <= 1e-5
    traj2 = unroll(problem, lam0, slices=slices)
    np.testing.assert_array_equal(traj.final.params, traj2.final.params)
