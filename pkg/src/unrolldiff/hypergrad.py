"""Truncated-objective value and gradient via reverse, forward, and FD modes.

Reverse mode sweeps an adjoint backward over a stored trajectory: its number
of derivative-product evaluations depends on T only, never on the number of
hyperparameters. Forward mode propagates one tangent column per requested
direction alongside the unroll and needs no stored trajectory. The
finite-difference mode is the independent numerical oracle for both.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import BilevelProblem, HyperVector, InnerState
from .errors import BoundaryTooClose, DimensionMismatch, NonFiniteState, TrajectoryMismatch

_CBRT_EPS = float(np.finfo(np.float64).eps) ** (1.0 / 3.0)


@dataclass(frozen=True)
class WarmStartState:
    """Inner state carried over from the previous outer iteration.

    When enabled, the unroll begins from ``state`` instead of the problem's
    initialization map, and the carried state is treated as constant: the
    hypergradient never differentiates through it.
    """

    state: InnerState = None
    enabled: bool = False

    def __post_init__(self):
        if self.enabled and self.state is None:
            raise ValueError("warm start enabled without a carried state")


@dataclass(frozen=True)
class Trajectory:
    """Stored unroll [w_0, ..., w_T] enabling the reverse sweep.

    ``slices`` records the per-step data-slice identifiers (or None for
    full-batch steps) so the reverse sweep replays exactly the same realized
    step maps.
    """

    states: tuple[InnerState, ...]
    lam: HyperVector
    slices: tuple
    warm_started: bool = False

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "slices", tuple(self.slices))
        if len(self.slices) != len(self.states) - 1:
            raise ValueError("need exactly one data-slice entry per step")

    @property
    def T(self) -> int:
        return len(self.states) - 1

    @property
    def final(self) -> InnerState:
        return self.states[-1]


@dataclass(frozen=True)
class HypergradResult:
    """Outer value at the unroll endpoint plus its gradient in lambda.

    ``diagnostics`` carries the inner-loss trace over the trajectory, wall
    time in ms, and the final inner state (used for warm restarts).
    """

    f_value: float
    grad: np.ndarray
    mode: str
    diagnostics: dict = field(default_factory=dict)


def _step_data(train_data, sl):
    return train_data if sl is None else train_data.subset(sl)


def _start_state(problem: BilevelProblem, lam: HyperVector, warm: WarmStartState):
    if warm is not None and warm.enabled:
        state = warm.state
        if state.param_dim != problem.dynamics.param_dim or state.aux_dim != problem.dynamics.aux_dim:
            raise DimensionMismatch(
                "warm start state", "dynamics",
                f"({state.param_dim}, {state.aux_dim}) vs "
                f"({problem.dynamics.param_dim}, {problem.dynamics.aux_dim})",
            )
        return state, True
    return problem.init.init(lam), False


def unroll(
    problem: BilevelProblem,
    lam: HyperVector,
    warm: WarmStartState = None,
    slices: Sequence = None,
) -> Trajectory:
    """Run the inner dynamics for T steps and store every state."""
    if lam.dim != problem.hyper_dim:
        raise DimensionMismatch(
            "hyperparameters", "problem", f"dim {lam.dim} vs {problem.hyper_dim}"
        )
    if not lam.feasible():
        raise ValueError("hyperparameters violate their box bounds")
    slices = tuple(slices) if slices is not None else (None,) * problem.T
    if len(slices) != problem.T:
        raise ValueError(f"expected {problem.T} slice entries, got {len(slices)}")

    state, warm_started = _start_state(problem, lam, warm)
    if not state.is_finite():
        raise NonFiniteState(0)
    states = [state]
    for t in range(1, problem.T + 1):
        state = problem.dynamics.step(state, lam, _step_data(problem.train_data, slices[t - 1]))
        if not state.is_finite():
            raise NonFiniteState(t)
        states.append(state)
    return Trajectory(tuple(states), lam, slices, warm_started)


def _inner_loss_trace(problem: BilevelProblem, states, lam) -> np.ndarray:
    return np.array([problem.inner.value(s.params, lam, problem.train_data) for s in states])


def reverse_hypergrad(problem: BilevelProblem, trajectory: Trajectory) -> HypergradResult:
    """Adjoint sweep backward over a stored trajectory.

    Exactly T state-Jacobian transpose products and at most T+1
    hyper-Jacobian transpose products, regardless of how many hyperparameters
    there are. Each step is replayed and compared against the stored state, so
    a trajectory produced by a different problem or lambda is rejected.
    """
    t0 = time.perf_counter()
    lam = trajectory.lam
    dyn = problem.dynamics
    w_T = trajectory.final.params

    f_value = problem.outer.value(w_T, lam, problem.val_data)
    grad = np.array(problem.outer.grad_hyper(w_T, lam, problem.val_data), dtype=np.float64)
    alpha = np.concatenate([problem.outer.grad_w(w_T, lam, problem.val_data), np.zeros(dyn.aux_dim)])

    for t in range(trajectory.T, 0, -1):
        prev = trajectory.states[t - 1]
        data_t = _step_data(problem.train_data, trajectory.slices[t - 1])
        replayed = dyn.step(prev, lam, data_t)
        if not (
            np.array_equal(replayed.params, trajectory.states[t].params)
            and np.array_equal(replayed.aux, trajectory.states[t].aux)
        ):
            raise TrajectoryMismatch(t)
        grad += dyn.vjp_hyper(prev, lam, data_t, alpha)
        alpha = dyn.vjp_state(prev, lam, data_t, alpha)

    if not trajectory.warm_started:
        grad += problem.init.vjp_hyper(lam, alpha)

    return HypergradResult(
        f_value, grad, "reverse",
        {
            "inner_loss": _inner_loss_trace(problem, trajectory.states, lam),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
            "final_state": trajectory.final,
        },
    )


def forward_hypergrad(
    problem: BilevelProblem,
    lam: HyperVector,
    warm: WarmStartState = None,
    directions: np.ndarray = None,
    slices: Sequence = None,
) -> HypergradResult:
    """Tangent propagation alongside the unroll; no trajectory is stored.

    ``directions`` is an optional (hyper_dim, k) matrix of tangent directions;
    the default is the identity, giving the full gradient. With a subset, the
    result's ``grad`` holds the k directional derivatives. One
    state-Jacobian product is spent per direction per step, so the cost scales
    with the number of directions. Tangent columns are reduced in a fixed
    order for bitwise reproducibility.
    """
    t0 = time.perf_counter()
    if lam.dim != problem.hyper_dim:
        raise DimensionMismatch(
            "hyperparameters", "problem", f"dim {lam.dim} vs {problem.hyper_dim}"
        )
    if not lam.feasible():
        raise ValueError("hyperparameters violate their box bounds")
    m = problem.hyper_dim
    D = np.eye(m) if directions is None else np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if D.shape[0] != m:
        raise DimensionMismatch("tangent directions", "hyperparameters", f"{D.shape[0]} rows vs dim {m}")
    k = D.shape[1]
    slices = tuple(slices) if slices is not None else (None,) * problem.T
    if len(slices) != problem.T:
        raise ValueError(f"expected {problem.T} slice entries, got {len(slices)}")

    dyn = problem.dynamics
    state, warm_started = _start_state(problem, lam, warm)
    if not state.is_finite():
        raise NonFiniteState(0)

    Z = np.zeros((dyn.state_dim, k))
    if not warm_started:
        for j in range(k):
            Z[:, j] = problem.init.jvp(lam, D[:, j])

    inner_loss = [problem.inner.value(state.params, lam, problem.train_data)]
    for t in range(1, problem.T + 1):
        data_t = _step_data(problem.train_data, slices[t - 1])
        Z_next = np.empty_like(Z)
        for j in range(k):
            Z_next[:, j] = dyn.jvp(state, lam, data_t, Z[:, j], D[:, j])
        Z = Z_next
        state = dyn.step(state, lam, data_t)
        if not state.is_finite():
            raise NonFiniteState(t)
        inner_loss.append(problem.inner.value(state.params, lam, problem.train_data))

    w_T = state.params
    f_value = problem.outer.value(w_T, lam, problem.val_data)
    grad = Z[: dyn.param_dim, :].T @ problem.outer.grad_w(w_T, lam, problem.val_data) \
        + D.T @ problem.outer.grad_hyper(w_T, lam, problem.val_data)

    return HypergradResult(
        f_value, grad, "forward",
        {
            "inner_loss": np.array(inner_loss),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
            "final_state": state,
        },
    )


def fd_hypergrad(
    problem: BilevelProblem,
    lam: HyperVector,
    epsilon: float = None,
    coordinates: Sequence[int] = None,
    warm: WarmStartState = None,
    slices: Sequence = None,
) -> HypergradResult:
    """Central-difference hypergradient, the oracle both engines are checked against.

    Per-coordinate step defaults to cbrt(machine eps) * (1 + |lam_k|). Every
    probed coordinate must sit strictly inside its box by at least the step,
    otherwise the probe would leave the feasible set. With a ``coordinates``
    subset, unprobed entries of the result are zero.
    """
    t0 = time.perf_counter()
    coords = list(range(lam.dim)) if coordinates is None else list(coordinates)

    base = unroll(problem, lam, warm, slices)
    f_value = problem.outer.value(base.final.params, lam, problem.val_data)

    grad = np.zeros(lam.dim)
    for k in coords:
        eps_k = epsilon if epsilon is not None else _CBRT_EPS * (1.0 + abs(lam.values[k]))
        if lam.values[k] - eps_k < lam.lower[k] or lam.values[k] + eps_k > lam.upper[k]:
            raise BoundaryTooClose(lam.coordinate_name(k))
        f_pm = []
        for sign in (+1.0, -1.0):
            vals = lam.values.copy()
            vals[k] += sign * eps_k
            traj = unroll(problem, lam.with_values(vals), warm, slices)
            f_pm.append(problem.outer.value(traj.final.params, traj.lam, problem.val_data))
        grad[k] = (f_pm[0] - f_pm[1]) / (2.0 * eps_k)

    return HypergradResult(
        f_value, grad, "finite-diff",
        {
            "inner_loss": _inner_loss_trace(problem, base.states, lam),
            "wall_ms": (time.perf_counter() - t0) * 1e3,
            "final_state": base.final,
            "probed_coordinates": tuple(coords),
        },
    )
