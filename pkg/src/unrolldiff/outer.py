"""Projected gradient descent on the truncated outer objective.

Plain constant-step projected GD: the hypergradient is the only nontrivial
ingredient. Stopping measures the projected-gradient residual, which is the
right stationarity test under box constraints.
"""
from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .core import BilevelProblem, HyperVector
from .errors import DivergenceDetected
from .hypergrad import WarmStartState, forward_hypergrad, reverse_hypergrad, unroll
from .problems import EpochSampler, MetaDataset


@dataclass(frozen=True)
class OuterConfig:
    beta: float
    steps: int
    mode: str = "reverse"
    warm_start: bool = False
    meta_batch: int = None
    tolerance: float = 0.0
    seed: int = 0
    divergence_window: int = 20
    divergence_factor: float = 10.0

    def __post_init__(self):
        if not (self.beta > 0 and np.isfinite(self.beta)):
            raise ValueError(f"outer step size must be positive, got {self.beta}")
        if self.steps <= 0:
            raise ValueError(f"max outer steps must be positive, got {self.steps}")
        if self.tolerance < 0:
            raise ValueError(f"stop tolerance must be >= 0, got {self.tolerance}")
        if self.mode not in ("reverse", "forward"):
            raise ValueError(f"mode must be 'reverse' or 'forward', got {self.mode!r}")


@dataclass(frozen=True)
class TraceRow:
    step: int
    f_value: float
    hypergrad_inf_norm: float
    lambda_hash: str
    inner_final_loss: float
    wall_ms: float


@dataclass(frozen=True)
class OuterTrace:
    rows: tuple[TraceRow, ...]
    stop_reason: str

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))

    def f_values(self) -> np.ndarray:
        return np.array([r.f_value for r in self.rows])

    def wall_ms(self) -> list[float]:
        return [r.wall_ms for r in self.rows]

    def to_csv(self, path) -> None:
        """Deterministic per-step trace; wall times live in the run's meta file."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "f_value", "hypergrad_inf_norm", "inner_final_loss"])
            for r in self.rows:
                writer.writerow(
                    [r.step, repr(r.f_value), repr(r.hypergrad_inf_norm), repr(r.inner_final_loss)]
                )


def project_box(lam: HyperVector) -> HyperVector:
    """Coordinate-wise clamp onto the box; idempotent."""
    return lam.with_values(np.clip(lam.values, lam.lower, lam.upper))


def _lambda_hash(lam: HyperVector) -> str:
    return hashlib.sha256(lam.values.tobytes()).hexdigest()[:16]


def run_outer(
    problem: BilevelProblem,
    config: OuterConfig,
    lam0: HyperVector,
    meta: MetaDataset = None,
) -> tuple[HyperVector, OuterTrace]:
    """Iterate lam <- project(lam - beta * grad f_T(lam)) with telemetry.

    With ``meta`` given and ``config.meta_batch`` set, each step rebinds a
    freshly sampled episode batch (epoch semantics), making the hypergradient
    a stochastic estimate. Warm restart carries the final inner state into the
    next unroll; the carried state is treated as constant by the engines.
    """
    if not lam0.feasible():
        raise ValueError("initial hyperparameters violate their box bounds")
    lam = lam0
    warm = None
    sampler = None
    if config.meta_batch is not None:
        if meta is None:
            raise ValueError("meta_batch configured but no meta-dataset supplied")
        sampler = EpochSampler(meta, config.meta_batch, np.random.default_rng(config.seed))

    rows = []
    stop_reason = "max_steps"
    bad_streak = 0
    f_first = None
    for s in range(config.steps):
        prob_s = problem
        if sampler is not None:
            batch = sampler.next_batch()
            prob_s = problem.with_data(batch, batch)

        t0 = time.perf_counter()
        if config.mode == "reverse":
            traj = unroll(prob_s, lam, warm)
            res = reverse_hypergrad(prob_s, traj)
            final_state = traj.final
        else:
            res = forward_hypergrad(prob_s, lam, warm)
            final_state = res.diagnostics["final_state"]
        wall_ms = (time.perf_counter() - t0) * 1e3

        rows.append(
            TraceRow(
                s, res.f_value, float(np.max(np.abs(res.grad))), _lambda_hash(lam),
                float(res.diagnostics["inner_loss"][-1]), wall_ms,
            )
        )

        if f_first is None:
            f_first = res.f_value
        bad_streak = bad_streak + 1 if res.f_value > config.divergence_factor * f_first else 0
        if bad_streak >= config.divergence_window:
            raise DivergenceDetected(s, res.f_value)

        candidate = project_box(lam.with_values(lam.values - config.beta * res.grad))
        residual = float(np.max(np.abs(lam.values - candidate.values))) / config.beta
        lam = candidate
        if config.warm_start:
            warm = WarmStartState(final_state, True)
        if residual <= config.tolerance:
            stop_reason = "tolerance"
            break

    return lam, OuterTrace(tuple(rows), stop_reason)
