"""Objective and dynamics contracts, hyperparameter data model, problem assembly.

All arithmetic is double precision. Every type here is immutable after
construction (arrays are marked read-only) and all evaluators are pure, so
instances can be shared freely across threads.
"""
from __future__ import annotations

import abc
import dataclasses
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import DimensionMismatch, NonPositiveUnroll


def _frozen_array(x, dtype=np.float64) -> np.ndarray:
    a = np.array(x, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Segment:
    """A named contiguous slice of a hyperparameter vector."""

    name: str
    offset: int
    length: int

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class HyperVector:
    """Flat outer variable with named segments and optional box bounds.

    ``lower``/``upper`` always have the full length; coordinates without a
    bound carry -inf/+inf. Values may sit outside the box transiently (that
    is what projection is for); the engines validate feasibility at their
    entry points.
    """

    values: np.ndarray
    segments: tuple[Segment, ...]
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        values = _frozen_array(np.atleast_1d(self.values))
        if values.ndim != 1:
            raise ValueError("hyperparameter values must be a flat vector")
        n = values.shape[0]
        lower = self.lower if self.lower is not None else np.full(n, -np.inf)
        upper = self.upper if self.upper is not None else np.full(n, np.inf)
        lower = _frozen_array(np.atleast_1d(lower))
        upper = _frozen_array(np.atleast_1d(upper))
        if lower.shape != (n,) or upper.shape != (n,):
            raise ValueError("bounds must match the value vector length")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "segments", tuple(self.segments))

        segs = sorted(self.segments, key=lambda s: s.offset)
        expected = 0
        names = set()
        for seg in segs:
            if seg.name in names:
                raise ValueError(f"duplicate segment name {seg.name!r}")
            names.add(seg.name)
            if seg.offset != expected or seg.length <= 0:
                raise ValueError(
                    f"segments must partition [0, {n}) exactly; "
                    f"segment {seg.name!r} starts at {seg.offset}, expected {expected}"
                )
            expected += seg.length
        if expected != n:
            raise ValueError(
                f"segments cover [0, {expected}) but the vector has length {n}"
            )
        if np.any(lower > upper):
            raise ValueError("lower bound exceeds upper bound")

    @classmethod
    def from_parts(cls, parts: Sequence[tuple]) -> "HyperVector":
        """Build from ``(name, values, lower, upper)`` tuples.

        ``lower``/``upper`` may be scalars, arrays of the segment length, or
        None for unbounded.
        """
        vals, los, his, segs = [], [], [], []
        offset = 0
        for name, v, lo, hi in parts:
            v = np.atleast_1d(np.asarray(v, dtype=np.float64))
            k = v.shape[0]
            vals.append(v)
            los.append(np.full(k, -np.inf) if lo is None else np.broadcast_to(lo, (k,)))
            his.append(np.full(k, np.inf) if hi is None else np.broadcast_to(hi, (k,)))
            segs.append(Segment(name, offset, k))
            offset += k
        return cls(
            np.concatenate(vals), tuple(segs),
            np.concatenate(los), np.concatenate(his),
        )

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(f"no segment named {name!r}")

    def get(self, name: str) -> np.ndarray:
        return self.values[self.segment(name).slice]

    def with_values(self, values: np.ndarray) -> "HyperVector":
        return HyperVector(values, self.segments, self.lower, self.upper)

    def feasible(self, atol: float = 0.0) -> bool:
        return bool(
            np.all(self.values >= self.lower - atol)
            and np.all(self.values <= self.upper + atol)
        )

    def coordinate_name(self, index: int) -> str:
        for seg in self.segments:
            if seg.offset <= index < seg.offset + seg.length:
                return f"{seg.name}[{index - seg.offset}]"
        raise IndexError(index)


def jitter(hv: HyperVector, rng: np.random.Generator, halfwidth, margin: float = 0.0) -> HyperVector:
    """Random feasible point near ``hv``, strictly inside the box by ``margin``.

    ``halfwidth`` is either a scalar or a per-segment-name dict. Coordinates
    are drawn uniformly in ``value +- halfwidth`` and clipped to the shrunken
    box, so the result is always feasible.
    """
    widths = np.empty(hv.dim)
    if np.isscalar(halfwidth):
        widths[:] = halfwidth
    else:
        for seg in hv.segments:
            widths[seg.slice] = halfwidth[seg.name]
    lo = np.where(np.isfinite(hv.lower), hv.lower + margin, hv.lower)
    hi = np.where(np.isfinite(hv.upper), hv.upper - margin, hv.upper)
    base = np.clip(hv.values, lo, hi)
    draw = base + rng.uniform(-widths, widths)
    return hv.with_values(np.clip(draw, lo, hi))


@dataclass(frozen=True)
class InnerState:
    """Inner variable w plus auxiliary dynamics state (e.g. momentum velocity)."""

    params: np.ndarray
    aux: np.ndarray = dataclasses.field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        object.__setattr__(self, "params", _frozen_array(np.atleast_1d(self.params)))
        object.__setattr__(self, "aux", _frozen_array(np.atleast_1d(self.aux) if np.size(self.aux) else np.empty(0)))

    @property
    def param_dim(self) -> int:
        return self.params.shape[0]

    @property
    def aux_dim(self) -> int:
        return self.aux.shape[0]

    def stacked(self) -> np.ndarray:
        """Full state vector [params; aux] seen by the adjoint/tangent sweeps."""
        return np.concatenate([self.params, self.aux])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.params)) and np.all(np.isfinite(self.aux)))


class InnerObjective(abc.ABC):
    """Training loss L(w, lambda) with analytic first- and second-order products.

    Implementations must be pure: identical inputs give bitwise-identical
    outputs. ``param_dim`` and ``hyper_dim`` are fixed per instance. The mixed
    products cover the full hyperparameter vector; segments the loss does not
    touch contribute zeros.
    """

    param_dim: int
    hyper_dim: int

    @abc.abstractmethod
    def value(self, w: np.ndarray, lam: HyperVector, data) -> float: ...

    @abc.abstractmethod
    def grad_w(self, w: np.ndarray, lam: HyperVector, data) -> np.ndarray: ...

    @abc.abstractmethod
    def hvp(self, w: np.ndarray, lam: HyperVector, data, v: np.ndarray) -> np.ndarray:
        """Hessian-vector product (d^2 L / dw^2) v."""

    @abc.abstractmethod
    def mixed_vjp(self, w: np.ndarray, lam: HyperVector, data, v: np.ndarray) -> np.ndarray:
        """Transpose cross product (d/d lambda)(grad_w L)^T v, hyper-shaped."""

    @abc.abstractmethod
    def mixed_jvp(self, w: np.ndarray, lam: HyperVector, data, dlam: np.ndarray) -> np.ndarray:
        """Forward cross product (d/d lambda)(grad_w L) dlam, param-shaped."""


class OuterObjective(abc.ABC):
    """Validation / meta-train error E(w, lambda).

    ``grad_hyper`` is explicit rather than auto-derived: it is identically zero
    for plain hyperparameter optimization and analytic for the
    hyper-representation case.
    """

    param_dim: int
    hyper_dim: int

    @abc.abstractmethod
    def value(self, w: np.ndarray, lam: HyperVector, data) -> float: ...

    @abc.abstractmethod
    def grad_w(self, w: np.ndarray, lam: HyperVector, data) -> np.ndarray: ...

    @abc.abstractmethod
    def grad_hyper(self, w: np.ndarray, lam: HyperVector, data) -> np.ndarray: ...


class Dynamics(abc.ABC):
    """One inner optimization step and its Jacobian products.

    The adjoint and tangent sweeps see the stacked state vector
    ``[params; aux]``; each dynamics owns its aux layout. ``vjp_state`` /
    ``vjp_hyper`` / ``jvp`` are all evaluated at the step *input* state.
    """

    param_dim: int
    aux_dim: int
    hyper_dim: int

    @property
    def state_dim(self) -> int:
        return self.param_dim + self.aux_dim

    @abc.abstractmethod
    def step(self, state: InnerState, lam: HyperVector, data) -> InnerState: ...

    @abc.abstractmethod
    def vjp_state(self, state: InnerState, lam: HyperVector, data, v: np.ndarray) -> np.ndarray:
        """(d Phi / d state)^T v over the stacked state vector."""

    @abc.abstractmethod
    def vjp_hyper(self, state: InnerState, lam: HyperVector, data, v: np.ndarray) -> np.ndarray:
        """(d Phi / d lambda)^T v, hyper-shaped."""

    @abc.abstractmethod
    def jvp(self, state: InnerState, lam: HyperVector, data, z: np.ndarray, dlam: np.ndarray) -> np.ndarray:
        """(d Phi / d state) z + (d Phi / d lambda) dlam over the stacked state."""

    def initial_aux(self) -> np.ndarray:
        return np.zeros(self.aux_dim)


class InitMap(abc.ABC):
    """Initialization map producing the state the unroll starts from.

    The default derivative products are zero, which is correct for any
    hyperparameter-independent initialization. Override both when the start
    state depends on lambda.
    """

    param_dim: int
    aux_dim: int

    @abc.abstractmethod
    def init(self, lam: HyperVector) -> InnerState: ...

    def vjp_hyper(self, lam: HyperVector, v: np.ndarray) -> np.ndarray:
        return np.zeros(lam.dim)

    def jvp(self, lam: HyperVector, dlam: np.ndarray) -> np.ndarray:
        return np.zeros(self.param_dim + self.aux_dim)


@dataclass(frozen=True)
class BilevelProblem:
    """A truncated bilevel problem: minimize E at the end of a T-step unroll.

    ``T = 0`` is legal and means the outer objective is evaluated directly at
    the initialization. Data is held by handle so the same objectives serve
    full-batch and per-episode evaluation; use :meth:`with_data` to rebind.
    """

    inner: InnerObjective
    outer: OuterObjective
    dynamics: Dynamics
    init: InitMap
    T: int
    train_data: Any = None
    val_data: Any = None

    def __post_init__(self):
        if self.T < 0:
            raise NonPositiveUnroll(f"unroll length must be >= 0, got {self.T}")
        checks = [
            ("inner objective", self.inner.param_dim, "dynamics", self.dynamics.param_dim, "params"),
            ("inner objective", self.inner.param_dim, "outer objective", self.outer.param_dim, "params"),
            ("inner objective", self.inner.param_dim, "init map", self.init.param_dim, "params"),
            ("dynamics", self.dynamics.aux_dim, "init map", self.init.aux_dim, "aux"),
            ("inner objective", self.inner.hyper_dim, "outer objective", self.outer.hyper_dim, "hyper"),
            ("inner objective", self.inner.hyper_dim, "dynamics", self.dynamics.hyper_dim, "hyper"),
        ]
        for a_name, a_dim, b_name, b_dim, what in checks:
            if a_dim != b_dim:
                raise DimensionMismatch(
                    a_name, b_name, f"{what} dimension {a_dim} vs {b_dim}"
                )

    @property
    def hyper_dim(self) -> int:
        return self.inner.hyper_dim

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim

    def with_data(self, train_data, val_data) -> "BilevelProblem":
        return dataclasses.replace(self, train_data=train_data, val_data=val_data)


def assemble_problem(
    inner: InnerObjective,
    outer: OuterObjective,
    dynamics: Dynamics,
    init: InitMap,
    T: int,
    train_data=None,
    val_data=None,
) -> BilevelProblem:
    """Validated problem construction; dimension mismatches are rejected eagerly."""
    return BilevelProblem(inner, outer, dynamics, init, T, train_data, val_data)


def transpose_defect(
    dynamics: Dynamics,
    state: InnerState,
    lam: HyperVector,
    data,
    v: np.ndarray,
    z: np.ndarray,
    dlam: np.ndarray,
    eps: float = 1e-12,
) -> float:
    """Relative gap between <vjp(v), (z, dlam)> and <v, jvp(z, dlam)>."""
    lhs = float(
        dynamics.vjp_state(state, lam, data, v) @ z
        + dynamics.vjp_hyper(state, lam, data, v) @ dlam
    )
    rhs = float(v @ dynamics.jvp(state, lam, data, z, dlam))
    return abs(lhs - rhs) / (abs(rhs) + eps)


@dataclass(frozen=True)
class TransposeReport:
    max_defect: float
    probe_count: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_defect <= self.tolerance


def check_transpose_consistency(
    dynamics: Dynamics,
    state: InnerState,
    lam: HyperVector,
    data,
    probe_count: int = 20,
    seed: int = 0,
    tolerance: float = 1e-10,
) -> TransposeReport:
    """Probe the vjp/jvp pair with random vectors and report the worst defect.

    Both differentiation modes rely on these Jacobian products being exact
    transposes of each other; PASS means the max relative defect is within
    ``tolerance``.
    """
    rng = np.random.default_rng(seed)
    n, m = dynamics.state_dim, dynamics.hyper_dim
    worst = 0.0
    for _ in range(probe_count):
        v = rng.standard_normal(n)
        z = rng.standard_normal(n)
        dlam = rng.standard_normal(m)
        worst = max(worst, transpose_defect(dynamics, state, lam, data, v, z, dlam))
    return TransposeReport(worst, probe_count, tolerance)
