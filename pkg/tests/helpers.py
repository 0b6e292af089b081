"""Shared problem factories, test doubles, and instrumentation."""
from __future__ import annotations

import numpy as np

from unrolldiff import (
    HyperVector,
    InnerState,
    SupervisedData,
    generate_synthetic,
    hyperclean_problem,
    hyperrepr_problem,
    jitter,
    ridge_problem,
)
from unrolldiff.core import InitMap, InnerObjective, OuterObjective
from unrolldiff.problems import HyperReprSpec


def rel_inf(ref: np.ndarray, other: np.ndarray) -> float:
    return float(np.max(np.abs(np.atleast_1d(ref) - np.atleast_1d(other)))
                 / (np.max(np.abs(np.atleast_1d(ref))) + 1e-12))


# ---------------------------------------------------------------------------
# Tiny analytic scalar problems used for hand-checkable examples.

class ShiftQuadInner(InnerObjective):
    """L(w) = (w - shift)^2 with the shift read from the hypervector."""

    def __init__(self, hyper_dim: int = 1, segment: str = "shift"):
        self.param_dim = 1
        self.hyper_dim = hyper_dim
        self.segment = segment

    def _idx(self, lam):
        return lam.segment(self.segment).offset

    def value(self, w, lam, data):
        return float((w[0] - lam.values[self._idx(lam)]) ** 2)

    def grad_w(self, w, lam, data):
        return np.array([2.0 * (w[0] - lam.values[self._idx(lam)])])

    def hvp(self, w, lam, data, v):
        return 2.0 * v

    def mixed_vjp(self, w, lam, data, v):
        out = np.zeros(lam.dim)
        out[self._idx(lam)] = -2.0 * v[0]
        return out

    def mixed_jvp(self, w, lam, data, dlam):
        return np.array([-2.0 * dlam[self._idx(lam)]])


class SquareDistOuter(OuterObjective):
    """E(w) = (w - target)^2, no explicit hyperparameter dependence."""

    def __init__(self, target: float, hyper_dim: int = 1):
        self.param_dim = 1
        self.hyper_dim = hyper_dim
        self.target = target

    def value(self, w, lam, data):
        return float((w[0] - self.target) ** 2)

    def grad_w(self, w, lam, data):
        return np.array([2.0 * (w[0] - self.target)])

    def grad_hyper(self, w, lam, data):
        return np.zeros(lam.dim)


class OneDQuadInner(InnerObjective):
    """L(w) = (a/2) w^2 + c w; hyperparameters affect the dynamics only."""

    def __init__(self, a: float, c: float, hyper_dim: int = 1):
        self.param_dim = 1
        self.hyper_dim = hyper_dim
        self.a = a
        self.c = c

    def value(self, w, lam, data):
        return float(0.5 * self.a * w[0] ** 2 + self.c * w[0])

    def grad_w(self, w, lam, data):
        return np.array([self.a * w[0] + self.c])

    def hvp(self, w, lam, data, v):
        return self.a * v

    def mixed_vjp(self, w, lam, data, v):
        return np.zeros(lam.dim)

    def mixed_jvp(self, w, lam, data, dlam):
        return np.zeros(1)


class OneDQuadOuter(OuterObjective):
    """Same quadratic as the inner loss; its post-step value scores the step size."""

    def __init__(self, a: float, c: float, hyper_dim: int = 1):
        self.param_dim = 1
        self.hyper_dim = hyper_dim
        self.a = a
        self.c = c

    def value(self, w, lam, data):
        return float(0.5 * self.a * w[0] ** 2 + self.c * w[0])

    def grad_w(self, w, lam, data):
        return np.array([self.a * w[0] + self.c])

    def grad_hyper(self, w, lam, data):
        return np.zeros(lam.dim)


def scalar_shift_lam(shift: float, extra_log_lr: float = None) -> HyperVector:
    parts = [("shift", [shift], None, None)]
    if extra_log_lr is not None:
        parts.append(("log_lr", [extra_log_lr], None, None))
    return HyperVector.from_parts(parts)


# ---------------------------------------------------------------------------
# Init-map doubles.

class FixedStateInit(InitMap):
    """Reproduce an exact carried state, including aux."""

    def __init__(self, state: InnerState):
        self.state = state
        self.param_dim = state.param_dim
        self.aux_dim = state.aux_dim

    def init(self, lam):
        return self.state


class LinearInit(InitMap):
    """params = M @ lam, a hyperparameter-dependent initialization."""

    def __init__(self, M: np.ndarray, aux_dim: int = 0):
        self.M = np.asarray(M, dtype=np.float64)
        self.param_dim = self.M.shape[0]
        self.aux_dim = aux_dim

    def init(self, lam):
        return InnerState(self.M @ lam.values, np.zeros(self.aux_dim))

    def vjp_hyper(self, lam, v):
        return self.M.T @ v[: self.param_dim]

    def jvp(self, lam, dlam):
        return np.concatenate([self.M @ dlam, np.zeros(self.aux_dim)])


# ---------------------------------------------------------------------------
# Instrumentation: counting proxies for evaluators and dynamics.

class CountingInner(InnerObjective):
    def __init__(self, inner: InnerObjective):
        self.inner = inner
        self.param_dim = inner.param_dim
        self.hyper_dim = inner.hyper_dim
        self.counts = {"value": 0, "grad_w": 0, "hvp": 0, "mixed_vjp": 0, "mixed_jvp": 0}

    def derivative_products(self) -> int:
        return sum(v for k, v in self.counts.items() if k != "value")

    def value(self, w, lam, data):
        self.counts["value"] += 1
        return self.inner.value(w, lam, data)

    def grad_w(self, w, lam, data):
        self.counts["grad_w"] += 1
        return self.inner.grad_w(w, lam, data)

    def hvp(self, w, lam, data, v):
        self.counts["hvp"] += 1
        return self.inner.hvp(w, lam, data, v)

    def mixed_vjp(self, w, lam, data, v):
        self.counts["mixed_vjp"] += 1
        return self.inner.mixed_vjp(w, lam, data, v)

    def mixed_jvp(self, w, lam, data, dlam):
        self.counts["mixed_jvp"] += 1
        return self.inner.mixed_jvp(w, lam, data, dlam)


class CountingDynamics:
    def __init__(self, dyn):
        self.dyn = dyn
        self.param_dim = dyn.param_dim
        self.aux_dim = dyn.aux_dim
        self.hyper_dim = dyn.hyper_dim
        self.state_dim = dyn.state_dim
        self.counts = {"step": 0, "vjp_state": 0, "vjp_hyper": 0, "jvp": 0}

    def reset(self):
        for k in self.counts:
            self.counts[k] = 0

    def step(self, state, lam, data):
        self.counts["step"] += 1
        return self.dyn.step(state, lam, data)

    def vjp_state(self, state, lam, data, v):
        self.counts["vjp_state"] += 1
        return self.dyn.vjp_state(state, lam, data, v)

    def vjp_hyper(self, state, lam, data, v):
        self.counts["vjp_hyper"] += 1
        return self.dyn.vjp_hyper(state, lam, data, v)

    def jvp(self, state, lam, data, z, dlam):
        self.counts["jvp"] += 1
        return self.dyn.jvp(state, lam, data, z, dlam)


# ---------------------------------------------------------------------------
# Problem factories at desk scale, shared by module tests and acceptance.

def ridge_data(seed: int, n_train: int = 30, n_val: int = 30, d: int = 5, noise: float = 0.1):
    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(d)
    def split(n):
        X = rng.standard_normal((n, d))
        return SupervisedData(X, X @ beta + noise * rng.standard_normal(n))
    return split(n_train), split(n_val)


def make_ridge(seed=0, n_train=30, n_val=30, d=5, T=10, dynamics="gd", eta=0.005,
               reg0=0.5, noise=0.1):
    train, val = ridge_data(seed, n_train, n_val, d, noise)
    return ridge_problem(train, val, T=T, eta=eta, dynamics=dynamics, reg0=reg0)


def make_hyperclean(seed=0, n_train=30, n_val=30, d=8, T=10, dynamics="gd", eta=0.02,
                    rho=0.3, w0=0.5):
    data = generate_synthetic(
        "hyperclean-corrupted",
        {"n_train": n_train, "n_val": n_val, "dim": d, "rho": rho, "separation": 2.0},
        seed,
    )
    problem, lam0 = hyperclean_problem(
        data["train"], data["val"], data["spec"], T=T, eta=eta, dynamics=dynamics, w0=w0
    )
    return problem, lam0, data


def make_hyperrepr(seed=0, tasks=6, shots=6, p=6, k=2, batch=2, T=6, dynamics="gd", eta=0.5):
    gen = generate_synthetic(
        "shared-subspace-tasks",
        {"tasks": tasks, "shots": shots, "dim": p, "k_true": k},
        seed,
    )
    spec = HyperReprSpec(k=k, p=p, true_basis=gen["meta"].descriptor["true_basis"])
    problem, lam0 = hyperrepr_problem(
        gen["meta"], spec, batch_size=batch, T=T, eta=eta, dynamics=dynamics
    )
    return problem, lam0, gen["meta"]


# Feasible-draw halfwidths per problem kind, strictly interior for FD probes.
_JITTER = {
    "ridge": ({"reg": 0.4, "log_lr": 0.3}, 1e-3),
    "hyperclean": ({"weights": 0.45, "log_lr": 0.3}, 0.02),
    "hyperrepr": ({"repr": 0.3, "log_lr": 0.3}, 0.0),
}


def sample_feasible(kind: str, lam0: HyperVector, rng: np.random.Generator) -> HyperVector:
    widths, margin = _JITTER[kind]
    widths = {seg.name: widths[seg.name] for seg in lam0.segments}
    return jitter(lam0, rng, widths, margin=margin)


def problem_matrix(T: int):
    """Every shipped problem x dynamics combination at test scale.

    Yields (label, problem, lam0, kind) tuples; lambda draws should go through
    :func:`sample_feasible` with the returned kind.
    """
    for dyn in ("gd", "momentum", "hyper_lr_gd"):
        prob, lam0 = make_ridge(seed=11, T=T, dynamics=dyn)
        yield f"ridge/{dyn}", prob, lam0, "ridge"
        prob, lam0, _ = make_hyperclean(seed=12, T=T, dynamics=dyn)
        yield f"hyperclean/{dyn}", prob, lam0, "hyperclean"
        prob, lam0, _ = make_hyperrepr(seed=13, T=T, dynamics=dyn)
        yield f"hyperrepr/{dyn}", prob, lam0, "hyperrepr"
