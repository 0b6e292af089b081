"""Concrete bilevel instantiations and their synthetic data generators.

All ground models are linear, so every Hessian-vector and mixed-derivative
product is analytic and the oracle comparisons are airtight. Binary labels
are stored as +-1 and losses are numerically-stable logistic forms.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import (
    BilevelProblem,
    HyperVector,
    InnerObjective,
    OuterObjective,
    assemble_problem,
)
from .dynamics import (
    GaussianInit,
    GradientDescent,
    HeavyBallMomentum,
    HyperLRGradientDescent,
    zero_init,
)
from .errors import (
    BadParams,
    BatchTooLarge,
    DimensionMismatch,
    EmptyTrainingSet,
    InconsistentFeatureDim,
    SingularData,
    WeightSegmentMismatch,
)
from .hypergrad import unroll


@dataclass(frozen=True)
class SupervisedData:
    """An (inputs, targets) pair; rows are examples."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be (n, p) and y must be (n,)")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "SupervisedData":
        return SupervisedData(self.X[idx], self.y[idx])


@dataclass(frozen=True)
class Episode:
    """One task's data, split into task-train and task-validation parts."""

    train: SupervisedData
    val: SupervisedData
    task_id: int = 0

    def __post_init__(self):
        if self.train.p != self.val.p:
            raise InconsistentFeatureDim(
                f"task {self.task_id}: train p={self.train.p}, val p={self.val.p}"
            )

    @property
    def p(self) -> int:
        return self.train.p


@dataclass(frozen=True)
class MetaDataset:
    """A collection of episodes sampled from a common task distribution."""

    episodes: tuple[Episode, ...]
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "episodes", tuple(self.episodes))
        if not self.episodes:
            raise ValueError("meta-dataset needs at least one episode")
        p = self.episodes[0].p
        for ep in self.episodes:
            if ep.p != p:
                raise InconsistentFeatureDim(
                    f"episode {ep.task_id} has p={ep.p}, expected {p}"
                )

    @property
    def n_tasks(self) -> int:
        return len(self.episodes)

    @property
    def p(self) -> int:
        return self.episodes[0].p


@dataclass(frozen=True)
class HyperCleanSpec:
    """Corruption bookkeeping for the data hyper-cleaning problem.

    The mask marks which training labels were flipped; it is never visible to
    the optimization and is used only to evaluate whether the learned weights
    separate corrupted from clean examples.
    """

    rho: float
    mask: np.ndarray
    weight_segment: str = "weights"

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        if not (0.0 <= self.rho < 1.0):
            raise BadParams(f"corruption fraction must be in [0, 1), got {self.rho}")
        expected = int(round(self.rho * mask.shape[0]))
        if int(mask.sum()) != expected:
            raise BadParams(
                f"mask marks {int(mask.sum())} examples, expected {expected}"
            )


@dataclass(frozen=True)
class HyperReprSpec:
    """Shape of the cross-task representation map and optional ground truth."""

    k: int
    p: int
    repr_segment: str = "repr"
    true_basis: np.ndarray = None

    def __post_init__(self):
        if not (0 < self.k <= self.p):
            raise BadParams(f"need 0 < k <= p, got k={self.k}, p={self.p}")


# Loss, d/dz, and d^2/dz^2 of log(1 + exp(-y z)) for y in {-1, +1}, split so
# each derivative product pays only for the transcendentals it needs.
def _logistic_loss(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, -y * z)


def _logistic_dz(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -y * expit(-y * z)


def _logistic_ddz(z: np.ndarray) -> np.ndarray:
    return expit(z) * expit(-z)


# ---------------------------------------------------------------------------
# Ridge regression: analytic everything, the workhorse of the oracle suite.

class RidgeInner(InnerObjective):
    """L(w) = ||X w - y||^2 + reg * ||w||^2 with reg a hyperparameter."""

    def __init__(self, param_dim: int, hyper_dim: int, reg_segment: str = "reg"):
        self.param_dim = param_dim
        self.hyper_dim = hyper_dim
        self.reg_segment = reg_segment

    def _reg(self, lam: HyperVector) -> tuple[float, int]:
        seg = lam.segment(self.reg_segment)
        return float(lam.values[seg.offset]), seg.offset

    def value(self, w, lam, data):
        r = data.X @ w - data.y
        reg, _ = self._reg(lam)
        return float(r @ r + reg * (w @ w))

    def grad_w(self, w, lam, data):
        reg, _ = self._reg(lam)
        return 2.0 * data.X.T @ (data.X @ w - data.y) + 2.0 * reg * w

    def hvp(self, w, lam, data, v):
        reg, _ = self._reg(lam)
        return 2.0 * data.X.T @ (data.X @ v) + 2.0 * reg * v

    def mixed_vjp(self, w, lam, data, v):
        _, k = self._reg(lam)
        out = np.zeros(lam.dim)
        out[k] = 2.0 * float(w @ v)
        return out

    def mixed_jvp(self, w, lam, data, dlam):
        _, k = self._reg(lam)
        return 2.0 * w * dlam[k]


class MeanSquaredOuter(OuterObjective):
    """E(w) = ||X w - y||^2 / n on the validation split; no explicit lambda term."""

    def __init__(self, param_dim: int, hyper_dim: int):
        self.param_dim = param_dim
        self.hyper_dim = hyper_dim

    def value(self, w, lam, data):
        r = data.X @ w - data.y
        return float(r @ r) / data.n

    def grad_w(self, w, lam, data):
        return 2.0 * data.X.T @ (data.X @ w - data.y) / data.n

    def grad_hyper(self, w, lam, data):
        return np.zeros(lam.dim)


def _make_dynamics(inner: InnerObjective, kind: str, eta: float, mu: float):
    if kind == "gd":
        return GradientDescent(inner, eta)
    if kind == "momentum":
        return HeavyBallMomentum(inner, eta, mu)
    if kind == "hyper_lr_gd":
        return HyperLRGradientDescent(inner)
    raise ValueError(f"unknown dynamics kind {kind!r}")


def _lam_parts(base_parts: list, kind: str, eta: float) -> list:
    if kind == "hyper_lr_gd":
        return base_parts + [("log_lr", [np.log(eta)], None, None)]
    return base_parts


def ridge_problem(
    train: SupervisedData,
    val: SupervisedData,
    *,
    T: int,
    eta: float = 0.01,
    dynamics: str = "gd",
    mu: float = 0.9,
    reg0: float = 1.0,
    reg_lower: float = 1e-8,
) -> tuple[BilevelProblem, HyperVector]:
    """Ridge training loss against validation MSE, with scalar regularization.

    Returns the assembled problem and a feasible starting hypervector whose
    box enforces reg >= reg_lower. Warns (does not fail) when the training
    design matrix has a zero column: regularization keeps the inner problem
    well posed anyway.
    """
    if train.n == 0:
        raise EmptyTrainingSet("ridge problem needs training examples")
    if np.any(np.all(train.X == 0.0, axis=0)):
        warnings.warn("training design matrix has a zero column", SingularData)
    d = train.p
    lam0 = HyperVector.from_parts(
        _lam_parts([("reg", [reg0], reg_lower, None)], dynamics, eta)
    )
    inner = RidgeInner(d, lam0.dim)
    dyn = _make_dynamics(inner, dynamics, eta, mu)
    problem = assemble_problem(
        inner, MeanSquaredOuter(d, lam0.dim), dyn,
        zero_init(d, dyn.aux_dim), T, train, val,
    )
    return problem, lam0


# ---------------------------------------------------------------------------
# Data hyper-cleaning: one weight per training example.

class WeightedLogisticInner(InnerObjective):
    """L(w) = sum_i weight_i * logistic(x_i, y_i; w) + ridge_coef * ||w||^2.

    The small fixed ridge keeps the inner problem strongly convex even when
    most weights are near zero.
    """

    def __init__(self, param_dim, hyper_dim, n_train, weight_segment="weights", ridge_coef=1e-4):
        self.param_dim = param_dim
        self.hyper_dim = hyper_dim
        self.n_train = n_train
        self.weight_segment = weight_segment
        self.ridge_coef = ridge_coef

    def _weights(self, lam: HyperVector, data) -> np.ndarray:
        w = lam.get(self.weight_segment)
        if w.shape[0] != data.n:
            raise WeightSegmentMismatch(
                f"{w.shape[0]} example weights for {data.n} training examples"
            )
        return w

    def value(self, w, lam, data):
        wts = self._weights(lam, data)
        loss = _logistic_loss(data.X @ w, data.y)
        return float(wts @ loss + self.ridge_coef * (w @ w))

    def grad_w(self, w, lam, data):
        wts = self._weights(lam, data)
        dz = _logistic_dz(data.X @ w, data.y)
        return data.X.T @ (wts * dz) + 2.0 * self.ridge_coef * w

    def hvp(self, w, lam, data, v):
        wts = self._weights(lam, data)
        ddz = _logistic_ddz(data.X @ w)
        return data.X.T @ (wts * ddz * (data.X @ v)) + 2.0 * self.ridge_coef * v

    def mixed_vjp(self, w, lam, data, v):
        self._weights(lam, data)
        dz = _logistic_dz(data.X @ w, data.y)
        out = np.zeros(lam.dim)
        out[lam.segment(self.weight_segment).slice] = dz * (data.X @ v)
        return out

    def mixed_jvp(self, w, lam, data, dlam):
        self._weights(lam, data)
        dz = _logistic_dz(data.X @ w, data.y)
        dw = dlam[lam.segment(self.weight_segment).slice]
        return data.X.T @ (dw * dz)


class MeanLogisticOuter(OuterObjective):
    """Unweighted mean validation cross-entropy of the linear classifier."""

    def __init__(self, param_dim: int, hyper_dim: int):
        self.param_dim = param_dim
        self.hyper_dim = hyper_dim

    def value(self, w, lam, data):
        return float(np.mean(_logistic_loss(data.X @ w, data.y)))

    def grad_w(self, w, lam, data):
        return data.X.T @ _logistic_dz(data.X @ w, data.y) / data.n

    def grad_hyper(self, w, lam, data):
        return np.zeros(lam.dim)


def hyperclean_problem(
    train: SupervisedData,
    val: SupervisedData,
    spec: HyperCleanSpec,
    *,
    T: int,
    eta: float = 0.5,
    dynamics: str = "gd",
    mu: float = 0.9,
    ridge_coef: float = 1e-4,
    w0: float = 1.0,
) -> tuple[BilevelProblem, HyperVector]:
    """Per-example loss weights as hyperparameters, boxed to [0, 1]."""
    if train.n == 0:
        raise EmptyTrainingSet("hyper-cleaning needs training examples")
    if spec.mask.shape[0] != train.n:
        raise WeightSegmentMismatch(
            f"corruption mask has {spec.mask.shape[0]} entries for {train.n} examples"
        )
    d = train.p
    lam0 = HyperVector.from_parts(
        _lam_parts(
            [(spec.weight_segment, np.full(train.n, float(w0)), 0.0, 1.0)],
            dynamics, eta,
        )
    )
    inner = WeightedLogisticInner(d, lam0.dim, train.n, spec.weight_segment, ridge_coef)
    dyn = _make_dynamics(inner, dynamics, eta, mu)
    problem = assemble_problem(
        inner, MeanLogisticOuter(d, lam0.dim), dyn,
        zero_init(d, dyn.aux_dim), T, train, val,
    )
    return problem, lam0


# ---------------------------------------------------------------------------
# Hyper-representation meta-learning: shared linear map, episode-local heads.

class HyperReprInner(InnerObjective):
    """Sum over the episode batch of each head's training cross-entropy.

    Heads are stacked into one parameter vector of length batch * k; the
    representation enters only through the feature map x -> R x with R read
    from the hypervector. Gradients are block-separable, so joint steps equal
    independent per-episode unrolls.
    """

    def __init__(self, k, p, batch_size, hyper_dim, repr_segment="repr"):
        self.k = k
        self.p = p
        self.batch_size = batch_size
        self.param_dim = batch_size * k
        self.hyper_dim = hyper_dim
        self.repr_segment = repr_segment

    def _repr(self, lam: HyperVector) -> np.ndarray:
        return lam.get(self.repr_segment).reshape(self.k, self.p)

    def _blocks(self, w, data):
        if len(data) != self.batch_size:
            raise DimensionMismatch(
                "episode batch", "inner objective",
                f"{len(data)} episodes vs batch size {self.batch_size}",
            )
        for j, ep in enumerate(data):
            yield w[j * self.k:(j + 1) * self.k], ep

    def value(self, w, lam, data):
        R = self._repr(lam)
        total = 0.0
        for wj, ep in self._blocks(w, data):
            loss = _logistic_loss(ep.train.X @ R.T @ wj, ep.train.y)
            total += float(np.mean(loss))
        return total

    def grad_w(self, w, lam, data):
        R = self._repr(lam)
        out = np.empty(self.param_dim)
        for j, (wj, ep) in enumerate(self._blocks(w, data)):
            F = ep.train.X @ R.T
            dz = _logistic_dz(F @ wj, ep.train.y)
            out[j * self.k:(j + 1) * self.k] = F.T @ dz / ep.train.n
        return out

    def hvp(self, w, lam, data, v):
        R = self._repr(lam)
        out = np.empty(self.param_dim)
        for j, (wj, ep) in enumerate(self._blocks(w, data)):
            vj = v[j * self.k:(j + 1) * self.k]
            F = ep.train.X @ R.T
            ddz = _logistic_ddz(F @ wj)
            out[j * self.k:(j + 1) * self.k] = F.T @ (ddz * (F @ vj)) / ep.train.n
        return out

    def mixed_vjp(self, w, lam, data, v):
        R = self._repr(lam)
        M = np.zeros((self.k, self.p))
        for j, (wj, ep) in enumerate(self._blocks(w, data)):
            vj = v[j * self.k:(j + 1) * self.k]
            X = ep.train.X
            F = X @ R.T
            z = F @ wj
            dz = _logistic_dz(z, ep.train.y)
            ddz = _logistic_ddz(z)
            a = F @ vj
            M += (np.outer(wj, X.T @ (ddz * a)) + np.outer(vj, X.T @ dz)) / ep.train.n
        out = np.zeros(lam.dim)
        out[lam.segment(self.repr_segment).slice] = M.ravel()
        return out

    def mixed_jvp(self, w, lam, data, dlam):
        R = self._repr(lam)
        dR = dlam[lam.segment(self.repr_segment).slice].reshape(self.k, self.p)
        out = np.empty(self.param_dim)
        for j, (wj, ep) in enumerate(self._blocks(w, data)):
            X = ep.train.X
            F = X @ R.T
            G = X @ dR.T
            z = F @ wj
            dz = _logistic_dz(z, ep.train.y)
            ddz = _logistic_ddz(z)
            out[j * self.k:(j + 1) * self.k] = (F.T @ (ddz * (G @ wj)) + G.T @ dz) / ep.train.n
        return out


class HyperReprOuter(OuterObjective):
    """Mean over episodes of the validation cross-entropy at the adapted heads.

    Unlike the plain HO objectives this depends explicitly on the
    hyperparameters through the shared representation, so grad_hyper is
    nonzero and analytic.
    """

    def __init__(self, k, p, batch_size, hyper_dim, repr_segment="repr"):
        self.k = k
        self.p = p
        self.batch_size = batch_size
        self.param_dim = batch_size * k
        self.hyper_dim = hyper_dim
        self.repr_segment = repr_segment

    def _repr(self, lam):
        return lam.get(self.repr_segment).reshape(self.k, self.p)

    def _blocks(self, w, data):
        if len(data) != self.batch_size:
            raise DimensionMismatch(
                "episode batch", "outer objective",
                f"{len(data)} episodes vs batch size {self.batch_size}",
            )
        for j, ep in enumerate(data):
            yield w[j * self.k:(j + 1) * self.k], ep

    def value(self, w, lam, data):
        R = self._repr(lam)
        total = 0.0
        for wj, ep in self._blocks(w, data):
            loss = _logistic_loss(ep.val.X @ R.T @ wj, ep.val.y)
            total += float(np.mean(loss))
        return total / self.batch_size

    def grad_w(self, w, lam, data):
        R = self._repr(lam)
        out = np.empty(self.param_dim)
        for j, (wj, ep) in enumerate(self._blocks(w, data)):
            F = ep.val.X @ R.T
            dz = _logistic_dz(F @ wj, ep.val.y)
            out[j * self.k:(j + 1) * self.k] = F.T @ dz / (self.batch_size * ep.val.n)
        return out

    def grad_hyper(self, w, lam, data):
        R = self._repr(lam)
        M = np.zeros((self.k, self.p))
        for wj, ep in self._blocks(w, data):
            dz = _logistic_dz(ep.val.X @ R.T @ wj, ep.val.y)
            M += np.outer(wj, ep.val.X.T @ dz) / (self.batch_size * ep.val.n)
        out = np.zeros(lam.dim)
        out[lam.segment(self.repr_segment).slice] = M.ravel()
        return out


def hyperrepr_problem(
    meta: MetaDataset,
    spec: HyperReprSpec,
    *,
    batch_size: int,
    T: int,
    eta: float = 0.5,
    dynamics: str = "gd",
    mu: float = 0.9,
    repr_seed: int = 0,
    repr_scale: float = None,
) -> tuple[BilevelProblem, HyperVector]:
    """Shared k x p representation as the outer variable, episode-local heads inner.

    The returned problem is bound to the first ``batch_size`` episodes; the
    outer loop rebinds a freshly sampled batch each step. Heads are
    cold-started from zero every unroll.
    """
    if spec.p != meta.p:
        raise InconsistentFeatureDim(f"spec p={spec.p} but meta-dataset p={meta.p}")
    if batch_size < 1 or batch_size > meta.n_tasks:
        raise BatchTooLarge(f"batch size {batch_size} for {meta.n_tasks} episodes")
    scale = repr_scale if repr_scale is not None else 1.0 / np.sqrt(spec.p)
    rng = np.random.default_rng(repr_seed)
    R0 = scale * rng.standard_normal((spec.k, spec.p))
    lam0 = HyperVector.from_parts(
        _lam_parts([(spec.repr_segment, R0.ravel(), None, None)], dynamics, eta)
    )
    inner = HyperReprInner(spec.k, spec.p, batch_size, lam0.dim, spec.repr_segment)
    outer = HyperReprOuter(spec.k, spec.p, batch_size, lam0.dim, spec.repr_segment)
    dyn = _make_dynamics(inner, dynamics, eta, mu)
    batch = tuple(meta.episodes[:batch_size])
    problem = assemble_problem(
        inner, outer, dyn, zero_init(inner.param_dim, dyn.aux_dim), T, batch, batch
    )
    return problem, lam0


def sample_meta_batch(meta: MetaDataset, batch: int, seed) -> tuple[Episode, ...]:
    """Uniform sample of episodes without replacement; deterministic given seed."""
    if batch > meta.n_tasks:
        raise BatchTooLarge(f"requested {batch} episodes, have {meta.n_tasks}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(meta.n_tasks, size=batch, replace=False)
    return tuple(meta.episodes[i] for i in idx)


class EpochSampler:
    """Without-replacement batches within a pass, reshuffled across passes."""

    def __init__(self, meta: MetaDataset, batch: int, rng: np.random.Generator):
        if batch > meta.n_tasks:
            raise BatchTooLarge(f"requested {batch} episodes, have {meta.n_tasks}")
        self.meta = meta
        self.batch = batch
        self.rng = rng
        self._order = rng.permutation(meta.n_tasks)
        self._pos = 0

    def next_batch(self) -> tuple[Episode, ...]:
        if self._pos + self.batch > self.meta.n_tasks:
            self._order = self.rng.permutation(self.meta.n_tasks)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return tuple(self.meta.episodes[i] for i in idx)


def evaluate_meta(problem_single: BilevelProblem, lam: HyperVector, episodes) -> float:
    """Mean post-adaptation validation loss over episodes.

    ``problem_single`` must be built with batch_size=1; each episode's head is
    unrolled cold and scored on the episode's validation split.
    """
    total = 0.0
    for ep in episodes:
        p = problem_single.with_data((ep,), (ep,))
        traj = unroll(p, lam)
        total += p.outer.value(traj.final.params, lam, p.val_data)
    return total / len(episodes)


# ---------------------------------------------------------------------------
# Synthetic data generators. All deterministic given their seed.

def _gaussian_2class(n: int, dim: int, separation: float, rng) -> SupervisedData:
    y = rng.choice([-1.0, 1.0], size=n)
    mu = (separation / 2.0) / np.sqrt(dim) * np.ones(dim)
    X = rng.standard_normal((n, dim)) + y[:, None] * mu[None, :]
    return SupervisedData(X, y)


def _balanced_task_episode(beta, n_per_class_tr, n_per_class_val, rng, task_id):
    p = beta.shape[0]
    need = n_per_class_tr + n_per_class_val
    pos, neg = [], []
    while len(pos) < need or len(neg) < need:
        X = rng.standard_normal((4 * need, p))
        labels = np.sign(X @ beta)
        for x, lab in zip(X, labels):
            if lab > 0 and len(pos) < need:
                pos.append(x)
            elif lab < 0 and len(neg) < need:
                neg.append(x)
    def pack(lo, hi):
        Xs = np.vstack([pos[lo:hi], neg[lo:hi]])
        ys = np.concatenate([np.ones(hi - lo), -np.ones(hi - lo)])
        return SupervisedData(Xs, ys)
    return Episode(
        pack(0, n_per_class_tr),
        pack(n_per_class_tr, need),
        task_id,
    )


def generate_synthetic(kind: str, params: dict, seed: int):
    """Deterministic synthetic data for the three shipped problem families.

    kinds and returned dict keys:
      gaussians-2class       -> {train, val}
      hyperclean-corrupted   -> {train, val, spec} (exactly round(rho*n) labels flipped)
      shared-subspace-tasks  -> {meta, holdout} (episodes share a true k*-dim subspace)
    """
    rng = np.random.default_rng(seed)
    try:
        if kind == "gaussians-2class":
            n_train = int(params["n_train"])
            n_val = int(params["n_val"])
            dim = int(params["dim"])
            separation = float(params.get("separation", 2.0))
            if min(n_train, n_val, dim) <= 0 or separation < 0:
                raise BadParams(f"bad sizes for {kind}: {params}")
            return {
                "train": _gaussian_2class(n_train, dim, separation, rng),
                "val": _gaussian_2class(n_val, dim, separation, rng),
            }

        if kind == "hyperclean-corrupted":
            rho = float(params.get("rho", 0.3))
            if not (0.0 <= rho < 1.0):
                raise BadParams(f"corruption fraction must be in [0, 1), got {rho}")
            base = generate_synthetic(
                "gaussians-2class",
                {k: params[k] for k in ("n_train", "n_val", "dim")}
                | {"separation": params.get("separation", 2.0)},
                seed,
            )
            train = base["train"]
            n_flip = int(round(rho * train.n))
            flip_idx = rng.choice(train.n, size=n_flip, replace=False)
            mask = np.zeros(train.n, dtype=bool)
            mask[flip_idx] = True
            y = train.y.copy()
            y[mask] *= -1.0
            return {
                "train": SupervisedData(train.X, y),
                "val": base["val"],
                "spec": HyperCleanSpec(rho, mask),
            }

        if kind == "shared-subspace-tasks":
            n_tasks = int(params["tasks"])
            n_holdout = int(params.get("holdout_tasks", 0))
            shots = int(params["shots"])
            val_shots = int(params.get("val_shots", shots))
            p = int(params["dim"])
            k_true = int(params["k_true"])
            if min(n_tasks, shots, val_shots, p, k_true) <= 0 or k_true > p:
                raise BadParams(f"bad sizes for {kind}: {params}")
            basis, _ = np.linalg.qr(rng.standard_normal((p, k_true)))
            def make(count, id_offset):
                eps = []
                for j in range(count):
                    beta = basis @ rng.standard_normal(k_true)
                    eps.append(
                        _balanced_task_episode(beta, shots, val_shots, rng, id_offset + j)
                    )
                return eps
            descriptor = {
                "seed": seed, "tasks": n_tasks, "shots": shots,
                "val_shots": val_shots, "classes": 2, "dim": p,
                "k_true": k_true, "true_basis": basis,
            }
            meta = MetaDataset(make(n_tasks, 0), descriptor)
            out = {"meta": meta}
            if n_holdout > 0:
                out["holdout"] = MetaDataset(make(n_holdout, n_tasks), descriptor)
            return out
    except KeyError as exc:
        raise BadParams(f"missing parameter {exc} for kind {kind!r}") from exc

    raise BadParams(f"unknown synthetic kind {kind!r}")


def save_supervised_csv(data: SupervisedData, path) -> None:
    """One split per file: feature columns then the label column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(data.p)] + ["label"])
        for row, label in zip(data.X, data.y):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(label))])


def save_mask_csv(mask: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["corrupted"])
        for flag in np.asarray(mask, dtype=bool):
            writer.writerow([int(flag)])
