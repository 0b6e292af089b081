"""Concrete inner step maps: plain GD, GD with a learnable step size, heavy ball.

Each dynamics supplies all three Jacobian products analytically, built from
the inner objective's Hessian-vector and mixed-derivative products. Step
functions are stateless and safe for concurrent use.
"""
from __future__ import annotations

import numpy as np

from .core import Dynamics, HyperVector, InitMap, InnerObjective, InnerState
from .errors import NonFiniteGradient


def _checked_grad(inner: InnerObjective, w: np.ndarray, lam: HyperVector, data) -> np.ndarray:
    g = inner.grad_w(w, lam, data)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("inner gradient contains NaN/Inf entries")
    return g


class GradientDescent(Dynamics):
    """w' = w - eta * grad L(w); no auxiliary state."""

    def __init__(self, inner: InnerObjective, eta: float):
        if not (np.isfinite(eta) and eta > 0):
            raise ValueError(f"step size must be finite and positive, got {eta}")
        self.inner = inner
        self.eta = float(eta)
        self.param_dim = inner.param_dim
        self.aux_dim = 0
        self.hyper_dim = inner.hyper_dim

    def step(self, state: InnerState, lam: HyperVector, data) -> InnerState:
        g = _checked_grad(self.inner, state.params, lam, data)
        return InnerState(state.params - self.eta * g)

    def vjp_state(self, state, lam, data, v):
        return v - self.eta * self.inner.hvp(state.params, lam, data, v)

    def vjp_hyper(self, state, lam, data, v):
        return -self.eta * self.inner.mixed_vjp(state.params, lam, data, v)

    def jvp(self, state, lam, data, z, dlam):
        bend = self.inner.hvp(state.params, lam, data, z) \
            + self.inner.mixed_jvp(state.params, lam, data, dlam)
        return z - self.eta * bend


class HyperLRGradientDescent(Dynamics):
    """GD whose step size is a hyperparameter, eta = exp(theta).

    ``theta`` lives in a length-1 segment of the hypervector; the log-domain
    parameterization keeps eta positive without projection. The step map picks
    up an extra dPhi/dtheta = -exp(theta) * grad L term on that coordinate.
    """

    def __init__(self, inner: InnerObjective, lr_segment: str = "log_lr"):
        self.inner = inner
        self.lr_segment = lr_segment
        self.param_dim = inner.param_dim
        self.aux_dim = 0
        self.hyper_dim = inner.hyper_dim

    def _lr_index(self, lam: HyperVector) -> int:
        seg = lam.segment(self.lr_segment)
        if seg.length != 1:
            raise ValueError(f"segment {self.lr_segment!r} must have length 1")
        return seg.offset

    def step(self, state: InnerState, lam: HyperVector, data) -> InnerState:
        eta = np.exp(lam.values[self._lr_index(lam)])
        g = _checked_grad(self.inner, state.params, lam, data)
        return InnerState(state.params - eta * g)

    def vjp_state(self, state, lam, data, v):
        eta = np.exp(lam.values[self._lr_index(lam)])
        return v - eta * self.inner.hvp(state.params, lam, data, v)

    def vjp_hyper(self, state, lam, data, v):
        k = self._lr_index(lam)
        eta = np.exp(lam.values[k])
        out = -eta * self.inner.mixed_vjp(state.params, lam, data, v)
        g = _checked_grad(self.inner, state.params, lam, data)
        out[k] += -eta * float(g @ v)
        return out

    def jvp(self, state, lam, data, z, dlam):
        k = self._lr_index(lam)
        eta = np.exp(lam.values[k])
        g = _checked_grad(self.inner, state.params, lam, data)
        bend = self.inner.hvp(state.params, lam, data, z) \
            + self.inner.mixed_jvp(state.params, lam, data, dlam)
        return z - eta * bend - eta * g * dlam[k]


class HeavyBallMomentum(Dynamics):
    """v' = mu*v + grad L(w);  w' = w - eta*v'.

    The velocity is auxiliary state carried in ``InnerState.aux``; the
    adjoint/tangent recursions run over the stacked [w; v] vector. mu = 0
    reproduces plain gradient descent exactly.
    """

    def __init__(self, inner: InnerObjective, eta: float, mu: float):
        if not (np.isfinite(eta) and eta > 0):
            raise ValueError(f"step size must be finite and positive, got {eta}")
        if not (0.0 <= mu < 1.0):
            raise ValueError(f"momentum coefficient must be in [0, 1), got {mu}")
        self.inner = inner
        self.eta = float(eta)
        self.mu = float(mu)
        self.param_dim = inner.param_dim
        self.aux_dim = inner.param_dim
        self.hyper_dim = inner.hyper_dim

    def step(self, state: InnerState, lam: HyperVector, data) -> InnerState:
        g = _checked_grad(self.inner, state.params, lam, data)
        vel = self.mu * state.aux + g
        return InnerState(state.params - self.eta * vel, vel)

    def _split(self, vec: np.ndarray):
        d = self.param_dim
        return vec[:d], vec[d:]

    def vjp_state(self, state, lam, data, v):
        # Jacobian blocks: dw'/dw = I - eta*H, dw'/dv = -eta*mu*I,
        #                  dv'/dw = H,         dv'/dv = mu*I.
        a, b = self._split(v)
        hterm = self.inner.hvp(state.params, lam, data, b - self.eta * a)
        return np.concatenate([a + hterm, self.mu * (b - self.eta * a)])

    def vjp_hyper(self, state, lam, data, v):
        a, b = self._split(v)
        return self.inner.mixed_vjp(state.params, lam, data, b - self.eta * a)

    def jvp(self, state, lam, data, z, dlam):
        zw, zv = self._split(z)
        dg = self.inner.hvp(state.params, lam, data, zw) \
            + self.inner.mixed_jvp(state.params, lam, data, dlam)
        dvel = self.mu * zv + dg
        return np.concatenate([zw - self.eta * dvel, dvel])


class ConstantInit(InitMap):
    """Start the unroll from a fixed state, independent of the hyperparameters."""

    def __init__(self, params: np.ndarray, aux_dim: int = 0):
        self._params = np.asarray(params, dtype=np.float64)
        self.param_dim = self._params.shape[0]
        self.aux_dim = aux_dim

    def init(self, lam: HyperVector) -> InnerState:
        return InnerState(self._params, np.zeros(self.aux_dim))


def zero_init(param_dim: int, aux_dim: int = 0) -> ConstantInit:
    """The default initialization: zero params, zero aux."""
    return ConstantInit(np.zeros(param_dim), aux_dim)


class GaussianInit(ConstantInit):
    """Seeded Gaussian start state, drawn once at construction.

    Still hyperparameter-independent; used for the meta-learning runs where a
    nonzero start helps.
    """

    def __init__(self, param_dim: int, aux_dim: int = 0, seed: int = 0, scale: float = 1.0):
        rng = np.random.default_rng(seed)
        super().__init__(scale * rng.standard_normal(param_dim), aux_dim)
