"""Independent ground truth: closed-form minimizers, implicit-differentiation
hypergradients, and the convergence-rate harness.

Nothing here reuses the unroll engines' derivative products: minimizers come
from a dense symmetric solve and hypergradients from the implicit function
theorem, so agreement with the iterative pipeline is a real cross-check.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .core import BilevelProblem, HyperVector, OuterObjective
from .errors import NonContractive, NotPositiveDefinite
from .hypergrad import reverse_hypergrad, unroll

ERROR_FLOOR = 1e-12


@dataclass(frozen=True)
class QuadraticInner:
    """Inner loss with gradient 2(A(lam) w - b(lam)), A affine in lambda.

    A(lam) = A0 + sum_k lam_k * A_terms[k] and likewise for b; the unique
    minimizer is w*(lam) = A(lam)^-1 b(lam). Ridge is A = X^T X + reg * I,
    b = X^T y.
    """

    A0: np.ndarray
    b0: np.ndarray
    A_terms: dict = field(default_factory=dict)
    b_terms: dict = field(default_factory=dict)

    def __post_init__(self):
        A0 = np.asarray(self.A0, dtype=np.float64)
        if not np.allclose(A0, A0.T, atol=1e-12):
            raise NotPositiveDefinite("base matrix is not symmetric")
        object.__setattr__(self, "A0", A0)
        object.__setattr__(self, "b0", np.asarray(self.b0, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.b0.shape[0]

    def A(self, lam: HyperVector) -> np.ndarray:
        A = self.A0.copy()
        for k, term in self.A_terms.items():
            A += lam.values[k] * term
        return A

    def b(self, lam: HyperVector) -> np.ndarray:
        b = self.b0.copy()
        for k, term in self.b_terms.items():
            b += lam.values[k] * term
        return b

    def assert_pd(self, lam: HyperVector) -> None:
        if np.linalg.eigvalsh(self.A(lam)).min() <= 0:
            raise NotPositiveDefinite(
                "quadratic inner problem is not positive definite at this lambda"
            )


def ridge_quadratic(X: np.ndarray, y: np.ndarray, reg_index: int, lam_check: HyperVector = None) -> QuadraticInner:
    """Quadratic form of the ridge training loss, built straight from the data."""
    X = np.asarray(X, dtype=np.float64)
    q = QuadraticInner(
        X.T @ X, X.T @ np.asarray(y, dtype=np.float64),
        A_terms={reg_index: np.eye(X.shape[1])},
    )
    if lam_check is not None:
        check = lam_check.with_values(
            np.where(np.isfinite(lam_check.lower), lam_check.lower, lam_check.values)
        )
        q.assert_pd(check)
    return q


def _factor(q: QuadraticInner, lam: HyperVector):
    try:
        return cho_factor(q.A(lam), lower=True)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def exact_minimizer(q: QuadraticInner, lam: HyperVector) -> np.ndarray:
    """Solve A(lam) w = b(lam) by dense Cholesky."""
    return cho_solve(_factor(q, lam), q.b(lam))


def exact_hypergrad(
    q: QuadraticInner,
    outer: OuterObjective,
    lam: HyperVector,
    val_data,
) -> np.ndarray:
    """Implicit-function-theorem hypergradient at the exact inner minimizer.

    dw*/dlam_k = A^-1 (db/dlam_k - (dA/dlam_k) w*); one adjoint solve covers
    all coordinates.
    """
    factor = _factor(q, lam)
    w_star = cho_solve(factor, q.b(lam))
    u = cho_solve(factor, outer.grad_w(w_star, lam, val_data))
    grad = np.array(outer.grad_hyper(w_star, lam, val_data), dtype=np.float64)
    for k in sorted(set(q.A_terms) | set(q.b_terms)):
        rhs = np.zeros(q.dim)
        if k in q.b_terms:
            rhs += q.b_terms[k]
        if k in q.A_terms:
            rhs -= q.A_terms[k] @ w_star
        grad[k] += float(u @ rhs)
    return grad


@dataclass(frozen=True)
class ConvergenceReport:
    """Hypergradient error vs unroll length, with a fitted geometric rate."""

    T_values: tuple[int, ...]
    errors: tuple[float, ...]
    in_fit: tuple[bool, ...]
    fitted_ratio: float
    theory_ratio: float
    monotone_from: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["T", "error", "in_fit"])
            for T, err, used in zip(self.T_values, self.errors, self.in_fit):
                writer.writerow([T, repr(err), int(used)])


def convergence_harness(
    problem: BilevelProblem,
    lam: HyperVector,
    q: QuadraticInner,
    T_list,
) -> ConvergenceReport:
    """Measure ||grad f_T - grad f|| over T and fit the geometric decay rate.

    Requires plain gradient descent with a contractive step: eta below
    2 / lambda_max of the inner Hessian 2A. Errors at the rounding floor are
    reported but excluded from the rate fit. The theoretical contraction
    factor 1 - eta * lambda_min(2A) is reported alongside the fit.
    """
    eta = getattr(problem.dynamics, "eta", None)
    if eta is None:
        raise ValueError("convergence harness needs a fixed-step dynamics")
    hess_eigs = 2.0 * np.linalg.eigvalsh(q.A(lam))
    if hess_eigs.min() <= 0:
        raise NotPositiveDefinite("inner Hessian not positive definite at this lambda")
    if eta >= 2.0 / hess_eigs.max():
        raise NonContractive(
            f"eta={eta:.4g} >= 2/lambda_max={2.0 / hess_eigs.max():.4g}; unroll does not contract"
        )
    theory_ratio = 1.0 - eta * hess_eigs.min()

    g_exact = exact_hypergrad(q, problem.outer, lam, problem.val_data)
    T_values, errors = [], []
    for T in T_list:
        prob_T = dataclasses.replace(problem, T=int(T))
        res = reverse_hypergrad(prob_T, unroll(prob_T, lam))
        T_values.append(int(T))
        errors.append(float(np.linalg.norm(res.grad - g_exact)))

    errors_arr = np.array(errors)
    in_fit = errors_arr > ERROR_FLOOR
    if in_fit.sum() >= 2:
        Ts = np.array(T_values, dtype=float)[in_fit]
        logs = np.log(errors_arr[in_fit])
        slope = np.polyfit(Ts, logs, 1)[0]
        fitted_ratio = float(np.exp(slope))
    else:
        fitted_ratio = float("nan")

    monotone_from = T_values[-1]
    for i in range(len(errors) - 1, 0, -1):
        if errors[i - 1] > errors[i] or errors[i - 1] <= ERROR_FLOOR:
            monotone_from = T_values[i - 1]
        else:
            break

    return ConvergenceReport(
        tuple(T_values), tuple(errors), tuple(bool(b) for b in in_fit),
        fitted_ratio, theory_ratio, monotone_from,
    )
