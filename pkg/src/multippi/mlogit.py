"""Multinomial logistic regression core: loss, gradient, Hessian, Newton solver.

Parameterization
----------------
With ``K`` classes indexed ``0..K-1``, class 0 is the reference class and its
coefficient block is pinned at zero. The free parameter vector ``theta`` has
length ``d*(K-1)``; block ``k-1`` (length ``d``) holds the coefficients of
class ``k`` versus the reference. Writing ``eta_k = x . theta_k`` and
``eta_0 = 0``, the per-row negative log likelihood is

    -eta_y + psi(theta, x),   psi = log(1 + sum_{k=1}^{K-1} exp(eta_k)),

so class probabilities normalize: including the reference's unit term in
``psi`` is what identifies the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError, SeparationError, ShapeError


@dataclass(frozen=True)
class ModelShape:
    """Class count, covariate dimension, and the pinned reference class."""

    n_classes: int
    n_features: int
    reference_class: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ShapeError(f"need at least 2 classes, got {self.n_classes}")
        if self.n_features < 1:
            raise ShapeError(f"need at least 1 feature, got {self.n_features}")

    @property
    def n_params(self) -> int:
        return self.n_features * (self.n_classes - 1)


@dataclass(frozen=True)
class NewtonOptions:
    """Damped-Newton solver settings."""

    grad_tol: float = 1e-8          # max-norm convergence threshold
    max_iterations: int = 100
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    min_step: float = 1e-14
    coef_bound: float = 1e4         # separation detector
    ridge: float = 1e-10            # added to the Hessian when a solve fails


@dataclass(frozen=True)
class FitDiagnostics:
    iterations: int
    gradient_norm: float
    converged: bool
    condition_warning: bool = False
    status: str = "converged"       # converged | max_iterations | stalled | separation


def one_hot(y: int, n_classes: int) -> np.ndarray:
    """Length-(K-1) indicator; the reference class (0) maps to all zeros."""
    if not 0 <= y < n_classes:
        raise ShapeError(f"class index {y} out of range for {n_classes} classes")
    out = np.zeros(n_classes - 1)
    if y > 0:
        out[y - 1] = 1.0
    return out


def onehot_rows(y: np.ndarray, n_classes: int) -> np.ndarray:
    """Row-stacked one_hot for an integer label vector, shape (n, K-1)."""
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ShapeError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{y.min()}, {y.max()}]"
        )
    out = np.zeros((y.shape[0], n_classes - 1))
    nonref = y > 0
    out[np.nonzero(nonref)[0], y[nonref] - 1] = 1.0
    return out


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def linear_predictors(theta: np.ndarray, x: np.ndarray, n_classes: int) -> np.ndarray:
    """eta = X @ Theta with Theta the (d, K-1) block-unstacked coefficients."""
    x = _as_matrix(x)
    d = x.shape[1]
    blocks = np.asarray(theta, dtype=float).reshape(n_classes - 1, d)
    return x @ blocks.T


def class_probs(theta: np.ndarray, x: np.ndarray, n_classes: int) -> np.ndarray:
    """Non-reference class probabilities, shape (K-1,) or (n, K-1).

    Evaluated with max-subtraction so large linear predictors saturate
    instead of overflowing. The reference probability is
    ``1 - probs.sum(axis=-1)`` and stays positive.
    """
    single = np.asarray(x).ndim == 1
    eta = linear_predictors(theta, x, n_classes)
    if not np.all(np.isfinite(eta)):
        raise NumericError("non-finite linear predictor")
    m = np.maximum(eta.max(axis=1), 0.0)
    expo = np.exp(eta - m[:, None])
    denom = np.exp(-m) + expo.sum(axis=1)
    probs = expo / denom[:, None]
    return probs[0] if single else probs


def log_normalizer(theta: np.ndarray, x: np.ndarray, n_classes: int) -> np.ndarray:
    """psi(theta, x) = log(1 + sum_k exp(eta_k)) per row, overflow-safe."""
    eta = linear_predictors(theta, x, n_classes)
    if not np.all(np.isfinite(eta)):
        raise NumericError("non-finite linear predictor")
    m = np.maximum(eta.max(axis=1), 0.0)
    return m + np.log(np.exp(-m) + np.exp(eta - m[:, None]).sum(axis=1))


def _check_labeled(x: np.ndarray, y: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    x = _as_matrix(x)
    y = np.asarray(y)
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} rows but {y.shape[0]} labels")
    if not np.issubdtype(y.dtype, np.integer):
        raise ShapeError("labels must be integer class indices (unlabeled rows are not allowed)")
    if y.size == 0:
        raise ShapeError("no rows")
    if y.min() < 0 or y.max() >= n_classes:
        raise ShapeError(f"labels must lie in [0, {n_classes})")
    return x, y


def nll(theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int) -> float:
    """Mean negative log likelihood over labeled rows."""
    x, y = _check_labeled(x, y, n_classes)
    eta = linear_predictors(theta, x, n_classes)
    if not np.all(np.isfinite(eta)):
        raise NumericError("non-finite linear predictor")
    m = np.maximum(eta.max(axis=1), 0.0)
    psi = m + np.log(np.exp(-m) + np.exp(eta - m[:, None]).sum(axis=1))
    picked = np.zeros(len(y))
    nonref = y > 0
    picked[nonref] = eta[nonref, y[nonref] - 1]
    return float(np.mean(psi - picked))


def per_row_grads(theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int) -> np.ndarray:
    """Per-row gradients (probs - onehot(y)) (x) x, shape (n, d*(K-1))."""
    x, y = _check_labeled(x, y, n_classes)
    resid = class_probs(theta, x, n_classes) - onehot_rows(y, n_classes)
    return np.einsum("ik,ia->ika", resid, x).reshape(x.shape[0], -1)


def nll_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int) -> np.ndarray:
    """Gradient of nll, block layout matching theta."""
    x, y = _check_labeled(x, y, n_classes)
    resid = class_probs(theta, x, n_classes) - onehot_rows(y, n_classes)
    return (resid.T @ x).ravel() / x.shape[0]


def nll_hess(theta: np.ndarray, x: np.ndarray, n_classes: int) -> np.ndarray:
    """Hessian of nll; label-free.

    Per row the (K-1, K-1) curvature is diag(p) - p p^T, and the full
    Hessian is the mean of its Kronecker product with x x^T.
    """
    x = _as_matrix(x)
    p = class_probs(theta, x, n_classes)
    w = -p[:, :, None] * p[:, None, :]
    idx = np.arange(n_classes - 1)
    w[:, idx, idx] += p
    n, d = x.shape
    h = np.einsum("ikj,ia,ib->kajb", w, x, x).reshape(d * (n_classes - 1), -1)
    return h / n


def _solve_newton_step(hess: np.ndarray, grad: np.ndarray, ridge: float) -> tuple[np.ndarray, bool]:
    """Cholesky solve of H step = -grad, ridging H upward until it succeeds."""
    h = hess
    regularized = False
    reg = ridge
    for _ in range(12):
        try:
            c = scipy.linalg.cho_factor(h, check_finite=False)
            step = scipy.linalg.cho_solve(c, -grad, check_finite=False)
            if np.all(np.isfinite(step)):
                return step, regularized
        except scipy.linalg.LinAlgError:
            pass
        h = hess + reg * np.eye(hess.shape[0])
        regularized = True
        reg *= 100.0
    raise NumericError("Hessian solve failed even after regularization")


def newton_minimize(value_and_grad, hess, theta0: np.ndarray,
                    options: NewtonOptions = NewtonOptions()) -> tuple[np.ndarray, FitDiagnostics]:
    """Damped Newton with Armijo backtracking.

    ``value_and_grad(theta) -> (float, ndarray)`` and ``hess(theta) ->
    ndarray`` define the objective. Does not raise on non-convergence;
    the outcome is in the returned diagnostics.
    """
    theta = np.array(theta0, dtype=float)
    condition_warning = False
    value, grad = value_and_grad(theta)
    prev_value = np.inf
    iterations = 0
    status = "max_iterations"
    for iterations in range(1, options.max_iterations + 1):
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        if gnorm <= options.grad_tol:
            status = "converged"
            iterations -= 1
            break
        step, regularized = _solve_newton_step(hess(theta), grad, options.ridge)
        condition_warning = condition_warning or regularized
        slope = float(grad @ step)
        if slope >= 0:
            # not a descent direction (extreme ill-conditioning): fall back
            step = -grad
            slope = float(grad @ step)
        t = 1.0
        new_theta = theta + step
        new_value, new_grad = value_and_grad(new_theta)
        while not (np.isfinite(new_value) and
                   new_value <= value + options.armijo_c * t * slope):
            t *= options.backtrack_factor
            if t < options.min_step:
                break
            new_theta = theta + t * step
            new_value, new_grad = value_and_grad(new_theta)
        if t < options.min_step:
            status = "stalled"
            break
        decreasing = new_value < prev_value
        prev_value, theta, value, grad = value, new_theta, new_value, new_grad
        if np.max(np.abs(theta)) > options.coef_bound and decreasing:
            status = "separation"
            break
    else:
        iterations = options.max_iterations
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    if status != "converged" and gnorm <= options.grad_tol:
        status = "converged"
    return theta, FitDiagnostics(
        iterations=iterations,
        gradient_norm=gnorm,
        converged=status == "converged",
        condition_warning=condition_warning,
        status=status,
    )


def fit_mle(x: np.ndarray, y: np.ndarray, n_classes: int,
            options: NewtonOptions = NewtonOptions(),
            theta0: np.ndarray | None = None) -> tuple[np.ndarray, FitDiagnostics]:
    """Maximum likelihood fit by damped Newton.

    Every class in ``0..n_classes-1`` must appear in ``y``. Raises
    SeparationError when coefficients pass ``options.coef_bound`` while the
    loss is still decreasing (complete or quasi-complete separation).
    """
    x, y = _check_labeled(x, y, n_classes)
    present = np.unique(y)
    if len(present) != n_classes:
        missing = sorted(set(range(n_classes)) - set(present.tolist()))
        raise ShapeError(f"classes absent from data: {missing}")
    d = x.shape[1]
    if theta0 is None:
        theta0 = np.zeros(d * (n_classes - 1))

    def value_and_grad(theta):
        return nll(theta, x, y, n_classes), nll_grad(theta, x, y, n_classes)

    theta, diag = newton_minimize(value_and_grad, lambda t: nll_hess(t, x, n_classes),
                                  theta0, options)
    if diag.status == "separation":
        raise SeparationError(
            f"coefficient max-norm exceeded {options.coef_bound:g} while the "
            "loss was still decreasing; data are (quasi-)separated"
        )
    return theta, diag
