"""Convex optimization kernel.

Safeguarded Newton ascent for concave objectives, IRLS for weighted
logistic regression with an offset, and bracketed scalar root finding.
All three are small, deterministic and free of global state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import expit
from .exceptions import BracketError, NumericalError, SeparationWarning

MAX_HALVINGS = 60
SEPARATION_BOUND = 30.0


@dataclass(frozen=True)
class ConcaveObjective:
    """A concave function of a parameter vector.

    ``hessian`` may be omitted; a central finite-difference Hessian of the
    gradient is then used.
    """

    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray] | None = None

    def hess(self, x: np.ndarray) -> np.ndarray:
        if self.hessian is not None:
            return np.atleast_2d(self.hessian(x))
        k = x.size
        H = np.empty((k, k))
        for j in range(k):
            h = 1e-6 * max(1.0, abs(x[j]))
            e = np.zeros(k)
            e[j] = h
            H[:, j] = (np.atleast_1d(self.gradient(x + e)) - np.atleast_1d(self.gradient(x - e))) / (2 * h)
        return 0.5 * (H + H.T)


class MaximizeResult(NamedTuple):
    x: np.ndarray
    value: float
    n_iter: int
    converged: bool


def _safe_value(obj: ConcaveObjective, x: np.ndarray) -> float:
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        v = float(obj.value(x))
    return v if math.isfinite(v) else -math.inf


def maximize_concave(
    obj: ConcaveObjective,
    eps0,
    max_iter: int = 200,
    gtol: float = 1e-10,
) -> MaximizeResult:
    """Maximize a concave objective by safeguarded Newton ascent.

    Newton directions are used while ``-H`` is positive definite; otherwise
    the step falls back to the (scaled) gradient. Steps are halved until the
    objective does not decrease, so the iterates are monotone.

    Parameters
    ----------
    obj : ConcaveObjective
    eps0 : array_like
        Starting point; the objective must be finite there.
    max_iter : int
        Newton iterations before giving up (``converged=False``).
    gtol : float
        Convergence when ``max|grad| <= gtol * (1 + |value|)``.

    Raises
    ------
    NumericalError
        If the starting value is not finite, or 60 halvings fail to reach a
        finite objective.
    """
    x = np.atleast_1d(np.asarray(eps0, dtype=float)).copy()
    f = _safe_value(obj, x)
    if not math.isfinite(f):
        raise NumericalError("objective is not finite at the starting point")
    for it in range(1, max_iter + 1):
        g = np.atleast_1d(np.asarray(obj.gradient(x), dtype=float))
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
        if np.max(np.abs(g)) <= gtol * (1.0 + abs(f)):
            return MaximizeResult(x, f, it - 1, True)
        H = obj.hess(x)
        try:
            L = np.linalg.cholesky(-H)
            step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            # indefinite or singular curvature: gradient ascent, scaled to unit length
            step = g / max(1.0, float(np.linalg.norm(g)))
        t = 1.0
        for _ in range(MAX_HALVINGS):
            x_new = x + t * step
            f_new = _safe_value(obj, x_new)
            if f_new >= f:
                break
            t *= 0.5
        else:
            if not math.isfinite(f_new):
                raise NumericalError("objective non-finite along the whole search direction")
            # no ascent possible at floating-point resolution
            return MaximizeResult(x, f, it, True)
        if np.max(np.abs(t * step)) <= 1e-15 * (1.0 + np.max(np.abs(x))):
            return MaximizeResult(x_new, f_new, it, True)
        x, f = x_new, f_new
    return MaximizeResult(x, f, max_iter, False)


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    n_iter: int
    final_deviance: float
    separated: bool = False

    def linear_predictor(self, design, offset=None):
        eta = np.asarray(design, float) @ self.coefficients
        return eta if offset is None else eta + offset

    def predict_proba(self, design, offset=None):
        return expit(self.linear_predictor(design, offset))


def _weighted_deviance(eta, y, w):
    # -2 * sum w [y log p + (1-y) log(1-p)], stable in eta
    return 2.0 * float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))


def fit_logistic_irls(
    design,
    y,
    weights=None,
    offset=None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LogisticFit:
    """Weighted logistic regression with an offset, fitted by IRLS.

    Maximizes ``sum_i w_i [y_i log p_i + (1 - y_i) log(1 - p_i)]`` with
    ``p_i = expit(design_i @ beta + offset_i)``. Convergence means the score
    ``design.T @ (w * (y - p))`` has sup-norm at most ``tol * n``.

    Coefficients whose magnitude passes 30 are clamped and a
    :class:`SeparationWarning` is issued; the fit is flagged ``separated``.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n < p:
        raise ValueError(f"need n >= p, got n={n}, p={p}")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if not (np.all(np.isfinite(w)) and np.all(w >= 0)):
        raise ValueError("weights must be finite and nonnegative")
    if not np.all(np.isfinite(off)):
        raise ValueError("offset must be finite")

    beta = np.zeros(p)
    eta = X @ beta + off
    dev = _weighted_deviance(eta, y, w)
    score_tol = tol * n
    converged = False
    separated = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        if np.max(np.abs(score)) <= score_tol:
            converged = True
            it -= 1
            break
        info = (X * (w * mu * (1.0 - mu))[:, None]).T @ X
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(MAX_HALVINGS):
            beta_new = beta + t * step
            eta_new = X @ beta_new + off
            dev_new = _weighted_deviance(eta_new, y, w)
            if dev_new <= dev + 1e-12 * (1.0 + abs(dev)):
                break
            t *= 0.5
        beta, eta, dev = beta_new, eta_new, dev_new
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            separated = True
            beta = np.clip(beta, -SEPARATION_BOUND, SEPARATION_BOUND)
            eta = X @ beta + off
            dev = _weighted_deviance(eta, y, w)
            warnings.warn(
                f"logistic coefficients exceeded {SEPARATION_BOUND:g}; clamped (separation)",
                SeparationWarning,
                stacklevel=2,
            )
            break
        if np.max(np.abs(t * step)) < 1e-14 * (1.0 + np.max(np.abs(beta))):
            # deviance flat at machine precision
            mu = expit(eta)
            converged = bool(np.max(np.abs(X.T @ (w * (y - mu)))) <= score_tol)
            break
    return LogisticFit(beta, converged, it, dev, separated)


def find_root_bracketed(f: Callable[[float], float], lo: float, hi: float, max_iter: int = 200) -> float:
    """Root of a scalar function on a sign-changing bracket.

    Secant (false-position) steps with the Illinois modification keep
    super-linear convergence; a bisection step is taken whenever the secant
    proposal does not shrink the bracket by half. Returns as soon as
    ``|f(x)| <= 1e-10`` or the bracket is narrower than 1e-12.
    """
    a, b = float(lo), float(hi)
    fa, fb = float(f(a)), float(f(b))
    if fa == 0.0:
        return a
    if fb == 0.0:
        return b
    if fa * fb > 0:
        raise BracketError(f"f({a})={fa:g} and f({b})={fb:g} have the same sign")
    x = a
    for _ in range(max_iter):
        width = abs(b - a)
        x = (a * fb - b * fa) / (fb - fa)
        if not (min(a, b) < x < max(a, b)):
            x = 0.5 * (a + b)
        fx = float(f(x))
        if abs(fx) <= 1e-10:
            return x
        if fx * fb < 0:
            a, fa = b, fb
        else:
            fa *= 0.5  # Illinois: down-weight the retained endpoint
        b, fb = x, fx
        if abs(b - a) <= 1e-12:
            return b
        if abs(b - a) > 0.5 * width:
            m = 0.5 * (a + b)
            fm = float(f(m))
            if abs(fm) <= 1e-10:
                return m
            if fm * fb > 0:
                b, fb = m, fm
            else:
                a, fa = m, fm
    return x
