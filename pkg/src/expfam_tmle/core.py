"""Shared types, efficient influence functions and the generic TMLE driver.

Every estimator in the package is expressed as a *fluctuation step*: a
callable that receives the current state ``p^k``, fits the parametric
submodel through it by maximum likelihood and returns the updated state.
:func:`run_tmle` iterates such a step until the fitted fluctuation
parameter is numerically zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np
from scipy.stats import norm

from .exceptions import NumericalError, PositivityError

DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 50
STALL_TOL = 1e-12
# Empirical self-consistency constant: |mean EIF| <= SELF_CONSISTENCY_C * tol at convergence.
SELF_CONSISTENCY_C = 10.0

PROB_CLAMP = 1e-12


def expit(x):
    """Logistic function, evaluated in the overflow-free branch form."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    """Log-odds with inputs clamped to ``[1e-12, 1 - 1e-12]``."""
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def eif_missing_mean(mu_x, pm_x, m, y, psi):
    """Efficient influence function of E(Y) with Y missing at random.

    ``(m / pm_x) * (y - mu_x) + mu_x - psi``; the residual term is taken as 0
    whenever ``m == 0`` so that ``y`` may be NaN (unobserved) there.

    Broadcasts over arrays. Raises :class:`PositivityError` if any
    ``pm_x <= 0``.
    """
    mu_x = np.asarray(mu_x, dtype=float)
    pm_x = np.asarray(pm_x, dtype=float)
    m = np.asarray(m)
    y = np.asarray(y, dtype=float)
    if np.any(pm_x <= 0):
        raise PositivityError("propensity P(M=1|X) must be positive")
    observed = m.astype(bool)
    resid = np.where(observed, np.where(observed, y, 0.0) - mu_x, 0.0)
    out = np.where(observed, resid / pm_x, 0.0) + mu_x - psi
    return out if out.ndim else float(out)


class IterationRecord(NamedTuple):
    epsilon: np.ndarray
    loglik: float
    mean_eif: np.ndarray


@dataclass(frozen=True)
class TmleTrace:
    """Per-iteration record of a TMLE run.

    ``loglik`` of each record is the log-likelihood gain of the fitted
    fluctuation, ``l(eps_hat) - l(0)``; ``mean_eif`` is the empirical mean of
    the EIF at the *updated* state.
    """

    iterations: tuple[IterationRecord, ...]
    converged: bool
    stop_reason: str  # "epsilon_small" | "max_iter" | "stalled"

    @property
    def n_iter(self) -> int:
        return len(self.iterations)

    @property
    def final_mean_eif(self) -> np.ndarray:
        return self.iterations[-1].mean_eif

    @property
    def epsilons(self) -> list[np.ndarray]:
        return [rec.epsilon for rec in self.iterations]

    def to_dict(self) -> dict[str, Any]:
        return {
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "n_iter": self.n_iter,
            "iterations": [
                {
                    "epsilon": np.atleast_1d(r.epsilon).tolist(),
                    "loglik": float(r.loglik),
                    "mean_eif": np.atleast_1d(r.mean_eif).tolist(),
                }
                for r in self.iterations
            ],
        }


@dataclass(frozen=True)
class EstimateReport:
    psi_hat: np.ndarray
    variance_hat: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    trace: TmleTrace | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def estimate(self) -> float:
        """Scalar point estimate (first component)."""
        return float(self.psi_hat[0])

    @property
    def std_error(self) -> np.ndarray:
        return np.sqrt(np.diag(self.variance_hat))

    def to_dict(self) -> dict[str, Any]:
        out = {
            "psi_hat": self.psi_hat.tolist(),
            "variance_hat": self.variance_hat.tolist(),
            "std_error": self.std_error.tolist(),
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
        }
        if self.trace is not None:
            out["trace"] = self.trace.to_dict()
        out.update(self.extra)
        return out


def report_from_eif(psi_hat, eif_values, trace=None, level=0.95, **extra) -> EstimateReport:
    """Wald report with the variance estimated by the empirical variance of the EIF.

    Parameters
    ----------
    psi_hat : float or array of shape (d,)
    eif_values : array of shape (n,) or (n, d)
        EIF evaluated at the fitted nuisances for every observation.
    """
    psi = np.atleast_1d(np.asarray(psi_hat, dtype=float))
    D = np.asarray(eif_values, dtype=float)
    if D.ndim == 1:
        D = D[:, None]
    n = D.shape[0]
    if not np.all(np.isfinite(D)):
        raise NumericalError("non-finite efficient influence function values")
    cov = np.atleast_2d(np.cov(D, rowvar=False, ddof=1)) / n
    cov = 0.5 * (cov + cov.T)
    z = norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return EstimateReport(psi, cov, psi - half, psi + half, trace, dict(extra))


class FluctuationStep(NamedTuple):
    """What a fluctuation closure hands back to :func:`run_tmle`."""

    epsilon: np.ndarray
    state: Any
    loglik: float
    mean_eif: np.ndarray


def run_tmle(
    step: Callable[[Any], FluctuationStep | Sequence],
    initial_state: Any,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> tuple[Any, TmleTrace]:
    """Iterate a fluctuation step until the fitted epsilon is below ``tol``.

    ``step(state)`` must return ``(epsilon_hat, updated_state, loglik_gain,
    mean_eif)``. The loop stops when ``max|epsilon_hat| < tol`` (converged),
    when the likelihood gain drops below 1e-12 while epsilon is still large
    (stalled), or after ``max_iter`` iterations. Reaching ``max_iter`` is
    reported through the trace, not raised.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    state = initial_state
    records: list[IterationRecord] = []
    reason = "max_iter"
    for _ in range(max_iter):
        eps, new_state, loglik, mean_eif = step(state)
        eps = np.atleast_1d(np.asarray(eps, dtype=float))
        if not math.isfinite(float(loglik)) or not np.all(np.isfinite(eps)):
            raise NumericalError("non-finite fluctuation log-likelihood")
        records.append(IterationRecord(eps, float(loglik), np.atleast_1d(np.asarray(mean_eif, float))))
        state = new_state
        if np.max(np.abs(eps)) < tol:
            reason = "epsilon_small"
            break
        if loglik < STALL_TOL:
            reason = "stalled"
            break
    trace = TmleTrace(tuple(records), reason == "epsilon_small", reason)
    return state, trace


def score_check(tilt_loglik: Callable[[float], float], eif_at_atom: float, h: float = 1e-5) -> float:
    """Central-difference score at zero minus the EIF value.

    Near zero for any submodel whose score at ``eps = 0`` is the EIF.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    return (tilt_loglik(h) - tilt_loglik(-h)) / (2.0 * h) - eif_at_atom
