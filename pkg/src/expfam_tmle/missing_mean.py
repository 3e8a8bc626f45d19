"""TMLE of E(Y) for a binary outcome missing at random.

Four targeting strategies share the same initial fits:

1. ``clever``   -- logistic fluctuation of mu with covariate 1/p_M (one step);
2. ``weighted`` -- intercept-only logistic fluctuation weighted by 1/p_M;
3. ``exp``      -- exponential-family tilt of the whole observed-data density;
4. ``sigmoid``  -- bounded tilt ``[1 + exp(-2 eps D)]^{-1}`` of the same density.

With the empirical distribution for X the observed-data density lives on
3n atoms ``(X_i, M=0)``, ``(X_i, M=1, Y=0)``, ``(X_i, M=1, Y=1)``, so every
normalizing constant is an exact finite sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import log_expit, logsumexp

from .core import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    PROB_CLAMP,
    EstimateReport,
    FluctuationStep,
    eif_missing_mean,
    expit,
    logit,
    report_from_eif,
    run_tmle,
)
from .exceptions import DataValidationError, NumericalError
from .optim import ConcaveObjective, LogisticFit, fit_logistic_irls, maximize_concave

TiltKind = Literal["exp", "sigmoid"]

IMPLEMENTATIONS = {1: "clever", 2: "weighted", 3: "exp", 4: "sigmoid"}

# (outcome model, missingness model) regressor sets per working-model specification
SPECS = {
    "i": ("correct", "correct"),
    "ii": ("correct", "misspecified"),
    "iii": ("misspecified", "correct"),
    "iv": ("misspecified", "misspecified"),
    "main": ("main", "main"),
}


@dataclass(frozen=True)
class MissingDataset:
    """Observations ``(X, M, MY)``; ``y`` is NaN wherever ``m == 0``."""

    x: np.ndarray
    m: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        m = np.asarray(self.m)
        y = np.asarray(self.y, dtype=float)
        n = x.shape[0]
        if m.shape != (n,) or y.shape != (n,):
            raise DataValidationError("x, m and y must have the same number of rows")
        if not np.all(np.isfinite(x)):
            raise DataValidationError("covariates may not contain missing or infinite values")
        if not np.all(np.isin(m, (0, 1))):
            raise DataValidationError("m must be a 0/1 indicator")
        m = m.astype(np.int8)
        obs = m == 1
        if not obs.any():
            raise DataValidationError("at least one outcome must be observed")
        if not np.all(np.isin(y[obs], (0.0, 1.0))):
            raise DataValidationError("observed outcomes must be binary 0/1")
        y = np.where(obs, y, np.nan)
        for name, arr in (("x", x), ("m", m), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def observed(self) -> np.ndarray:
        return self.m == 1

    @property
    def y_filled(self) -> np.ndarray:
        """Outcome with zeros in place of the unobserved entries (i.e. ``M*Y``)."""
        return np.where(self.observed, self.y, 0.0)

    @classmethod
    def from_arrays(cls, x, y, m=None) -> "MissingDataset":
        y = np.asarray(y, dtype=float)
        if m is None:
            m = (~np.isnan(y)).astype(np.int8)
        return cls(x, m, y)


def working_features(x, kind: str) -> np.ndarray:
    """Design matrix (with intercept) of a logistic working model.

    ``correct`` uses (X1, X2, X2^2), ``misspecified`` uses (X1, X1^2),
    ``main`` uses all columns as main terms.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    one = np.ones((x.shape[0], 1))
    if kind == "main":
        return np.hstack([one, x])
    if kind == "misspecified":
        return np.column_stack([one, x[:, 0], x[:, 0] ** 2])
    if kind == "correct":
        if x.shape[1] < 2:
            raise DataValidationError("the 'correct' working model needs two covariates")
        return np.column_stack([one, x[:, 0], x[:, 1], x[:, 1] ** 2])
    raise ValueError(f"unknown working-model kind {kind!r}")


@dataclass(frozen=True)
class NuisanceFit:
    mu_fit: LogisticFit
    pm_fit: LogisticFit
    spec_id: str

    @property
    def mu_kind(self) -> str:
        return SPECS[self.spec_id][0]

    @property
    def pm_kind(self) -> str:
        return SPECS[self.spec_id][1]

    def mu0(self, x) -> np.ndarray:
        return self.mu_fit.predict_proba(working_features(x, self.mu_kind))

    def pm0(self, x) -> np.ndarray:
        p = self.pm_fit.predict_proba(working_features(x, self.pm_kind))
        return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def fit_initial_nuisances(data: MissingDataset, spec: str = "i") -> NuisanceFit:
    """Fit the logistic working models for mu (on M=1 rows) and p_M (on all rows)."""
    if spec not in SPECS:
        raise ValueError(f"spec must be one of {sorted(SPECS)}, got {spec!r}")
    mu_kind, pm_kind = SPECS[spec]
    obs = data.observed
    mu_fit = fit_logistic_irls(working_features(data.x[obs], mu_kind), data.y[obs])
    pm_fit = fit_logistic_irls(working_features(data.x, pm_kind), data.m.astype(float))
    return NuisanceFit(mu_fit, pm_fit, spec)


@dataclass(frozen=True)
class FiniteJointState:
    """Joint density over the 3n atoms ``(X_i, M=0)``, ``(X_i, 1, 0)``, ``(X_i, 1, 1)``.

    ``atoms[i] = (w_i0, w_i10, w_i11)``; the components are recovered as
    ``w_i = sum(atoms[i])``, ``pm_i = (w_i10 + w_i11) / w_i`` and
    ``mu_i = w_i11 / (w_i10 + w_i11)``.
    """

    atoms: np.ndarray

    def __post_init__(self):
        a = np.array(self.atoms, dtype=float)
        if a.ndim != 2 or a.shape[1] != 3:
            raise ValueError("atoms must have shape (n, 3)")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("atom weights must be finite and nonnegative")
        total = a.sum()
        if total <= 0:
            raise NumericalError("all atom weights are zero")
        a /= total
        a.setflags(write=False)
        object.__setattr__(self, "atoms", a)

    @classmethod
    def from_components(cls, w, pm, mu) -> "FiniteJointState":
        w, pm, mu = (np.asarray(v, dtype=float) for v in (w, pm, mu))
        return cls(np.column_stack([w * (1 - pm), w * pm * (1 - mu), w * pm * mu]))

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def w(self) -> np.ndarray:
        return self.atoms.sum(axis=1)

    @property
    def pm(self) -> np.ndarray:
        w = self.w
        with np.errstate(invalid="ignore", divide="ignore"):
            pm = (self.atoms[:, 1] + self.atoms[:, 2]) / w
        return np.clip(np.nan_to_num(pm, nan=PROB_CLAMP), PROB_CLAMP, 1.0)

    @property
    def mu(self) -> np.ndarray:
        obs_mass = self.atoms[:, 1] + self.atoms[:, 2]
        with np.errstate(invalid="ignore", divide="ignore"):
            mu = self.atoms[:, 2] / obs_mass
        return np.clip(np.nan_to_num(mu, nan=0.5), 0.0, 1.0)

    @property
    def psi(self) -> float:
        return plugin_mean(self)

    def eif_atoms(self, psi_ref: float | None = None) -> np.ndarray:
        """EIF at every atom, shape (n, 3), columns ordered like ``atoms``."""
        psi = self.psi if psi_ref is None else psi_ref
        mu, pm = self.mu, self.pm
        base = mu - psi
        return np.column_stack([base, base - mu / pm, base + (1.0 - mu) / pm])

    def eif_observed(self, data: MissingDataset, psi_ref: float | None = None) -> np.ndarray:
        psi = self.psi if psi_ref is None else psi_ref
        return eif_missing_mean(self.mu, self.pm, data.m, data.y, psi)


def plugin_mean(state: FiniteJointState) -> float:
    """Substitution estimator ``sum_i w_i mu_i``."""
    return float(np.sum(state.w * state.mu))


def _log_tilt(z, kind: str):
    if kind == "exp":
        return z
    if kind == "sigmoid":
        return log_expit(2.0 * z)
    raise ValueError(f"kind must be 'exp' or 'sigmoid', got {kind!r}")


def tilt_finite_joint(
    state: FiniteJointState, eps: float, kind: TiltKind = "exp", psi_ref: float | None = None
) -> FiniteJointState:
    """Multiply every atom by the submodel factor at ``eps`` and renormalize."""
    D = state.eif_atoms(psi_ref)
    eps = float(np.asarray(eps).reshape(-1)[0])
    with np.errstate(divide="ignore"):
        logw = np.log(state.atoms) + _log_tilt(eps * D, kind)
    finite = np.isfinite(logw)
    if not finite.any():
        raise NumericalError("all atoms vanished after tilting")
    logw = np.where(finite, logw - np.max(logw[finite]), -np.inf)
    return FiniteJointState(np.exp(logw))


def _observed_atom(data: MissingDataset) -> np.ndarray:
    return np.where(data.observed, 1 + data.y_filled.astype(int), 0)


def fluctuation_objective(state: FiniteJointState, data: MissingDataset, kind: TiltKind) -> ConcaveObjective:
    """Observed-data log-likelihood of the submodel as a function of scalar eps.

    Rows with ``m = 0`` contribute the ``(X_i, M=0)`` atom (Y marginalized);
    constants not depending on eps are dropped, so ``value(0) == 0``.
    """
    D = state.eif_atoms()
    p = state.atoms.ravel()
    Dflat = D.ravel()
    Dobs = D[np.arange(data.n), _observed_atom(data)]
    n = data.n
    support = p > 0
    logp = np.log(p[support])
    Ds = Dflat[support]

    if kind == "exp":
        sumD = Dobs.sum()

        def value(e):
            e = float(e[0])
            return e * sumD - n * logsumexp(logp + e * Ds)

        def gradient(e):
            e = float(e[0])
            lw = logp + e * Ds
            q = np.exp(lw - logsumexp(lw))
            return np.array([sumD - n * q @ Ds])

        def hessian(e):
            e = float(e[0])
            lw = logp + e * Ds
            q = np.exp(lw - logsumexp(lw))
            m1 = q @ Ds
            return np.array([[-n * (q @ (Ds - m1) ** 2)]])

        return ConcaveObjective(value, gradient, hessian)

    if kind != "sigmoid":
        raise ValueError(f"kind must be 'exp' or 'sigmoid', got {kind!r}")
    log_half = np.log(0.5)

    def value(e):
        e = float(e[0])
        # subtract the eps=0 value so that value(0) == 0
        obs_part = np.sum(log_expit(2.0 * e * Dobs)) - n * log_half
        return obs_part - n * (logsumexp(logp + log_expit(2.0 * e * Ds)) - log_half)

    def _norm_terms(e):
        s = expit(2.0 * e * Ds)
        lw = logp + log_expit(2.0 * e * Ds)
        q = np.exp(lw - logsumexp(lw))  # p_a s_a / S
        return s, q

    def gradient(e):
        e = float(e[0])
        s_obs = expit(2.0 * e * Dobs)
        s, q = _norm_terms(e)
        return np.array([np.sum(2.0 * Dobs * (1.0 - s_obs)) - n * np.sum(q * 2.0 * Ds * (1.0 - s))])

    def hessian(e):
        e = float(e[0])
        s_obs = expit(2.0 * e * Dobs)
        s, q = _norm_terms(e)
        obs_h = -np.sum(4.0 * Dobs**2 * s_obs * (1.0 - s_obs))
        d1 = np.sum(q * 2.0 * Ds * (1.0 - s))  # S'/S
        d2 = np.sum(q * 4.0 * Ds**2 * (1.0 - s) * (1.0 - 2.0 * s))  # S''/S
        return np.array([[obs_h - n * (d2 - d1**2)]])

    return ConcaveObjective(value, gradient, hessian)


def _components_state(data: MissingDataset, pm, mu) -> FiniteJointState:
    return FiniteJointState.from_components(np.full(data.n, 1.0 / data.n), pm, mu)


def eif_variance_ci(state: FiniteJointState, data: MissingDataset, trace=None, **extra) -> EstimateReport:
    """Substitution estimate with a Wald interval from the empirical EIF variance."""
    psi = plugin_mean(state)
    return report_from_eif(psi, state.eif_observed(data, psi), trace, **extra)


def _logistic_fluctuation(data, nuisances, tol, max_iter, intercept: bool):
    obs = data.observed
    pm0 = nuisances.pm0(data.x)
    y_obs = data.y[obs]
    w = np.full(data.n, 1.0 / data.n)

    if intercept:
        design = np.ones((obs.sum(), 1))
        weights = 1.0 / pm0[obs]
        direction = np.ones(data.n)
    else:
        design = (1.0 / pm0[obs])[:, None]
        weights = None
        direction = 1.0 / pm0

    def step(logit_mu):
        off = logit_mu[obs]
        fit = fit_logistic_irls(design, y_obs, weights=weights, offset=off)
        eps = float(fit.coefficients[0])
        new = logit_mu + eps * direction
        ww = np.ones(obs.sum()) if weights is None else weights
        ll0 = -0.5 * 2.0 * float(np.sum(ww * (np.logaddexp(0.0, off) - y_obs * off)))
        gain = -0.5 * fit.final_deviance - ll0
        mu = expit(new)
        psi = float(np.sum(w * mu))
        mean_eif = float(np.mean(eif_missing_mean(mu, pm0, data.m, data.y, psi)))
        return FluctuationStep(np.array([eps]), new, max(gain, 0.0), np.array([mean_eif]))

    logit_mu, trace = run_tmle(step, logit(nuisances.mu0(data.x)), tol, max_iter)
    state = _components_state(data, pm0, expit(logit_mu))
    return state, trace


def tmle_clever_covariate(
    data: MissingDataset, nuisances: NuisanceFit, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> EstimateReport:
    """Implementation 1: logistic fluctuation of mu along H_Y = 1/p_M^0, no intercept."""
    state, trace = _logistic_fluctuation(data, nuisances, tol, max_iter, intercept=False)
    return eif_variance_ci(state, data, trace, implementation="clever")


def tmle_weighted_intercept(
    data: MissingDataset, nuisances: NuisanceFit, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER
) -> EstimateReport:
    """Implementation 2: intercept-only fluctuation with weights 1/p_M^0."""
    state, trace = _logistic_fluctuation(data, nuisances, tol, max_iter, intercept=True)
    return eif_variance_ci(state, data, trace, implementation="weighted")


def run_expfam(
    data: MissingDataset,
    nuisances: NuisanceFit,
    kind: TiltKind = "exp",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
):
    """Iterate the joint tilt; returns ``(final_state, trace)``."""
    init = _components_state(data, nuisances.pm0(data.x), nuisances.mu0(data.x))

    def step(state: FiniteJointState) -> FluctuationStep:
        obj = fluctuation_objective(state, data, kind)
        res = maximize_concave(obj, [0.0])
        eps = float(res.x[0])
        new = tilt_finite_joint(state, eps, kind)
        mean_eif = float(np.mean(new.eif_observed(data)))
        return FluctuationStep(np.array([eps]), new, res.value - obj.value(np.zeros(1)), np.array([mean_eif]))

    return run_tmle(step, init, tol, max_iter)


def tmle_expfam(
    data: MissingDataset,
    nuisances: NuisanceFit,
    kind: TiltKind = "exp",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> EstimateReport:
    """Implementations 3 (``kind='exp'``) and 4 (``kind='sigmoid'``)."""
    state, trace = run_expfam(data, nuisances, kind, tol, max_iter)
    return eif_variance_ci(state, data, trace, implementation=kind)


def estimate(data: MissingDataset, nuisances: NuisanceFit, implementation, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Dispatch on implementation number (1-4) or name."""
    name = IMPLEMENTATIONS.get(implementation, implementation)
    if name == "clever":
        return tmle_clever_covariate(data, nuisances, tol, max_iter)
    if name == "weighted":
        return tmle_weighted_intercept(data, nuisances, tol, max_iter)
    if name in ("exp", "sigmoid"):
        return tmle_expfam(data, nuisances, name, tol, max_iter)
    raise ValueError(f"unknown implementation {implementation!r}")
