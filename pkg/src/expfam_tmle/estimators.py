"""scikit-learn style front ends for the three targeted estimators."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import expit
from .median_reg import DEFAULT_BOX, XYDataset, tmle_median
from .missing_mean import MissingDataset, estimate, fit_initial_nuisances
from .shift_effect import ShiftDataset, tmle_shift
from .validation import check_binary, check_covariates, check_vector


class _ReportMixin:
    def _store(self, report):
        self.report_ = report
        self.estimate_ = report.estimate
        self.std_error_ = float(report.std_error[0])
        self.confidence_interval_ = (float(report.ci_lower[0]), float(report.ci_upper[0]))
        self.trace_ = report.trace
        self.n_iter_ = report.trace.n_iter


class MissingMeanTMLE(_ReportMixin, BaseEstimator):
    """Targeted estimate of E(Y) when Y is missing at random given X.

    Parameters
    ----------
    implementation : {1, 2, 3, 4} or {'clever', 'weighted', 'exp', 'sigmoid'}
        Fluctuation used for targeting.
    spec : {'main', 'i', 'ii', 'iii', 'iv'}
        Logistic working-model regressors. ``'main'`` uses all covariates as
        main terms; the others use the two-covariate designs.
    """

    def __init__(self, implementation=3, spec="main", tol=1e-4, max_iter=50):
        self.implementation = implementation
        self.spec = spec
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, m=None):
        """``y`` may hold NaN for missing outcomes; ``m`` defaults to ``~isnan(y)``."""
        X = check_covariates(X)
        y = check_binary(check_vector(y, X.shape[0], "y", allow_nan=True), "y")
        if m is not None:
            m = check_vector(m, X.shape[0], "m")
        data = MissingDataset.from_arrays(X, y, m)
        self.nuisances_ = fit_initial_nuisances(data, self.spec)
        self._store(estimate(data, self.nuisances_, self.implementation, self.tol, self.max_iter))
        return self


class MedianRegressionTMLE(BaseEstimator):
    """Targeted estimate of ``argmin_beta E|Y - expit(beta'X)|`` (no intercept)."""

    def __init__(self, box=DEFAULT_BOX, tol=1e-4, max_iter=50, warm_start=True):
        self.box = box
        self.tol = tol
        self.max_iter = max_iter
        self.warm_start = warm_start

    def fit(self, X, y):
        X = check_covariates(X, min_rows=2)
        y = check_vector(y, X.shape[0], "y")
        res = tmle_median(XYDataset(X, y), self.tol, self.max_iter, self.box, self.warm_start)
        self.coef_ = res.beta
        self.coef_substitution_ = res.beta_substitution
        self.trace_ = res.trace
        self.n_iter_ = res.trace.n_iter
        return self

    def predict(self, X):
        """Fitted conditional median ``expit(X @ coef_)``."""
        check_is_fitted(self, "coef_")
        return expit(check_covariates(X) @ self.coef_)


class ShiftEffectTMLE(_ReportMixin, BaseEstimator):
    """Targeted estimate of ``E mu(A + gamma, W)`` for a binary outcome."""

    def __init__(
        self,
        gamma=0.5,
        n_bins=20,
        exposure_model="multinomial",
        epsilon_mode="vector",
        a_range=None,
        tol=1e-4,
        max_iter=50,
    ):
        self.gamma = gamma
        self.n_bins = n_bins
        self.exposure_model = exposure_model
        self.epsilon_mode = epsilon_mode
        self.a_range = a_range
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, a):
        """``X`` holds the covariates W, ``a`` the exposure."""
        W = check_covariates(X)
        y = check_binary(check_vector(y, W.shape[0], "y"), "y")
        a = check_vector(a, W.shape[0], "a")
        lo, hi = (None, None) if self.a_range is None else self.a_range
        data = ShiftDataset(W, a, y, self.gamma, lo, hi)
        report = tmle_shift(data, self.n_bins, self.exposure_model, self.epsilon_mode, self.tol, self.max_iter)
        self._store(report)
        self.initial_estimate_ = report.extra["psi_initial"]
        return self


__all__ = ["MissingMeanTMLE", "MedianRegressionTMLE", "ShiftEffectTMLE"]
