"""TMLE of ``E mu(A + gamma, W)``: the mean outcome after shifting a continuous exposure.

The exposure density p_A(a|w) is a histogram on B equal bins whose per-row
probabilities come from a multinomial-logit working model in w. Targeting
fluctuates logit mu along ``H_Y(a, w) = p_A(a - gamma|w) / p_A(a|w)`` and
tilts the bin probabilities by ``exp(eps_A H_A)``, where
``H_A(a, w) = mu(a + gamma, w) - E{mu(A + gamma, W) | W = w}``.

Only three families of points ever need mu: the observed (A_i, W_i), the
shifted (A_i + gamma, W_i) and the shifted bin midpoints (mid_b + gamma, W_i).
The state tracks logit mu at exactly those points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from scipy.special import logsumexp
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from .core import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    EstimateReport,
    FluctuationStep,
    expit,
    logit,
    report_from_eif,
    run_tmle,
)
from .exceptions import DataValidationError, PositivityError
from .optim import ConcaveObjective, fit_logistic_irls, maximize_concave

EpsilonMode = Literal["vector", "shared"]


@dataclass(frozen=True)
class ShiftDataset:
    w: np.ndarray
    a: np.ndarray
    y: np.ndarray
    gamma: float
    a_min: float | None = None
    a_max: float | None = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        a = np.asarray(self.a, dtype=float)
        y = np.asarray(self.y, dtype=float)
        n = w.shape[0]
        if a.shape != (n,) or y.shape != (n,):
            raise DataValidationError("w, a and y must have the same number of rows")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
            raise DataValidationError("w and a must be finite")
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise DataValidationError("y must be binary 0/1")
        if not np.isfinite(self.gamma):
            raise DataValidationError("gamma must be finite")
        a_min = float(a.min()) if self.a_min is None else float(self.a_min)
        a_max = float(a.max()) if self.a_max is None else float(self.a_max)
        if not a_min < a_max:
            raise DataValidationError("exposure range must have a_min < a_max")
        if a.min() < a_min or a.max() > a_max:
            raise DataValidationError(f"exposure values outside the declared range [{a_min}, {a_max}]")
        for name, arr in (("w", w), ("a", a), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "a_min", a_min)
        object.__setattr__(self, "a_max", a_max)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n(self) -> int:
        return self.w.shape[0]


class HistogramConditionalDensity:
    """Piecewise-constant density of A given W on equal-width bins.

    ``model='multinomial'`` fits a multinomial logit of the bin label on w
    (weak ridge); ``model='marginal'`` ignores w and uses bin frequencies.
    """

    def __init__(self, a_min: float, a_max: float, n_bins: int = 20, model: str = "multinomial", ridge: float = 1e-4):
        if n_bins < 2:
            raise ValueError("need at least two bins")
        if model not in ("multinomial", "marginal"):
            raise ValueError(f"unknown exposure model {model!r}")
        self.a_min, self.a_max, self.n_bins = float(a_min), float(a_max), int(n_bins)
        self.model = model
        self.ridge = ridge
        self.edges = np.linspace(self.a_min, self.a_max, self.n_bins + 1)
        self.width = (self.a_max - self.a_min) / self.n_bins
        self.midpoints = 0.5 * (self.edges[:-1] + self.edges[1:])

    def bin_index(self, a) -> np.ndarray:
        """Bin of each a, or -1 outside ``[a_min, a_max]``."""
        a = np.asarray(a, dtype=float)
        idx = np.floor((a - self.a_min) / self.width).astype(int)
        idx = np.where(np.isclose(a, self.a_max, rtol=0, atol=1e-12 * self.width), self.n_bins - 1, idx)
        outside = (a < self.a_min) | (a > self.a_max) | (idx < 0) | (idx >= self.n_bins)
        return np.where(outside, -1, np.clip(idx, 0, self.n_bins - 1))

    def fit(self, w, a) -> "HistogramConditionalDensity":
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        labels = self.bin_index(a)
        if np.any(labels < 0):
            raise DataValidationError("exposure outside the histogram range")
        counts = np.bincount(labels, minlength=self.n_bins)
        self.frequencies_ = counts / counts.sum()
        self.classes_ = np.flatnonzero(counts)
        self.classifier_ = None
        if self.model == "multinomial" and self.classes_.size > 1:
            clf = LogisticRegression(C=1.0 / self.ridge, max_iter=1000, tol=1e-8)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                clf.fit(w, labels)
            self.classifier_ = clf
        return self

    def bin_probabilities(self, w) -> np.ndarray:
        """Per-row bin probabilities, shape (n, B); bins never observed get 0."""
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if self.classifier_ is None:
            return np.tile(self.frequencies_, (w.shape[0], 1))
        P = np.zeros((w.shape[0], self.n_bins))
        P[:, self.classifier_.classes_] = self.classifier_.predict_proba(w)
        return P / P.sum(axis=1, keepdims=True)

    def density(self, a, w) -> np.ndarray:
        P = self.bin_probabilities(w)
        idx = self.bin_index(a)
        vals = P[np.arange(P.shape[0]), np.clip(idx, 0, None)] / self.width
        return np.where(idx >= 0, vals, 0.0)


@dataclass(frozen=True)
class ShiftState:
    """Current estimate of (mu, p_A, p_W), restricted to the points that matter.

    ``bin_probs``       -- (n, B) probabilities of the exposure bins given W_i;
    ``logit_mu_obs``    -- logit mu(A_i, W_i);
    ``logit_mu_shift``  -- logit mu(A_i + gamma, W_i);
    ``logit_mu_mid``    -- (n, B) logit mu(mid_b + gamma, W_i);
    ``w_weights``       -- empirical covariate weights.
    """

    bin_probs: np.ndarray
    logit_mu_obs: np.ndarray
    logit_mu_shift: np.ndarray
    logit_mu_mid: np.ndarray
    w_weights: np.ndarray
    obs_bin: np.ndarray
    shift_bin: np.ndarray
    back_bin: np.ndarray
    mid_shift_bin: np.ndarray
    midpoints: np.ndarray
    width: float

    @property
    def psi(self) -> float:
        return float(self.w_weights @ conditional_mean_shifted(self))


def initial_state(data: ShiftDataset, n_bins: int = 20, pa_model: str = "multinomial") -> ShiftState:
    """Logistic mu in (1, a, w) and the histogram exposure density."""
    hist = HistogramConditionalDensity(data.a_min, data.a_max, n_bins, pa_model).fit(data.w, data.a)
    design = np.column_stack([np.ones(data.n), data.a, data.w])
    mu_fit = fit_logistic_irls(design, data.y)
    beta = mu_fit.coefficients
    wpart = beta[0] + data.w @ beta[2:]
    mids = hist.midpoints
    g = data.gamma
    return ShiftState(
        bin_probs=hist.bin_probabilities(data.w),
        logit_mu_obs=wpart + beta[1] * data.a,
        logit_mu_shift=wpart + beta[1] * (data.a + g),
        logit_mu_mid=wpart[:, None] + beta[1] * (mids[None, :] + g),
        w_weights=np.full(data.n, 1.0 / data.n),
        obs_bin=hist.bin_index(data.a),
        shift_bin=hist.bin_index(data.a + g),
        back_bin=hist.bin_index(data.a - g),
        mid_shift_bin=hist.bin_index(mids + g),
        midpoints=mids,
        width=hist.width,
    )


def _row_lookup(P, idx):
    """``P[i, idx_i]`` per row, 0 where idx is -1."""
    vals = P[np.arange(P.shape[0]), np.clip(idx, 0, None)]
    return np.where(idx >= 0, vals, 0.0)


def _col_lookup(P, idx):
    """Columns ``P[:, idx_b]`` for a (B,) index vector, 0 where idx is -1."""
    return np.where(idx >= 0, P[:, np.clip(idx, 0, None)], 0.0)


def _ratio(num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num / den
    return np.where(den > 0, r, 0.0)


def density_ratio_shift(state: ShiftState) -> dict[str, np.ndarray]:
    """``p_A(a - gamma|w) / p_A(a|w)`` at the three tracked point families.

    The numerator is 0 when a - gamma falls outside the support; points whose
    own density is 0 get ratio 0 (they carry no mass). An observed exposure
    with zero density raises :class:`PositivityError`.
    """
    P = state.bin_probs
    p_obs = _row_lookup(P, state.obs_bin)
    if np.any(p_obs <= 0):
        raise PositivityError("exposure density is zero at an observed exposure")
    return {
        "obs": _row_lookup(P, state.back_bin) / p_obs,
        "shift": _ratio(np.where(state.shift_bin >= 0, p_obs, 0.0), _row_lookup(P, state.shift_bin)),
        "mid": _ratio(np.where(state.mid_shift_bin >= 0, P, 0.0), _col_lookup(P, state.mid_shift_bin)),
    }


def conditional_mean_shifted(state: ShiftState) -> np.ndarray:
    """``E{mu(A + gamma, W) | W_i}`` by the midpoint rule over the histogram."""
    return np.sum(state.bin_probs * expit(state.logit_mu_mid), axis=1)


def clever_terms(state: ShiftState, y):
    """``(h_y, h_a, h_w)`` at each observation; their EIF combination is ``h_y (y - mu) + h_a + h_w``."""
    h_y = density_ratio_shift(state)["obs"]
    cm = conditional_mean_shifted(state)
    h_a = expit(state.logit_mu_shift) - cm
    h_w = cm - state.psi
    return h_y, h_a, h_w


def eif_shift(state: ShiftState, y) -> np.ndarray:
    h_y, h_a, h_w = clever_terms(state, y)
    return h_y * (np.asarray(y, float) - expit(state.logit_mu_obs)) + h_a + h_w


def _epsilon_a_objective(state: ShiftState) -> ConcaveObjective:
    cm = conditional_mean_shifted(state)
    h_obs = expit(state.logit_mu_shift) - cm
    h_mid = expit(state.logit_mu_mid) - cm[:, None]
    with np.errstate(divide="ignore"):
        logP = np.log(state.bin_probs)
    sum_h = h_obs.sum()

    def tilted(e):
        lw = logP + e * h_mid
        lz = logsumexp(lw, axis=1)
        return np.exp(lw - lz[:, None]), lz

    def value(e):
        return float(e[0] * sum_h - tilted(e[0])[1].sum())

    def gradient(e):
        q, _ = tilted(e[0])
        return np.array([sum_h - np.sum(q * h_mid)])

    def hessian(e):
        q, _ = tilted(e[0])
        m1 = np.sum(q * h_mid, axis=1)
        return np.array([[-np.sum(np.sum(q * h_mid**2, axis=1) - m1**2)]])

    return ConcaveObjective(value, gradient, hessian)


def _epsilon_y_objective(state: ShiftState, y, h_y) -> ConcaveObjective:
    off = state.logit_mu_obs

    def value(e):
        eta = off + e[0] * h_y
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    def gradient(e):
        return np.array([np.sum(h_y * (y - expit(off + e[0] * h_y)))])

    def hessian(e):
        m = expit(off + e[0] * h_y)
        return np.array([[-np.sum(h_y**2 * m * (1 - m))]])

    return ConcaveObjective(value, gradient, hessian)


def apply_fluctuation(state: ShiftState, eps_y: float, eps_a: float) -> ShiftState:
    """Move mu along H_Y and tilt the bin probabilities along H_A."""
    ratios = density_ratio_shift(state)
    cm = conditional_mean_shifted(state)
    h_mid = expit(state.logit_mu_mid) - cm[:, None]
    with np.errstate(divide="ignore"):
        lw = np.log(state.bin_probs) + eps_a * h_mid
    P = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
    return replace(
        state,
        bin_probs=P,
        logit_mu_obs=state.logit_mu_obs + eps_y * ratios["obs"],
        logit_mu_shift=state.logit_mu_shift + eps_y * ratios["shift"],
        logit_mu_mid=state.logit_mu_mid + eps_y * ratios["mid"],
    )


def fluctuate_shift(state: ShiftState, data: ShiftDataset, epsilon_mode: EpsilonMode = "vector"):
    """Fit ``(eps_Y, eps_A)`` by maximum likelihood; returns ``(eps, new_state, loglik_gain)``.

    ``'vector'`` fits the two components separately (IRLS for eps_Y, Newton
    on the tilted-histogram likelihood for eps_A); ``'shared'`` fits a single
    scalar used for both.
    """
    h_y = density_ratio_shift(state)["obs"]
    obj_a = _epsilon_a_objective(state)
    zero = np.zeros(1)
    if epsilon_mode == "vector":
        fit = fit_logistic_irls(h_y[:, None], data.y, offset=state.logit_mu_obs)
        eps_y = float(fit.coefficients[0])
        res_a = maximize_concave(obj_a, zero)
        eps_a = float(res_a.x[0])
        obj_y = _epsilon_y_objective(state, data.y, h_y)
        gain = obj_y.value(np.array([eps_y])) - obj_y.value(zero) + res_a.value - obj_a.value(zero)
        eps = np.array([eps_y, eps_a])
    elif epsilon_mode == "shared":
        obj_y = _epsilon_y_objective(state, data.y, h_y)
        joint = ConcaveObjective(
            lambda e: obj_y.value(e) + obj_a.value(e),
            lambda e: obj_y.gradient(e) + obj_a.gradient(e),
            lambda e: obj_y.hessian(e) + obj_a.hessian(e),
        )
        res = maximize_concave(joint, zero)
        eps_y = eps_a = float(res.x[0])
        gain = res.value - joint.value(zero)
        eps = np.array([eps_y])
    else:
        raise ValueError(f"epsilon_mode must be 'vector' or 'shared', got {epsilon_mode!r}")
    return eps, apply_fluctuation(state, eps_y, eps_a), max(float(gain), 0.0)


def tmle_shift(
    data: ShiftDataset,
    n_bins: int = 20,
    pa_model: str = "multinomial",
    epsilon_mode: EpsilonMode = "vector",
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    state: ShiftState | None = None,
) -> EstimateReport:
    """Targeted estimate of ``E mu(A + gamma, W)`` with an EIF-variance interval."""
    if data.n < 20:
        raise DataValidationError("need at least 20 observations")
    if state is None:
        state = initial_state(data, n_bins, pa_model)
    psi_initial = state.psi

    def step(s: ShiftState) -> FluctuationStep:
        eps, new, gain = fluctuate_shift(s, data, epsilon_mode)
        return FluctuationStep(eps, new, gain, np.array([np.mean(eif_shift(new, data.y))]))

    final, trace = run_tmle(step, state, tol, max_iter)
    psi = final.psi
    return report_from_eif(psi, eif_shift(final, data.y), trace, psi_initial=psi_initial)


def saturated_state(data: ShiftDataset, n_bins: int) -> ShiftState:
    """State with empirical cell means for mu and empirical bin frequencies per distinct w.

    Only meaningful for discrete fixtures where every (bin, w) cell is
    observed; used to check the no-shift collapse.
    """
    hist = HistogramConditionalDensity(data.a_min, data.a_max, n_bins, "marginal")
    obs_bin = hist.bin_index(data.a)
    keys = [tuple(r) for r in data.w]
    groups: dict[tuple, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    P = np.zeros((data.n, n_bins))
    cell_mean = np.full((data.n, n_bins), 0.5)
    for rows in groups.values():
        rows = np.asarray(rows)
        counts = np.bincount(obs_bin[rows], minlength=n_bins)
        P[rows] = counts / counts.sum()
        for b in np.flatnonzero(counts):
            cell_mean[rows, b] = data.y[rows[obs_bin[rows] == b]].mean()
    lm = logit(cell_mean)
    mid_bin = hist.bin_index(hist.midpoints + data.gamma)
    shift_bin = hist.bin_index(data.a + data.gamma)
    rows = np.arange(data.n)
    return ShiftState(
        bin_probs=P,
        logit_mu_obs=lm[rows, obs_bin],
        logit_mu_shift=np.where(shift_bin >= 0, lm[rows, np.clip(shift_bin, 0, None)], 0.0),
        logit_mu_mid=np.where(mid_bin >= 0, lm[:, np.clip(mid_bin, 0, None)], 0.0),
        w_weights=np.full(data.n, 1.0 / data.n),
        obs_bin=obs_bin,
        shift_bin=shift_bin,
        back_bin=hist.bin_index(data.a - data.gamma),
        mid_shift_bin=mid_bin,
        midpoints=hist.midpoints,
        width=hist.width,
    )
