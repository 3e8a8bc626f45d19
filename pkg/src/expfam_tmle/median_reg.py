"""TMLE for the median-regression parameter ``argmin_beta E|Y - expit(beta'X)|``.

The density is kept on the n observed X atoms, each with a conditional
N(m_i, 1) density for Y multiplied by the accumulated tilt factors
``exp(sum_k eps_k' D(beta_k; x, y))``. Because ``D = -grad g * sign(y - g)``,
every factor is piecewise constant in y with one breakpoint per tilt, so all
conditional integrals are exact sums of normal-CDF pieces.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, ndtr

from .core import DEFAULT_MAX_ITER, DEFAULT_TOL, FluctuationStep, TmleTrace, expit, run_tmle
from .exceptions import BoundaryWarning, DataValidationError, QuadratureError
from .optim import ConcaveObjective, maximize_concave

DEFAULT_BOX = (-10.0, 15.0)
GRID_STEPS = (1.0, 0.1, 0.01, 0.001)
REFINE_HALF_WIDTH = 6
POLISH_HALF_WIDTH = 3
NORMALIZATION_TOL = 1e-8
# keep (grid points x atoms) blocks around this many doubles
_BLOCK = 2_000_000
_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _phi(z):
    return np.exp(-0.5 * z * z) / _SQRT_2PI


@dataclass(frozen=True)
class XYDataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=float)
        if y.shape != (x.shape[0],):
            raise DataValidationError("x and y must have the same number of rows")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DataValidationError("x and y must be finite")
        for name, arr in (("x", x), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.x.shape[0]


def g_link(x, beta):
    """``expit(beta'x)`` and its gradient in beta. Row-wise for 2-D ``x``."""
    x = np.asarray(x, dtype=float)
    g = expit(x @ np.asarray(beta, dtype=float))
    grad = (np.asarray(g) * (1.0 - np.asarray(g)))[..., None] * x
    return g, grad


def eif_median(beta, x, y):
    """Unnormalized EIF ``-grad g(x, beta) * sign(y - g(x, beta))`` with sign(0) = 0."""
    g, grad = g_link(x, beta)
    return -grad * np.sign(np.asarray(y, dtype=float) - g)[..., None]


class TiltedXYDensity:
    """Joint density of (X, Y): weighted X atoms times tilted normal Y-densities.

    Parameters
    ----------
    x : array (n, d)
        Atom locations.
    mean : array (n,)
        Means of the unit-variance normal base densities.
    weights : array (n,), optional
        Atom weights (normalized internally); uniform by default.
    tilts : sequence of (eps, beta)
        Accumulated tilts, oldest first.
    """

    def __init__(self, x, mean, weights=None, tilts=()):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        self.x = x
        self.mean = np.asarray(mean, dtype=float)
        n = x.shape[0]
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("atom weights must be nonnegative with positive total")
        self.weights = w / w.sum()
        self.tilts = tuple((np.asarray(e, float).copy(), np.asarray(b, float).copy()) for e, b in tilts)
        if self.tilts:
            cols = [self._tilt_column(e, b) for e, b in self.tilts]
            self._b = np.column_stack([c[0] for c in cols])
            self._a = np.column_stack([c[1] for c in cols])
        else:
            self._b = np.zeros((n, 0))
            self._a = np.zeros((n, 0))
        self._build()

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def _tilt_column(self, eps, beta):
        g, grad = g_link(self.x, beta)
        return g, -grad @ eps

    def _build(self):
        n = self.n
        order = np.argsort(self._b, axis=1)
        bs = np.take_along_axis(self._b, order, 1)
        a_sorted = np.take_along_axis(self._a, order, 1)
        K = bs.shape[1]
        # log tilt factor on each of the K+1 pieces: below all breakpoints it is -sum(a)
        lf = np.empty((n, K + 1))
        lf[:, 0] = -a_sorted.sum(axis=1)
        lf[:, 1:] = lf[:, [0]] + 2.0 * np.cumsum(a_sorted, axis=1)
        lo = np.concatenate([np.full((n, 1), -np.inf), bs], axis=1)
        hi = np.concatenate([bs, np.full((n, 1), np.inf)], axis=1)
        zl = lo - self.mean[:, None]
        zh = hi - self.mean[:, None]
        Pl, Ph = ndtr(zl), ndtr(zh)
        fl, fh = _phi(zl), _phi(zh)
        with np.errstate(divide="ignore"):
            log_mass = lf + np.log(Ph - Pl)
        self.log_normalizers = logsumexp(log_mass, axis=1)
        kap = np.exp(lf - self.log_normalizers[:, None])
        piece_mass = kap * (Ph - Pl)
        if np.max(np.abs(piece_mass.sum(axis=1) - 1.0)) > NORMALIZATION_TOL:
            raise QuadratureError("conditional Y-density does not integrate to 1")
        piece_m1 = kap * (self.mean[:, None] * (Ph - Pl) - (fh - fl))
        zero = np.zeros((n, 1))
        self._F0 = np.concatenate([zero, np.cumsum(piece_mass, axis=1)[:, :-1]], axis=1)
        self._M0 = np.concatenate([zero, np.cumsum(piece_m1, axis=1)[:, :-1]], axis=1)
        self._kap, self._Pl, self._fl = kap, Pl, fl
        self.conditional_mean = piece_m1.sum(axis=1)
        self._bs = bs
        self._K = K
        # breakpoints lie in (0, 1): shifting atom j by 4j makes one globally sorted key array
        self._shift = 4.0 * np.arange(n)
        self._keys = (bs + self._shift[:, None]).ravel()

    def _piece(self, t):
        """Piece index of every t[:, j] within atom j (t values in [0, 1])."""
        pos = np.searchsorted(self._keys, t + self._shift)
        return pos - np.arange(self.n) * self._K

    def cdf_m1(self, t):
        """``P_j(Y <= t)`` and ``E_j[Y 1{Y <= t}]`` for t of shape (G, n) in [0, 1]."""
        t = np.atleast_2d(t)
        idx = self._piece(t)
        cols = np.arange(self.n)
        kap = self._kap[cols, idx]
        z = t - self.mean
        P = ndtr(z)
        dP = P - self._Pl[cols, idx]
        F = self._F0[cols, idx] + kap * dP
        M1 = self._M0[cols, idx] + kap * (self.mean * dP - (_phi(z) - self._fl[cols, idx]))
        return F, M1

    def cdf_pdf(self, t):
        """``P_j(Y <= t)`` and the density at t, for t of shape (G, n) in [0, 1]."""
        t = np.atleast_2d(t)
        idx = self._piece(t)
        cols = np.arange(self.n)
        kap = self._kap[cols, idx]
        z = t - self.mean
        F = self._F0[cols, idx] + kap * (ndtr(z) - self._Pl[cols, idx])
        return F, kap * _phi(z)

    def conditional_density(self, i: int, y):
        """Density of Y given the i-th atom, for arbitrary real y."""
        y = np.asarray(y, dtype=float)
        lf = np.sum(self._a[i] * np.sign(y[..., None] - self._b[i]), axis=-1)
        return _phi(y - self.mean[i]) * np.exp(lf - self.log_normalizers[i])

    def risk(self, betas) -> np.ndarray:
        """``E|Y - expit(beta'X)|`` for each row of ``betas`` (shape (G, d))."""
        B = np.atleast_2d(np.asarray(betas, dtype=float))
        out = np.empty(B.shape[0])
        step = max(1, _BLOCK // self.n)
        for s in range(0, B.shape[0], step):
            t = expit(B[s : s + step] @ self.x.T)
            F, M1 = self.cdf_m1(t)
            R = (self.conditional_mean - t) + 2.0 * (t * F - M1)
            out[s : s + step] = R @ self.weights
        return out

    def risk_derivatives(self, beta):
        """Risk, gradient and Hessian at a single beta (the risk is C^1 in beta)."""
        beta = np.asarray(beta, dtype=float)
        g, grad = g_link(self.x, beta)
        F, M1 = self.cdf_m1(g[None, :])
        _, f = self.cdf_pdf(g[None, :])
        F, M1, f = F[0], M1[0], f[0]
        value = float(self.weights @ ((self.conditional_mean - g) + 2.0 * (g * F - M1)))
        c = self.weights * (2.0 * F - 1.0)
        gradient = grad.T @ c
        curv = self.weights * (2.0 * f * (g * (1 - g)) ** 2 + (2.0 * F - 1.0) * g * (1 - g) * (1 - 2 * g))
        hessian = (self.x * curv[:, None]).T @ self.x
        return value, gradient, hessian

    def upper_mass(self, beta) -> np.ndarray:
        """``P_j(Y > g(x_j, beta))`` per atom."""
        g, _ = g_link(self.x, beta)
        F, _ = self.cdf_m1(g[None, :])
        return 1.0 - F[0]

    def mean_eif(self, beta) -> np.ndarray:
        """``E_p D(beta; X, Y)``."""
        g, grad = g_link(self.x, beta)
        q = self.upper_mass(beta)
        return -(self.weights * (2.0 * q - 1.0)) @ grad

    def tilt(self, eps, beta) -> "TiltedXYDensity":
        return tilt_xy(self, eps, beta)


def risk_abs(p: TiltedXYDensity, beta) -> float:
    """``E_p |Y - expit(beta'X)|``."""
    return float(p.risk(np.asarray(beta, dtype=float)[None, :])[0])


def initial_density(data: XYDataset) -> TiltedXYDensity:
    """Normal Y|X with OLS main-terms mean and unit variance; empirical X."""
    A = np.column_stack([np.ones(data.n), data.x])
    coef, *_ = np.linalg.lstsq(A, data.y, rcond=None)
    return TiltedXYDensity(data.x, A @ coef)


def tilt_xy(p: TiltedXYDensity, eps, beta) -> TiltedXYDensity:
    """Apply the joint factor ``exp(eps' D(beta; x, y))`` and renormalize."""
    eps = np.asarray(eps, dtype=float)
    beta = np.asarray(beta, dtype=float)
    _, grad = g_link(p.x, beta)
    a = -grad @ eps
    q = p.upper_mass(beta)
    # atom mass multiplies by its conditional normalizer, computed in log space
    with np.errstate(divide="ignore"):
        log_z = np.logaddexp(a + np.log(q), -a + np.log1p(-q))
    logw = np.log(p.weights) + log_z
    w = np.exp(logw - logw.max())
    return TiltedXYDensity(p.x, p.mean, w, p.tilts + ((eps, beta),))


def _lattice(center, half_width: int, step: float, lo: float, hi: float) -> np.ndarray:
    offsets = np.arange(-half_width, half_width + 1) * step
    axes = [np.clip(c + offsets, lo, hi) for c in center]
    pts = np.array(list(itertools.product(*axes)))
    return np.unique(np.round(pts, 6), axis=0)


def _best(points, risks):
    rmin = risks.min()
    tied = np.flatnonzero(risks <= rmin + 1e-13 * max(1.0, abs(rmin)))
    j = tied[np.argmin(np.linalg.norm(points[tied], axis=1))]
    return points[j]


def _on_window_edge(point, center, half_width, step, lo, hi) -> bool:
    far = np.abs(point - center) >= half_width * step - 1e-9
    inside = (point > lo + 1e-9) & (point < hi - 1e-9)
    return bool(np.any(far & inside))


def _grid_search(p, lo, hi):
    d = p.x.shape[1]
    axis = np.arange(lo, hi + 0.5 * GRID_STEPS[0], GRID_STEPS[0])
    pts = np.array(list(itertools.product(*([axis] * d))))
    c = _best(pts, p.risk(pts))
    for h in GRID_STEPS[1:]:
        pts = _lattice(c, REFINE_HALF_WIDTH, h, lo, hi)
        c = _best(pts, p.risk(pts))
    return c


def _polish(p, start, lo, hi, max_moves=200):
    """Walk a (2w+1)^d window on the finest lattice until its best point is interior."""
    h = GRID_STEPS[-1]
    c = np.clip(np.round(start, 3), lo, hi)
    for _ in range(max_moves):
        pts = _lattice(c, POLISH_HALF_WIDTH, h, lo, hi)
        best = _best(pts, p.risk(pts))
        if not _on_window_edge(best, c, POLISH_HALF_WIDTH, h, lo, hi):
            return best
        c = best
    return None


def minimize_risk_newton(p: TiltedXYDensity, start, max_iter: int = 100):
    """Continuous minimizer of the (smooth) risk by safeguarded Newton descent."""
    obj = ConcaveObjective(
        lambda b: -p.risk_derivatives(b)[0],
        lambda b: -p.risk_derivatives(b)[1],
        lambda b: -p.risk_derivatives(b)[2],
    )
    return maximize_concave(obj, np.asarray(start, dtype=float), max_iter=max_iter, gtol=1e-12)


def argmin_beta(p: TiltedXYDensity, box=DEFAULT_BOX, start=None) -> np.ndarray:
    """Minimize the risk over the box on a lattice of step 1e-3.

    Without ``start``: a full coarse grid (step 1) followed by three
    refinements (0.1, 0.01, 0.001), each over a 13-point-per-axis window.
    With ``start``: Newton on the smooth risk from ``start``, then a walking
    7-point window on the 1e-3 lattice; falls back to the full search if
    Newton fails or leaves the box. Ties go to the smallest norm.
    """
    lo, hi = map(float, box)
    beta = None
    if start is not None:
        res = minimize_risk_newton(p, start)
        inside = bool(np.all((res.x >= lo) & (res.x <= hi)))
        if np.all(np.isfinite(res.x)) and (res.converged or not inside):
            # an escaped Newton path points at the boundary; polish from the clipped point
            beta = _polish(p, res.x, lo, hi)
    if beta is None:
        beta = _grid_search(p, lo, hi)
    beta = np.round(beta, 3)
    if np.any(np.isclose(beta, lo) | np.isclose(beta, hi)):
        warnings.warn(f"risk minimizer {beta.tolist()} lies on the search box boundary", BoundaryWarning, stacklevel=2)
    return beta


def epsilon_objective(p: TiltedXYDensity, data: XYDataset, beta) -> ConcaveObjective:
    """Joint-tilt log-likelihood ``eps' sum D_i - n log sum_j w_j Z_j(eps)``."""
    beta = np.asarray(beta, dtype=float)
    _, grad = g_link(p.x, beta)
    v = -grad
    q = p.upper_mass(beta)
    sumD = eif_median(beta, data.x, data.y).sum(axis=0)
    n = data.n
    logw = np.log(p.weights)
    with np.errstate(divide="ignore"):
        logq, log1q = np.log(q), np.log1p(-q)

    def parts(e):
        a = v @ e
        lp = logw + a + logq
        lm = logw - a + log1q
        lz = np.logaddexp(lp, lm)
        logS = logsumexp(lz)
        return np.exp(lp - logS), np.exp(lm - logS), logS

    def value(e):
        return float(e @ sumD - n * parts(e)[2])

    def gradient(e):
        up, down, _ = parts(e)
        return sumD - n * ((up - down) @ v)

    def hessian(e):
        up, down, _ = parts(e)
        e1 = (up - down) @ v
        e2 = (v * (up + down)[:, None]).T @ v
        return -n * (e2 - np.outer(e1, e1))

    return ConcaveObjective(value, gradient, hessian)


def epsilon_mle_median(p: TiltedXYDensity, data: XYDataset, beta) -> np.ndarray:
    obj = epsilon_objective(p, data, beta)
    return maximize_concave(obj, np.zeros(p.x.shape[1])).x


class MedianTmleResult(NamedTuple):
    beta: np.ndarray
    trace: TmleTrace
    beta_substitution: np.ndarray
    density: TiltedXYDensity


def tmle_median(
    data: XYDataset,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    box=DEFAULT_BOX,
    warm_start: bool = True,
) -> MedianTmleResult:
    """Iterate argmin / epsilon-MLE / joint tilt from the normal initial fit.

    ``beta_substitution`` is the argmin at the initial density (the
    substitution estimator); ``beta`` is the argmin at the final density.
    """
    if data.n < data.x.shape[1] + 1:
        raise DataValidationError("need at least d + 1 observations")
    p0 = initial_density(data)
    beta0 = argmin_beta(p0, box)

    def step(state):
        p, beta = state
        obj = epsilon_objective(p, data, beta)
        res = maximize_concave(obj, np.zeros(p.x.shape[1]))
        p_new = tilt_xy(p, res.x, beta)
        beta_new = argmin_beta(p_new, box, start=beta if warm_start else None)
        mean_eif = eif_median(beta_new, data.x, data.y).mean(axis=0)
        return FluctuationStep(res.x, (p_new, beta_new), res.value, mean_eif)

    (p_final, beta), trace = run_tmle(step, (p0, beta0), tol, max_iter)
    return MedianTmleResult(beta, trace, beta0, p_final)
