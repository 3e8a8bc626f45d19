"""Data generators, truth oracles and the replicated simulation study."""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import integrate
from scipy.special import log_expit, ndtr

from .core import expit
from .exceptions import CellUnreliableWarning, TMLEError
from .median_reg import DEFAULT_BOX, XYDataset, _grid_search, argmin_beta, tmle_median
from .missing_mean import IMPLEMENTATIONS, SPECS, MissingDataset, estimate, fit_initial_nuisances
from .shift_effect import ShiftDataset, tmle_shift

# logit P(M = 1 | X2) = c0 + c1 X2 + c2 X2^2
MECHANISMS = {"D1": (1.0, 2.0, 0.0), "D2": (-1.0, 2.0, 0.0), "D3": (-6.0, 2.0, 2.0)}
MEDIAN_DESIGNS = ("D1", "D2")
MEDIAN_D1_BETA = np.array([1.5, 2.5])
EXP_RATE = 3.0

SHIFT_RANGE = (-1.5, 3.5)
SHIFT_BINS = 20
SHIFT_GAMMA = 0.5

FAILURE_SHARE = 0.05
_CHUNK = 1_000_000


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _check_mechanism(mechanism: str) -> tuple[float, float, float]:
    try:
        return MECHANISMS[mechanism]
    except KeyError:
        raise ValueError(f"mechanism must be one of {sorted(MECHANISMS)}, got {mechanism!r}") from None


def true_mu(x2):
    """``P(Y = 1 | X)`` of the missing-outcome design; depends on X2 only."""
    x2 = np.asarray(x2, dtype=float)
    return expit(x2 - x2**2)


def true_pm(x2, mechanism: str):
    """``P(M = 1 | X)`` under the named missingness mechanism."""
    c0, c1, c2 = _check_mechanism(mechanism)
    x2 = np.asarray(x2, dtype=float)
    return expit(c0 + c1 * x2 + c2 * x2**2)


def mechanism_curves(x2=None) -> dict[str, np.ndarray]:
    """Observation probability of every mechanism on a grid of X2 values."""
    x2 = np.linspace(-4.0, 4.0, 201) if x2 is None else np.asarray(x2, dtype=float)
    out = {"x2": x2}
    out.update({m: true_pm(x2, m) for m in MECHANISMS})
    return out


def _draw_x(n, rng, x1_var, x2_cond_var):
    x1 = rng.normal(0.0, math.sqrt(x1_var), n)
    x2 = x1 + rng.normal(0.0, math.sqrt(x2_cond_var), n)
    return x1, x2


def gen_missing(n: int, mechanism: str, seed, x1_var: float = 0.5, x2_cond_var: float = 0.5) -> MissingDataset:
    """Binary outcome missing at random.

    X1 ~ N(0, x1_var), X2 | X1 ~ N(X1, x2_cond_var), Y ~ Ber(expit(X2 - X2^2)),
    M ~ Ber(expit(c0 + c1 X2 + c2 X2^2)) with coefficients from ``MECHANISMS``.
    """
    _check_mechanism(mechanism)
    rng = _rng(seed)
    x1, x2 = _draw_x(n, rng, x1_var, x2_cond_var)
    y = (rng.random(n) < true_mu(x2)).astype(float)
    m = (rng.random(n) < true_pm(x2, mechanism)).astype(np.int8)
    return MissingDataset(np.column_stack([x1, x2]), m, np.where(m == 1, y, np.nan))


def gen_median(n: int, design: str, seed) -> XYDataset:
    """X1, X2 ~ U(0, 1). D1: Y = -log(2)/3 + expit(1.5 X1 + 2.5 X2) + Exp(rate 3); D2: Y = exp(X1 + 2 X2) + N(0, 1)."""
    if design not in MEDIAN_DESIGNS:
        raise ValueError(f"design must be one of {MEDIAN_DESIGNS}, got {design!r}")
    rng = _rng(seed)
    x = rng.random((n, 2))
    if design == "D1":
        y = -math.log(2.0) / EXP_RATE + expit(x @ MEDIAN_D1_BETA) + rng.exponential(1.0 / EXP_RATE, n)
    else:
        y = np.exp(x[:, 0] + 2.0 * x[:, 1]) + rng.normal(size=n)
    return XYDataset(x, y)


def _shift_bin_probs(w):
    lo, hi = SHIFT_RANGE
    width = (hi - lo) / SHIFT_BINS
    mids = lo + width * (np.arange(SHIFT_BINS) + 0.5)
    logp = -0.5 * (mids[None, :] - (0.5 + np.asarray(w, float)[:, None])) ** 2
    P = np.exp(logp - logp.max(axis=1, keepdims=True))
    return P / P.sum(axis=1, keepdims=True), mids, width


def _draw_shift(n, rng):
    w = rng.random(n)
    P, mids, width = _shift_bin_probs(w)
    b = np.minimum((rng.random(n)[:, None] > np.cumsum(P, axis=1)).sum(axis=1), SHIFT_BINS - 1)
    a = mids[b] + width * (rng.random(n) - 0.5)
    return w, a


def gen_shift(n: int, seed, gamma: float = SHIFT_GAMMA) -> ShiftDataset:
    """W ~ U(0,1); exposure bin b with P(b|w) proportional to exp(-(mid_b - 0.5 - w)^2 / 2),
    A uniform inside the bin; Y ~ Ber(expit(-1 + A + W))."""
    rng = _rng(seed)
    w, a = _draw_shift(n, rng)
    y = (rng.random(n) < expit(-1.0 + a + w)).astype(float)
    return ShiftDataset(w, a, y, gamma, *SHIFT_RANGE)


class OracleValue(NamedTuple):
    value: float
    se: float


def _normal_expectation(f, sd: float) -> float:
    dens = lambda x: f(x) * math.exp(-0.5 * (x / sd) ** 2) / (sd * math.sqrt(2.0 * math.pi))  # noqa: E731
    val, _ = integrate.quad(dens, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def true_mean_exact(x1_var: float = 0.5, x2_cond_var: float = 0.5) -> float:
    """``E expit(X2 - X2^2)`` by adaptive quadrature over the normal X2 marginal."""
    return _normal_expectation(lambda x: float(true_mu(x)), math.sqrt(x1_var + x2_cond_var))


def efficiency_bound_exact(mechanism: str, x1_var: float = 0.5, x2_cond_var: float = 0.5) -> float:
    """``E[mu (1 - mu) / p_M] + Var(mu)`` by quadrature."""
    sd = math.sqrt(x1_var + x2_cond_var)
    psi = true_mean_exact(x1_var, x2_cond_var)

    c0, c1, c2 = _check_mechanism(mechanism)

    def integrand(x):
        mu = float(true_mu(x))
        eta = x - x * x
        # mu (1 - mu) / p_M in log space: both factors underflow in the tails
        log_ratio = log_expit(eta) + log_expit(-eta) - log_expit(c0 + c1 * x + c2 * x * x)
        return math.exp(log_ratio) + (mu - psi) ** 2

    return _normal_expectation(integrand, sd)


def efficiency_bound_oracle(
    mechanism: str, reps: int, seed, x1_var: float = 0.5, x2_cond_var: float = 0.5
) -> OracleValue:
    """Monte-Carlo ``Var D(p0, O)`` with the true mu, p_M and psi, plus its standard error."""
    _check_mechanism(mechanism)
    rng = _rng(seed)
    psi0 = true_mean_exact(x1_var, x2_cond_var)
    s1 = s2 = 0.0
    done = 0
    while done < reps:
        k = min(_CHUNK, reps - done)
        _, x2 = _draw_x(k, rng, x1_var, x2_cond_var)
        mu, pm = true_mu(x2), true_pm(x2, mechanism)
        y = (rng.random(k) < mu).astype(float)
        m = rng.random(k) < pm
        d2 = (np.where(m, (y - mu) / pm, 0.0) + mu - psi0) ** 2
        s1 += d2.sum()
        s2 += (d2**2).sum()
        done += k
    mean = s1 / reps
    var = max(s2 / reps - mean**2, 0.0)
    return OracleValue(float(mean), float(math.sqrt(var / reps)))


class ConditionalRiskModel:
    """Exact ``E|Y - expit(beta'x)|`` given each X draw for the median-regression designs.

    Quacks like the density used by ``argmin_beta`` (``x``, ``risk``,
    ``risk_derivatives``) so the same lattice search applies.
    """

    def __init__(self, x, design: str):
        self.x = np.asarray(x, dtype=float)
        self.design = design
        self.n = self.x.shape[0]
        if design == "D1":
            self.shift = expit(self.x @ MEDIAN_D1_BETA) - math.log(2.0) / EXP_RATE
        elif design == "D2":
            self.center = np.exp(self.x[:, 0] + 2.0 * self.x[:, 1])
        else:
            raise ValueError(f"unknown design {design!r}")

    def _parts(self, t):
        """Risk, CDF and density of Y|X at t (broadcast over rows of t)."""
        if self.design == "D1":
            lam = EXP_RATE
            u = t - self.shift
            pos = u > 0
            e = np.exp(-lam * np.where(pos, u, 0.0))
            r = np.where(pos, u - 1 / lam + 2 * e / lam, 1 / lam - u)
            F = np.where(pos, 1 - e, 0.0)
            f = np.where(pos, lam * e, 0.0)
        else:
            c = self.center - t
            phi = np.exp(-0.5 * c * c) / math.sqrt(2 * math.pi)
            r = c * (2 * ndtr(c) - 1) + 2 * phi
            F = 1 - ndtr(c)
            f = phi
        return r, F, f

    def risk(self, betas):
        B = np.atleast_2d(np.asarray(betas, dtype=float))
        out = np.empty(B.shape[0])
        step = max(1, 2_000_000 // self.n)
        for s in range(0, B.shape[0], step):
            r, _, _ = self._parts(expit(B[s : s + step] @ self.x.T))
            out[s : s + step] = r.mean(axis=1)
        return out

    def risk_derivatives(self, beta):
        g = expit(self.x @ np.asarray(beta, float))
        r, F, f = self._parts(g)
        gp = g * (1 - g)
        c = (2 * F - 1) / self.n
        grad = self.x.T @ (c * gp)
        curv = (2 * f * gp**2 + (2 * F - 1) * gp * (1 - 2 * g)) / self.n
        return float(r.mean()), grad, (self.x * curv[:, None]).T @ self.x


def true_value_oracle(problem: str, reps: int, seed, design: str = "D1", box=DEFAULT_BOX, **kwargs) -> OracleValue:
    """Monte-Carlo value of the estimand under the true generator.

    missing_mean: mean of ``expit(X2 - X2^2)``. median_reg: lattice argmin of
    the risk averaged over ``reps`` X draws with Y|X integrated exactly (the
    ``se`` field is NaN). shift_effect: mean of ``expit(-1 + A + gamma + W)``.
    """
    rng = _rng(seed)
    if problem == "missing_mean":
        x1_var = kwargs.get("x1_var", 0.5)
        x2_cond_var = kwargs.get("x2_cond_var", 0.5)
        s1 = s2 = 0.0
        done = 0
        while done < reps:
            k = min(_CHUNK, reps - done)
            _, x2 = _draw_x(k, rng, x1_var, x2_cond_var)
            mu = true_mu(x2)
            s1 += mu.sum()
            s2 += (mu**2).sum()
            done += k
        mean = s1 / reps
        return OracleValue(mean, math.sqrt(max(s2 / reps - mean**2, 0.0) / reps))
    if problem == "shift_effect":
        gamma = kwargs.get("gamma", SHIFT_GAMMA)
        s1 = s2 = 0.0
        done = 0
        while done < reps:
            k = min(_CHUNK, reps - done)
            w, a = _draw_shift(k, rng)
            v = expit(-1.0 + a + gamma + w)
            s1 += v.sum()
            s2 += (v**2).sum()
            done += k
        mean = s1 / reps
        return OracleValue(mean, math.sqrt(max(s2 / reps - mean**2, 0.0) / reps))
    if problem == "median_reg":
        x = rng.random((reps, 2))
        model = ConditionalRiskModel(x, design)
        # coarse localization on a subsample, then Newton and lattice polish on all draws
        lo, hi = map(float, box)
        start = _grid_search(ConditionalRiskModel(x[: min(reps, 100_000)], design), lo, hi)
        return OracleValue(argmin_beta(model, box, start=start), float("nan"))
    raise ValueError(f"unknown problem {problem!r}")


def true_shift_exact(gamma: float = SHIFT_GAMMA) -> float:
    """Shift-effect truth by quadrature: the bin integral of expit is a softplus difference."""
    lo, hi = SHIFT_RANGE
    width = (hi - lo) / SHIFT_BINS
    left = lo + width * np.arange(SHIFT_BINS)

    def given_w(w):
        P, _, _ = _shift_bin_probs(np.array([w]))
        z = -1.0 + gamma + w
        inner = (np.logaddexp(0.0, z + left + width) - np.logaddexp(0.0, z + left)) / width
        return float(P[0] @ inner)

    val, _ = integrate.quad(given_w, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12)
    return val


@dataclass(frozen=True)
class StudyConfig:
    """One simulation cell.

    ``mechanism`` is D1-D3 for missing_mean and D1-D2 for median_reg (ignored
    for shift_effect). ``spec`` is the working-model specification for
    missing_mean and the exposure model ('multinomial' or 'marginal') for
    shift_effect. ``reference`` overrides the oracle truth.
    """

    problem: str
    n: int
    replicates: int
    seed: int
    mechanism: str = "D1"
    spec: str = "i"
    implementations: tuple = (1, 2, 3, 4)
    workers: int = 1
    reference: tuple | None = None
    gamma: float = SHIFT_GAMMA
    n_bins: int = SHIFT_BINS
    epsilon_mode: str = "vector"
    tol: float = 1e-4
    max_iter: int = 50
    x1_var: float = 0.5
    x2_cond_var: float = 0.5

    def __post_init__(self):
        if self.problem not in ("missing_mean", "median_reg", "shift_effect"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.n < 20:
            raise ValueError("n must be >= 20")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.problem == "missing_mean":
            _check_mechanism(self.mechanism)
            if self.spec not in SPECS or self.spec == "main":
                raise ValueError(f"spec must be one of i, ii, iii, iv, got {self.spec!r}")
            bad = [k for k in self.implementations if k not in IMPLEMENTATIONS]
            if bad or not self.implementations:
                raise ValueError(f"implementations must be a nonempty subset of 1-4, got {self.implementations}")
        elif self.problem == "median_reg" and self.mechanism not in MEDIAN_DESIGNS:
            raise ValueError(f"median design must be one of {MEDIAN_DESIGNS}")
        elif self.problem == "shift_effect" and self.spec not in ("multinomial", "marginal"):
            raise ValueError("shift_effect spec must be 'multinomial' or 'marginal'")
        object.__setattr__(self, "implementations", tuple(self.implementations))
        if self.reference is not None:
            object.__setattr__(self, "reference", tuple(float(v) for v in np.atleast_1d(self.reference)))

    def labels(self) -> list[str]:
        if self.problem == "missing_mean":
            return [str(k) for k in self.implementations]
        if self.problem == "median_reg":
            return ["substitution", "tmle"]
        return ["tmle"]


class ReplicateOutcome(NamedTuple):
    estimates: dict  # label -> estimate array, or None on failure
    iterations: dict  # label -> iteration count
    converged: dict
    errors: dict  # label -> error message
    warnings: dict  # label -> list of warning categories


def run_replicate(config: StudyConfig, index: int) -> ReplicateOutcome:
    """One replicate with seed ``config.seed + index``; solver errors are recorded, not raised."""
    seed = config.seed + index
    est, its, conv, errs, warns = {}, {}, {}, {}, {}

    def record(label, fn):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                value, n_iter, ok = fn()
                est[label] = np.atleast_1d(np.asarray(value, dtype=float))
                its[label], conv[label] = n_iter, ok
            except (TMLEError, ArithmeticError, np.linalg.LinAlgError) as exc:
                est[label], its[label], conv[label] = None, 0, False
                errs[label] = f"{type(exc).__name__}: {exc}"
        warns[label] = sorted({w.category.__name__ for w in caught})

    if config.problem == "missing_mean":
        data = gen_missing(config.n, config.mechanism, seed, config.x1_var, config.x2_cond_var)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            nuis = fit_initial_nuisances(data, config.spec)
        for k in config.implementations:

            def fn(k=k):
                rep = estimate(data, nuis, k, config.tol, config.max_iter)
                return rep.psi_hat, rep.trace.n_iter, rep.trace.converged

            record(str(k), fn)
    elif config.problem == "median_reg":
        data = gen_median(config.n, config.mechanism, seed)
        holder = {}

        def tm():
            res = tmle_median(data, config.tol, config.max_iter)
            holder["res"] = res
            return res.beta, res.trace.n_iter, res.trace.converged

        record("tmle", tm)
        if "res" in holder:
            est["substitution"], its["substitution"], conv["substitution"] = holder["res"].beta_substitution, 0, True
            warns["substitution"] = []
        else:
            est["substitution"], its["substitution"], conv["substitution"] = None, 0, False
            errs["substitution"] = errs.get("tmle", "")
            warns["substitution"] = []
    else:
        data = gen_shift(config.n, seed, config.gamma)

        def sh():
            rep = tmle_shift(data, config.n_bins, config.spec, config.epsilon_mode, config.tol, config.max_iter)
            return rep.psi_hat, rep.trace.n_iter, rep.trace.converged

        record("tmle", sh)
    return ReplicateOutcome(est, its, conv, errs, warns)


def _run_indexed(args):
    return run_replicate(*args)


@dataclass
class CellSummary:
    label: str
    successes: int
    failures: int
    mean_estimate: list
    bias: list
    percent_bias: float
    percent_bias_se: float
    mse: float
    mse_se: float
    rmse: float
    relative_efficiency: float
    relative_efficiency_se: float
    mean_iterations: float
    mean_iterations_se: float
    converged_share: float
    warning_counts: dict = field(default_factory=dict)


@dataclass
class StudyResult:
    config: StudyConfig
    truth: list
    bound: float
    cells: list
    estimates: dict  # label -> (replicates, d) array, NaN rows for failures
    warnings: list
    seconds: float

    def cell(self, label) -> CellSummary:
        for c in self.cells:
            if c.label == str(label):
                return c
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "truth": self.truth,
            "bound": self.bound,
            "cells": [asdict(c) for c in self.cells],
            "warnings": self.warnings,
            "seconds": self.seconds,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=_json_default)

    def to_csv(self, path) -> None:
        cfg = self.config
        cols = [
            "problem", "mechanism", "spec", "n", "replicates", "implementation", "successes", "failures",
            "percent_bias", "percent_bias_se", "mse", "mse_se", "rmse", "relative_efficiency",
            "relative_efficiency_se", "mean_iterations", "mean_iterations_se", "converged_share",
        ]  # fmt: skip
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(cols)
            for c in self.cells:
                wr.writerow(
                    [cfg.problem, cfg.mechanism, cfg.spec, cfg.n, cfg.replicates, c.label, c.successes, c.failures]
                    + [_fmt(getattr(c, k)) for k in cols[8:]]
                )


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def study_truth(config: StudyConfig) -> tuple[np.ndarray, float]:
    """Reference value and efficiency bound (NaN where none is available)."""
    if config.reference is not None:
        truth = np.asarray(config.reference, dtype=float)
    elif config.problem == "missing_mean":
        truth = np.array([true_mean_exact(config.x1_var, config.x2_cond_var)])
    elif config.problem == "median_reg":
        if config.mechanism == "D1":
            truth = MEDIAN_D1_BETA.copy()
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                truth = np.asarray(true_value_oracle("median_reg", 200_000, config.seed, design="D2").value)
    else:
        truth = np.array([true_shift_exact(config.gamma)])
    bound = float("nan")
    if config.problem == "missing_mean":
        bound = efficiency_bound_exact(config.mechanism, config.x1_var, config.x2_cond_var)
    return truth, bound


def _summarize(label, rows, n, truth, bound, outcomes, replicates):
    ok = ~np.isnan(rows).any(axis=1)
    est = rows[ok]
    k = int(ok.sum())
    fails = replicates - k
    its = np.array([o.iterations.get(label, 0) for o, good in zip(outcomes, ok) if good], dtype=float)
    conv = np.array([o.converged.get(label, False) for o, good in zip(outcomes, ok) if good], dtype=float)
    counts: dict = {}
    for o in outcomes:
        for name in o.warnings.get(label, []):
            counts[name] = counts.get(name, 0) + 1
    nan = float("nan")
    if k == 0:
        return CellSummary(label, 0, fails, [], [], nan, nan, nan, nan, nan, nan, nan, nan, nan, nan, warning_counts=counts)
    err = est - truth
    sq = np.sum(err**2, axis=1)
    mean_est = est.mean(axis=0)
    bias = mean_est - truth
    scale = np.linalg.norm(truth)
    pb = 100.0 * float(np.linalg.norm(bias)) / scale if scale > 0 else nan
    if est.shape[1] == 1 and k > 1:
        pb_se = 100.0 * float(est[:, 0].std(ddof=1)) / math.sqrt(k) / scale
    else:
        pb_se = nan
    mse = float(sq.mean())
    mse_se = float(sq.std(ddof=1) / math.sqrt(k)) if k > 1 else nan
    re = n * mse / bound if math.isfinite(bound) else nan
    re_se = n * mse_se / bound if math.isfinite(bound) else nan
    return CellSummary(
        label=label,
        successes=k,
        failures=fails,
        mean_estimate=mean_est.tolist(),
        bias=bias.tolist(),
        percent_bias=pb,
        percent_bias_se=pb_se,
        mse=mse,
        mse_se=mse_se,
        rmse=math.sqrt(mse),
        relative_efficiency=re,
        relative_efficiency_se=re_se,
        mean_iterations=float(its.mean()),
        mean_iterations_se=float(its.std(ddof=1) / math.sqrt(k)) if k > 1 else nan,
        converged_share=float(conv.mean()),
        warning_counts=counts,
    )


def run_study(config: StudyConfig, full: bool = False) -> StudyResult:
    """Run every replicate of a cell and aggregate, in replicate order.

    Each replicate is seeded with ``config.seed + index``, so the result is
    identical for any number of workers.
    """
    t0 = time.perf_counter()
    if full:
        warnings.warn("full-size study requested; expect a long runtime", RuntimeWarning, stacklevel=2)
    jobs = [(config, r) for r in range(config.replicates)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_run_indexed, jobs, chunksize=max(1, len(jobs) // (4 * config.workers))))
    else:
        outcomes = [_run_indexed(j) for j in jobs]
    truth, bound = study_truth(config)
    d = truth.size
    cells, est_tables, notes = [], {}, []
    for label in config.labels():
        rows = np.full((config.replicates, d), np.nan)
        for r, o in enumerate(outcomes):
            v = o.estimates.get(label)
            if v is not None:
                rows[r] = v
        est_tables[label] = rows
        cell = _summarize(label, rows, config.n, truth, bound, outcomes, config.replicates)
        cells.append(cell)
        if cell.failures > FAILURE_SHARE * config.replicates:
            msg = f"implementation {label}: {cell.failures} of {config.replicates} replicates failed"
            notes.append(msg)
            warnings.warn(msg, CellUnreliableWarning, stacklevel=2)
    return StudyResult(config, truth.tolist(), bound, cells, est_tables, notes, time.perf_counter() - t0)
