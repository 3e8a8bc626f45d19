import math
from dataclasses import replace

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from expfam_tmle.core import SELF_CONSISTENCY_C, expit, logit
from expfam_tmle.exceptions import DataValidationError, PositivityError
from expfam_tmle.optim import find_root_bracketed
from expfam_tmle.shift_effect import (
    HistogramConditionalDensity,
    ShiftDataset,
    ShiftState,
    apply_fluctuation,
    clever_terms,
    conditional_mean_shifted,
    density_ratio_shift,
    eif_shift,
    fluctuate_shift,
    initial_state,
    saturated_state,
    tmle_shift,
)
from expfam_tmle.simulate import gen_shift, true_shift_exact


def _mu(a, w):
    return expit(-1.0 + a + w)


def _manual_state(a, w, P, gamma, lo, hi, mu=_mu):
    """State on equal bins of [lo, hi] with mu given in closed form."""
    a, w, P = np.asarray(a, float), np.asarray(w, float), np.asarray(P, float)
    hist = HistogramConditionalDensity(lo, hi, P.shape[1])
    mids = hist.midpoints
    return ShiftState(
        bin_probs=P,
        logit_mu_obs=logit(mu(a, w)),
        logit_mu_shift=logit(mu(a + gamma, w)),
        logit_mu_mid=logit(mu(mids[None, :] + gamma, w[:, None])),
        w_weights=np.full(a.size, 1.0 / a.size),
        obs_bin=hist.bin_index(a),
        shift_bin=hist.bin_index(a + gamma),
        back_bin=hist.bin_index(a - gamma),
        mid_shift_bin=hist.bin_index(mids + gamma),
        midpoints=mids,
        width=hist.width,
    )


@pytest.fixture(scope="module")
def shift_data():
    return gen_shift(3000, 4)


def test_dataset_validation():
    with pytest.raises(DataValidationError):
        ShiftDataset(np.zeros(3), np.zeros(3), np.array([0.0, 2.0, 1.0]), 0.5)
    with pytest.raises(DataValidationError):
        ShiftDataset(np.zeros(3), np.array([0.0, 1.0, 5.0]), np.zeros(3), 0.5, a_min=0.0, a_max=2.0)
    with pytest.raises(DataValidationError):
        ShiftDataset(np.zeros(2), np.ones(2), np.zeros(2), 0.5)
    d = ShiftDataset(np.zeros(3), np.array([0.0, 1.0, 2.0]), np.zeros(3), 0.5)
    assert (d.a_min, d.a_max) == (0.0, 2.0)


def test_histogram_bins_and_density():
    h = HistogramConditionalDensity(0.0, 4.0, 4, model="marginal")
    np.testing.assert_array_equal(h.bin_index([-0.1, 0.0, 0.99, 1.0, 3.5, 4.0, 4.01]), [-1, 0, 0, 1, 3, 3, -1])
    np.testing.assert_allclose(h.midpoints, [0.5, 1.5, 2.5, 3.5])
    a = np.array([0.2, 0.4, 1.1, 3.9])
    h.fit(np.zeros(4), a)
    np.testing.assert_allclose(h.bin_probabilities(np.zeros(2)), [[0.5, 0.25, 0, 0.25]] * 2)
    np.testing.assert_allclose(h.density([0.3, 2.5, 5.0], np.zeros(3)), [0.5, 0.0, 0.0])


def test_multinomial_histogram_matches_sklearn_and_sums_to_one():
    rng = np.random.default_rng(0)
    w = rng.random((300, 1))
    a = np.clip(rng.normal(1 + w[:, 0], 0.5), 0, 3)
    h = HistogramConditionalDensity(0.0, 3.0, 6).fit(w, a)
    P = h.bin_probabilities(w)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    ref = LogisticRegression(C=1e4, max_iter=1000, tol=1e-8).fit(w, h.bin_index(a))
    np.testing.assert_allclose(P[:, ref.classes_], ref.predict_proba(w), atol=1e-6)


def test_ratio_identity_shift():
    d = gen_shift(200, 1, gamma=0.0)
    r = density_ratio_shift(initial_state(d))
    np.testing.assert_allclose(r["obs"], 1.0)
    np.testing.assert_allclose(r["shift"], 1.0)


def test_ratio_flat_density():
    P = np.full((3, 4), 0.25)
    s = _manual_state([0.5, 1.7, 3.2], [0.1, 0.2, 0.3], P, 1.0, 0.0, 4.0)
    # a - gamma outside the support for the first row only
    np.testing.assert_allclose(density_ratio_shift(s)["obs"], [0.0, 1.0, 1.0])


def test_ratio_four_bins_one_binwidth_shift():
    P = np.array([[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1]])
    s = _manual_state([1.5, 3.2], [0.0, 1.0], P, 1.0, 0.0, 4.0)
    np.testing.assert_allclose(density_ratio_shift(s)["obs"], [0.1 / 0.2, 0.2 / 0.1])
    s = _manual_state([0.5, 2.5], [0.0, 1.0], P, 1.0, 0.0, 4.0)
    np.testing.assert_allclose(density_ratio_shift(s)["obs"], [0.0, 0.3 / 0.2])


def test_positivity_error():
    P = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    s = _manual_state([2.5, 0.5], [0.0, 0.0], P, 1.0, 0.0, 3.0)
    with pytest.raises(PositivityError):
        density_ratio_shift(s)


def test_terms_two_rows_three_bins_by_hand():
    P = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    w = np.array([0.2, 0.6])
    s = _manual_state([0.7, 2.2], w, P, 1.0, 0.0, 3.0)
    y = np.array([1.0, 0.0])
    m = lambda a, ww: 1 / (1 + math.exp(1 - a - ww))  # noqa: E731
    cm0 = 0.2 * m(1.5, 0.2) + 0.5 * m(2.5, 0.2) + 0.3 * m(3.5, 0.2)
    cm1 = 0.6 * m(1.5, 0.6) + 0.1 * m(2.5, 0.6) + 0.3 * m(3.5, 0.6)
    psi = (cm0 + cm1) / 2
    h_y, h_a, h_w = clever_terms(s, y)
    # row 0: a - gamma = -0.3 is outside; row 1: a - gamma = 1.2 lies in bin 1, a in bin 2
    np.testing.assert_allclose(h_y, [0.0, 0.1 / 0.3])
    np.testing.assert_allclose(h_a, [m(1.7, 0.2) - cm0, m(3.2, 0.6) - cm1])
    np.testing.assert_allclose(h_w, [cm0 - psi, cm1 - psi])
    assert s.psi == pytest.approx(psi)
    D = eif_shift(s, y)
    np.testing.assert_allclose(D, [m(1.7, 0.2) - psi, (0.1 / 0.3) * (0 - m(2.2, 0.6)) + m(3.2, 0.6) - psi])


def test_conditional_mean_cases():
    P = np.array([[0.1, 0.2, 0.3, 0.4], [0.0, 1.0, 0.0, 0.0]])
    c = 0.37
    s = _manual_state([0.5, 1.5], [0.0, 0.3], P, 0.5, 0.0, 4.0, mu=lambda a, w: np.full(np.broadcast(a, w).shape, c))
    np.testing.assert_allclose(conditional_mean_shifted(s), c)
    s = _manual_state([0.5, 1.5], [0.0, 0.3], P, 0.5, 0.0, 4.0)
    got = conditional_mean_shifted(s)
    hand0 = 0.1 * _mu(1.0, 0) + 0.2 * _mu(2.0, 0) + 0.3 * _mu(3.0, 0) + 0.4 * _mu(4.0, 0)
    assert got[0] == pytest.approx(hand0)
    # single-bin row: the mean is mu at that midpoint plus gamma
    assert got[1] == pytest.approx(_mu(2.0, 0.3))


def test_zero_shift_terms():
    d = gen_shift(300, 2, gamma=0.0)
    s = initial_state(d)
    h_y, h_a, h_w = clever_terms(s, d.y)
    np.testing.assert_allclose(h_y, 1.0)
    np.testing.assert_allclose(h_a, expit(s.logit_mu_obs) - conditional_mean_shifted(s))
    # with gamma = 0 the EIF reduces to y - psi
    np.testing.assert_allclose(eif_shift(s, d.y), d.y - s.psi, atol=1e-12)


def test_constant_mu_gives_zero_h_a(shift_data):
    s = initial_state(shift_data)
    c = logit(np.linspace(0.2, 0.8, shift_data.n))
    s = replace(s, logit_mu_shift=c, logit_mu_obs=c, logit_mu_mid=np.repeat(c[:, None], s.bin_probs.shape[1], 1))
    np.testing.assert_allclose(clever_terms(s, shift_data.y)[1], 0.0, atol=1e-15)


def test_sum_of_scores_equals_direct_eif(shift_data):
    d = shift_data
    s = initial_state(d)
    # D recomputed from scratch: H_Y from the fitted histogram, mu from an unpenalized sklearn fit
    hist = HistogramConditionalDensity(d.a_min, d.a_max, 20).fit(d.w, d.a)
    lr = LogisticRegression(penalty=None, tol=1e-12, max_iter=10_000).fit(np.column_stack([d.a, d.w]), d.y)
    mu = lambda a: lr.predict_proba(np.column_stack([a, d.w]))[:, 1]  # noqa: E731
    H = hist.density(d.a - d.gamma, d.w) / hist.density(d.a, d.w)
    P = hist.bin_probabilities(d.w)
    cm = sum(P[:, b] * mu(np.full(d.n, m + d.gamma)) for b, m in enumerate(hist.midpoints))
    D = H * (d.y - mu(d.a)) + mu(d.a + d.gamma) - cm.mean()
    h_y, h_a, h_w = clever_terms(s, d.y)
    np.testing.assert_allclose(h_y * (d.y - expit(s.logit_mu_obs)) + h_a + h_w, D, atol=1e-5)
    np.testing.assert_allclose(eif_shift(s, d.y), D, atol=1e-5)


def test_theta_score_is_zero_under_empirical_weights(shift_data):
    s = initial_state(shift_data)
    h_w = clever_terms(s, shift_data.y)[2]
    assert s.w_weights @ h_w == pytest.approx(0.0, abs=1e-14)


def _midpoint_fixture():
    rng = np.random.default_rng(3)
    n, lo, hi, B = 6, 0.0, 3.0, 3
    mids = np.array([0.5, 1.5, 2.5])
    a = mids[rng.integers(0, B, n)]
    w = rng.random(n)
    y = (rng.random(n) < 0.5).astype(float)
    P = rng.dirichlet(np.ones(B), n)
    return _manual_state(a, w, P, 1.0, lo, hi), y


def _obs_loglik(state, y):
    mu = expit(state.logit_mu_obs)
    p = state.bin_probs[np.arange(y.size), state.obs_bin]
    return y * np.log(mu) + (1 - y) * np.log1p(-mu) + np.log(p)


def test_score_identity_finite_difference():
    s, y = _midpoint_fixture()
    D = eif_shift(s, y)
    h_y, h_a, h_w = clever_terms(s, y)
    h = 1e-6
    fd_y = (_obs_loglik(apply_fluctuation(s, h, 0.0), y) - _obs_loglik(apply_fluctuation(s, -h, 0.0), y)) / (2 * h)
    fd_a = (_obs_loglik(apply_fluctuation(s, 0.0, h), y) - _obs_loglik(apply_fluctuation(s, 0.0, -h), y)) / (2 * h)
    np.testing.assert_allclose(fd_y, h_y * (y - expit(s.logit_mu_obs)), atol=1e-6)
    np.testing.assert_allclose(fd_a, h_a, atol=1e-6)

    # the covariate component: p_W tilted by exp(theta h_w), renormalized over the empirical weights
    def log_pw(t):
        lw = np.log(s.w_weights) + t * h_w
        return lw - np.logaddexp.reduce(lw)

    fd_w = (log_pw(h) - log_pw(-h)) / (2 * h)
    np.testing.assert_allclose(fd_y + fd_a + fd_w, D, atol=1e-6)


def test_histogram_closure_after_tilts(shift_data):
    s = initial_state(shift_data)
    rng = np.random.default_rng(1)
    for _ in range(5):
        s = apply_fluctuation(s, rng.normal(), rng.normal(0, 3))
        assert np.all(s.bin_probs >= 0)
        np.testing.assert_allclose(s.bin_probs.sum(axis=1), 1.0, atol=1e-12)


def test_epsilon_a_matches_bracketed_root(shift_data):
    s = initial_state(shift_data)
    cm = conditional_mean_shifted(s)
    h_obs = expit(s.logit_mu_shift) - cm
    h_mid = expit(s.logit_mu_mid) - cm[:, None]

    def score(e):
        q = s.bin_probs * np.exp(e * h_mid)
        q /= q.sum(axis=1, keepdims=True)
        return h_obs.sum() - np.sum(q * h_mid)

    root = find_root_bracketed(score, -50.0, 50.0)
    eps, _, _ = fluctuate_shift(s, shift_data)
    assert eps[1] == pytest.approx(root, abs=1e-8)


def _grid_loglik(s, y, Ey, Ea):
    cm = conditional_mean_shifted(s)
    h_obs = expit(s.logit_mu_shift) - cm
    h_mid = expit(s.logit_mu_mid) - cm[:, None]
    h_y = density_ratio_shift(s)["obs"]
    eta = s.logit_mu_obs[None, :] + Ey[:, None] * h_y[None, :]
    ly = np.sum(y * eta - np.logaddexp(0, eta), axis=1)
    with np.errstate(divide="ignore"):
        logP = np.log(s.bin_probs)
    lz = np.logaddexp.reduce(logP[None] + Ea[:, None, None] * h_mid[None], axis=2)
    la = Ea * h_obs.sum() - lz.sum(axis=1)
    return ly, la


def test_epsilon_matches_grid_search_five_rows_three_bins():
    rng = np.random.default_rng(11)
    a = rng.uniform(0, 3, 5)
    w = rng.random(5)
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    P = rng.dirichlet(np.ones(3) * 2, 5)
    s = _manual_state(a, w, P, 0.8, 0.0, 3.0, mu=lambda a, w: expit(0.3 - 0.5 * a + w))
    data = ShiftDataset(w, a, y, 0.8, 0.0, 3.0)
    eps, _, _ = fluctuate_shift(s, data)
    # the two components are separable, so each 1-D grid is the 2-D grid argmax
    cy = ca = 0.0
    for half, step in ((20.0, 0.01), (0.02, 1e-4)):
        grid_y = np.arange(cy - half, cy + half + step / 2, step)
        grid_a = np.arange(ca - half, ca + half + step / 2, step)
        cy = grid_y[np.argmax(_grid_loglik(s, y, grid_y, np.zeros_like(grid_y))[0])]
        ca = grid_a[np.argmax(_grid_loglik(s, y, np.zeros_like(grid_a), grid_a)[1])]
    np.testing.assert_allclose(eps, [cy, ca], atol=1e-3)


def test_shared_epsilon_matches_grid_search():
    s, y = _midpoint_fixture()
    data = ShiftDataset(np.zeros(y.size), np.full(y.size, 0.5), y, 1.0, 0.0, 3.0)
    eps, _, _ = fluctuate_shift(s, data, "shared")
    assert eps.shape == (1,)
    c = 0.0
    for half, step in ((20.0, 0.01), (0.02, 1e-4)):
        g = np.arange(c - half, c + half + step / 2, step)
        ly, la = _grid_loglik(s, y, g, g)
        c = g[np.argmax(ly + la)]
    assert eps[0] == pytest.approx(c, abs=1e-3)


def test_stationary_state_gives_zero_epsilon():
    d = _discrete_fixture(gamma=0.0)
    s = saturated_state(d, 4)
    eps, new, _ = fluctuate_shift(s, d)
    np.testing.assert_allclose(eps, 0.0, atol=1e-10)
    np.testing.assert_allclose(new.bin_probs, s.bin_probs, atol=1e-10)


def _discrete_fixture(gamma):
    rng = np.random.default_rng(6)
    n = 400
    w = rng.integers(0, 3, n).astype(float)
    a = np.array([0.5, 1.5, 2.5, 3.5])[rng.integers(0, 4, n)]
    y = (rng.random(n) < expit(-1 + 0.5 * a + w)).astype(float)
    return ShiftDataset(w, a, y, gamma, 0.0, 4.0)


def test_zero_shift_saturated_collapse_to_sample_mean():
    d = _discrete_fixture(gamma=0.0)
    rep = tmle_shift(d, n_bins=4, state=saturated_state(d, 4))
    assert rep.trace.converged
    assert rep.estimate == pytest.approx(d.y.mean(), abs=SELF_CONSISTENCY_C * 1e-4)


@pytest.mark.parametrize("pa_model", ["multinomial", "marginal"])
@pytest.mark.parametrize("mode", ["vector", "shared"])
def test_tmle_converges_and_is_self_consistent(shift_data, pa_model, mode):
    rep = tmle_shift(shift_data, pa_model=pa_model, epsilon_mode=mode)
    assert rep.trace.converged
    assert abs(rep.trace.final_mean_eif[0]) <= SELF_CONSISTENCY_C * 1e-4
    assert abs(rep.estimate - true_shift_exact()) < 4 * rep.std_error[0]


def test_bin_count_convergence():
    d = gen_shift(20_000, 7)
    truth = true_shift_exact()
    est = {B: tmle_shift(d, n_bins=B) for B in (10, 20, 40)}
    for rep in est.values():
        assert abs(rep.estimate - truth) < 3 * rep.std_error[0]
    # refining the histogram beyond the generating bins barely moves the estimate
    assert abs(est[40].estimate - est[20].estimate) < 0.5 * est[20].std_error[0]


def test_too_few_rows():
    d = gen_shift(10, 0)
    with pytest.raises(DataValidationError):
        tmle_shift(d)
    with pytest.raises(ValueError):
        fluctuate_shift(initial_state(gen_shift(50, 0)), gen_shift(50, 0), "both")
