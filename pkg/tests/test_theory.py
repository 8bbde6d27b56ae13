"""Tests for the guarantee calculators and threshold measurement."""

import math

import numpy as np
import pytest

from pertsets.cvae import CvaeModel, PairSet
from pertsets.theory import (
    LN_2PI,
    ObjectiveEstimate,
    delta_a_demo,
    estimate_R_K,
    lemma3_interval,
    mahalanobis_radius,
    theorem1_bounds,
    theorem2_bound,
    theorem2_ln_bound,
)

M, K_DIM, HID = 6, 2, 8


def bisect_x_minus_lnx(target, lo, hi):
    """Solve x - ln x = target on a bracket, independent of lambert_w."""
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (mid - math.log(mid) - target) * (lo - math.log(lo) - target) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Mahalanobis radius


def test_mahalanobis_radius_chi2_closed_form():
    # chi^2 with 2 dof: quantile(1 - alpha) = -2 ln(alpha)
    got = mahalanobis_radius(2, 0.1)
    assert math.isclose(got, math.sqrt(-2.0 * math.log(0.1)), rel_tol=1e-9)
    assert math.isclose(got, 2.1460, rel_tol=1e-4)


def test_mahalanobis_radius_normal_symmetry():
    # P(|Z| <= 1) = 0.6827 for a single dimension
    assert abs(mahalanobis_radius(1, 0.3173) - 1.0) <= 1e-3


def test_mahalanobis_radius_monotone_in_k():
    vals = [mahalanobis_radius(k, 0.05) for k in (1, 2, 4, 8, 16)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_mahalanobis_radius_domain():
    for alpha in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            mahalanobis_radius(3, alpha)


# ---------------------------------------------------------------------------
# Variance-ratio intervals


def test_lemma3_collapses_at_zero():
    a, b = lemma3_interval(0.0)
    assert abs(a - 1.0) <= 1e-6 and abs(b - 1.0) <= 1e-6
    assert a <= 1.0 <= b


def test_lemma3_endpoints_solve_equation():
    a, b = lemma3_interval(1.0)
    assert abs(a - math.log(a) - 2.0) <= 1e-10
    assert abs(b - math.log(b) - 2.0) <= 1e-10
    assert math.isclose(a, bisect_x_minus_lnx(2.0, 1e-6, 1.0), rel_tol=1e-9)
    assert math.isclose(b, bisect_x_minus_lnx(2.0, 1.0, 10.0), rel_tol=1e-9)


def test_lemma3_monotone_and_bracketing():
    prev_a, prev_b = 1.0, 1.0
    for K in (0.1, 0.5, 1.0, 2.0, 5.0, 10.0):
        a, b = lemma3_interval(K)
        assert a <= 1.0 <= b
        assert a < prev_a and b > prev_b
        # interior points satisfy the defining inequality
        for x in (a, 0.5 * (a + b), b):
            assert x - math.log(x) <= K + 1.0 + 1e-9
        prev_a, prev_b = a, b


def test_lemma3_domain():
    with pytest.raises(ValueError):
        lemma3_interval(-0.1)


# ---------------------------------------------------------------------------
# Theorem 1


def test_theorem1_degenerate_case():
    m = 20
    est = ObjectiveEstimate(R=-0.5 * m * LN_2PI, K=np.zeros(3), m=m)
    got = theorem1_bounds(est, alpha=0.05)
    assert math.isclose(got.eps, got.r, rel_tol=1e-9)
    assert got.delta_sse == 0.0 and got.delta_per_pixel == 0.0
    assert math.isclose(got.B, 1.0, abs_tol=1e-6)
    assert got.ln_h <= 1e-6 and math.isclose(got.h, 1.0, abs_tol=1e-5)


def test_theorem1_composed_oracle():
    # k=1 with K=1, alpha chosen so r=1: eps = sqrt(b) + 1, delta = 1/(1-alpha)
    alpha = 1.0 - 0.6826894921370859
    m = 10
    est = ObjectiveEstimate(R=-0.5 * m * LN_2PI - 0.5, K=np.array([1.0]), m=m)
    got = theorem1_bounds(est, alpha=alpha)
    assert abs(got.r - 1.0) <= 1e-6
    b = bisect_x_minus_lnx(2.0, 1.0, 10.0)
    assert math.isclose(got.eps, math.sqrt(b) * got.r + 1.0, rel_tol=1e-6)
    assert math.isclose(got.delta_sse, 1.0 / (1.0 - alpha), rel_tol=1e-9)
    assert math.isclose(got.delta_per_pixel, got.delta_sse / m, rel_tol=1e-12)


def test_theorem1_delta_linear_in_gap():
    m = 8
    gaps = np.array([0.5, 1.0, 2.0, 4.0])
    deltas = []
    for g in gaps:
        est = ObjectiveEstimate(R=-0.5 * (m * LN_2PI + g), K=np.zeros(2), m=m)
        deltas.append(theorem1_bounds(est, alpha=0.01).delta_sse)
    deltas = np.array(deltas)
    np.testing.assert_allclose(deltas / gaps, deltas[0] / gaps[0], rtol=1e-9)


def test_theorem1_invariants_on_grid():
    rng = np.random.default_rng(0)
    for _ in range(20):
        k = int(rng.integers(1, 6))
        est = ObjectiveEstimate(R=-0.5 * 12 * LN_2PI - rng.uniform(0, 50),
                                K=rng.uniform(0, 4, k), m=12)
        got = theorem1_bounds(est, alpha=float(rng.uniform(0.001, 0.5)))
        assert got.eps >= got.r - 1e-12
        assert got.delta_sse >= 0.0
        assert (got.intervals[:, 0] <= 1.0 + 1e-12).all()
        assert (got.intervals[:, 1] >= 1.0 - 1e-12).all()
        assert got.ln_h >= -1e-12
        assert got.B >= 1.0 - 1e-9


# ---------------------------------------------------------------------------
# Theorem 2


def test_theorem2_equals_delta_without_kl():
    est = ObjectiveEstimate(R=-0.5 * 9 * LN_2PI - 2.0, K=np.zeros(4), m=9)
    t1 = theorem1_bounds(est, alpha=0.02)
    assert math.isclose(theorem2_bound(est, alpha=0.02), t1.delta_sse,
                        rel_tol=1e-6)


def test_theorem2_hand_composed_oracle():
    alpha = 1.0 - 0.6826894921370859      # r = 1 in one dimension
    m = 10
    est = ObjectiveEstimate(R=-0.5 * m * LN_2PI - 0.5, K=np.array([1.0]), m=m)
    a = bisect_x_minus_lnx(2.0, 1e-6, 1.0)
    b = bisect_x_minus_lnx(2.0, 1.0, 10.0)
    r = 1.0
    c1 = (b - 1.0) * r * r - 1.0
    c2 = ((1.0 - a) * r * r + 2.0 * r + 1.0) / a
    want = (1.0 / (1.0 - alpha)) * math.sqrt(b) * math.exp(max(c1, c2))
    got = theorem2_bound(est, alpha=alpha)
    # r carries the quantile solver tolerance into the exponent
    assert math.isclose(got, want, rel_tol=1e-4)
    assert math.isclose(theorem2_ln_bound(est, alpha=alpha), math.log(want),
                        rel_tol=1e-6)


def test_theorem2_never_below_delta():
    rng = np.random.default_rng(1)
    for _ in range(15):
        k = int(rng.integers(1, 5))
        est = ObjectiveEstimate(R=-0.5 * 7 * LN_2PI - rng.uniform(0.1, 20),
                                K=rng.uniform(0, 3, k), m=7)
        alpha = float(rng.uniform(0.01, 0.3))
        t1 = theorem1_bounds(est, alpha)
        ln2 = theorem2_ln_bound(est, alpha)
        assert ln2 >= math.log(t1.delta_sse) - 1e-12


def test_theorem2_overflow_reports_ln_scale():
    est = ObjectiveEstimate(R=-0.5 * 4 * LN_2PI - 1.0,
                            K=np.array([600.0, 600.0]), m=4)
    t1 = theorem1_bounds(est, alpha=0.01)
    assert t1.h == math.inf and math.isfinite(t1.ln_h)
    assert theorem2_bound(est, alpha=0.01) == math.inf
    assert math.isfinite(theorem2_ln_bound(est, alpha=0.01))


def test_objective_estimate_validation():
    with pytest.raises(ValueError):
        ObjectiveEstimate(R=0.0, K=np.array([-0.5]), m=3)
    with pytest.raises(ValueError):
        ObjectiveEstimate(R=0.0, K=np.zeros((2, 2)), m=3)
    est = ObjectiveEstimate(R=0.0, K=np.array([-1e-9, 0.2]), m=3)
    assert (est.K >= 0).all() and est.k == 2


# ---------------------------------------------------------------------------
# Threshold measurement


def zeroed_model(bq=None, bp=None):
    model = CvaeModel(M, K_DIM, HID, rng=np.random.default_rng(0))
    for name in list(model.params.values):
        model.params.values[name][:] = 0.0
    if bq is not None:
        model.params.values["posterior_mean/b0"][:] = bq
    if bp is not None:
        model.params.values["prior_mean/b0"][:] = bp
    return model


def one_pair(fill=None, seed=2):
    rng = np.random.default_rng(seed)
    if fill is None:
        x = rng.uniform(0, 1, (1, M)).astype(np.float32)
        y = rng.uniform(0, 1, (1, M)).astype(np.float32)
    else:
        x = y = np.full((1, M), fill, dtype=np.float32)
    return PairSet(x, y).pair(0)


def test_estimate_k_zero_when_heads_tie():
    model = zeroed_model()
    est = estimate_R_K(model, one_pair(), np.random.default_rng(0), samples=8)
    np.testing.assert_allclose(est.K, 0.0, atol=1e-12)


def test_estimate_r_at_perfect_reconstruction():
    # constant decoder emits 0.5 exactly; a 0.5-valued pair has zero SSE
    model = zeroed_model()
    est = estimate_R_K(model, one_pair(fill=0.5), np.random.default_rng(0))
    assert math.isclose(est.R, -0.5 * M * LN_2PI, rel_tol=1e-12)


def test_estimate_r_matches_high_sample_oracle():
    model = CvaeModel(M, K_DIM, HID, rng=np.random.default_rng(3))
    pair = one_pair(seed=4)
    est = estimate_R_K(model, pair, np.random.default_rng(5), samples=64)

    # independent high-sample recomputation straight from the model
    rng = np.random.default_rng(6)
    q = model.encode_posterior(pair.perturbed[None], pair.conditioned[None])
    z = np.asarray(q.mean, dtype=np.float64) + q.std() * rng.standard_normal((10_000, K_DIM))
    out = np.asarray(model.decode(z, np.repeat(pair.conditioned[None], 10_000, axis=0)))
    half_sse = 0.5 * np.sum((out - pair.perturbed.astype(np.float64)) ** 2, axis=1)
    oracle = float(np.mean(-half_sse)) - 0.5 * M * LN_2PI
    se64 = float(np.std(half_sse)) / math.sqrt(64)
    assert abs(est.R - oracle) <= 2.0 * se64

    # K matches the closed form computed by hand from the heads
    p = model.encode_prior(pair.conditioned[None])
    ratio = (q.std()[0].astype(np.float64) / p.std()[0]) ** 2
    gap = (np.asarray(q.mean[0], dtype=np.float64) - np.asarray(p.mean[0])) ** 2
    want_K = ratio + gap / p.var()[0] - 1.0 - np.log(ratio)
    np.testing.assert_allclose(est.K, want_K, rtol=1e-12)
    # un-halved convention: sum K equals exactly twice the KL
    from pertsets.cvae import kl_diag
    kl = float(np.asarray(kl_diag(q, p))[0])
    assert math.isclose(est.K.sum(), 2.0 * kl, rel_tol=1e-6)


# ---------------------------------------------------------------------------
# Expectation-vs-max demonstration


def test_delta_a_demo_peak_and_expectation():
    mx, mc = delta_a_demo(10.0, 1.0, rng=np.random.default_rng(7))
    assert mx == 10.0
    assert mc <= 0.1 + 0.01


def test_delta_a_demo_zero_radius():
    mx, _ = delta_a_demo(5.0, 0.0, rng=np.random.default_rng(8))
    assert mx == 5.0


def test_delta_a_demo_unbounded_max_vanishing_mean():
    rng = np.random.default_rng(9)
    maxes, means = [], []
    for a in (10.0, 100.0, 1000.0):
        mx, mc = delta_a_demo(a, 1.0, rng=rng)
        maxes.append(mx)
        means.append(mc)
        assert mc <= 1.0 / a + 0.05
    assert maxes == [10.0, 100.0, 1000.0]
    assert means[-1] < 0.01


def test_delta_a_demo_domain():
    with pytest.raises(ValueError):
        delta_a_demo(0.0, 1.0)
    with pytest.raises(ValueError):
        delta_a_demo(1.0, -1.0)
