"""Scalar special functions backing the certification math.

Everything here runs in 64-bit floats regardless of what the network side
uses: these values feed bound computations where 1e-3 of slack matters.
Implementations are self-contained (no scipy at runtime) so the test suite
can use library routines as genuinely independent oracles.
"""

import math

import numpy as np

_INV_E = math.exp(-1.0)
_SQRT2 = math.sqrt(2.0)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Lambert W


def _lambert_start(x: float, branch: str) -> float:
    """Initial iterate: branch-point series near -1/e, asymptotic forms elsewhere."""
    if x < -0.25:
        # series around the branch point w(-1/e) = -1, p = +/- sqrt(2(ex+1))
        p = math.sqrt(2.0 * (math.e * x + 1.0))
        if branch == "lower":
            p = -p
        return -1.0 + p - p * p / 3.0 + 11.0 * p ** 3 / 72.0
    if branch == "lower":
        # x in [-0.25, 0): w -> -inf as x -> 0-, use log asymptotics
        l1 = math.log(-x)
        l2 = math.log(-l1)
        return l1 - l2 + l2 / l1
    if x < 1.0:
        return x * (1.0 - x)  # first terms of the Taylor series at 0
    l1 = math.log(x)
    return l1 - math.log(l1) if l1 > 1.0 else l1


def lambert_w(x: float, branch: str = "principal") -> float:
    """Solve w * exp(w) = x on the requested real branch.

    branch "principal" (W0, w >= -1) accepts x >= -1/e; branch "lower"
    (W-1, w <= -1) accepts -1/e <= x < 0. Halley iteration from a
    branch-aware start; the returned w satisfies |w*exp(w) - x| <= 1e-12.
    """
    if branch not in ("principal", "lower"):
        raise ValueError(f"unknown branch {branch!r}")
    x = float(x)
    if x < -_INV_E:
        if x < -_INV_E - 1e-12:
            raise ValueError(f"lambert_w domain: x={x} < -1/e")
        x = -_INV_E
    if branch == "lower" and x >= 0.0:
        raise ValueError(f"lower branch domain: x={x} not in [-1/e, 0)")
    if x == -_INV_E:
        return -1.0
    if x == 0.0:
        return 0.0

    w = _lambert_start(x, branch)
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= 1e-13 * max(1.0, abs(x)):
            break
        wp1 = w + 1.0
        denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1)
        step = f / denom
        w -= step
        # keep the iterate on its branch
        if branch == "principal" and w < -1.0:
            w = -1.0 + 1e-12
        if branch == "lower" and w > -1.0:
            w = -1.0 - 1e-12
    return w


# ---------------------------------------------------------------------------
# Standard normal


def std_normal_cdf(x: float) -> float:
    """Phi(x), accurate in both tails via erfc."""
    return 0.5 * math.erfc(-float(x) / _SQRT2)


def _normal_quantile_approx(p: float) -> float:
    """Rational approximation (Acklam), |error| ~ 1e-9, for p in (0, 0.5]."""
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    if p < 0.02425:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)


def std_normal_quantile(p: float) -> float:
    """Inverse of std_normal_cdf on (0, 1).

    Rational start plus Newton refinement; round-trips through the CDF to
    ~1e-12 for |result| <= 6 and respects quantile(1-p) == -quantile(p).
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile domain: p={p} not in (0, 1)")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -std_normal_quantile(1.0 - p)
    x = _normal_quantile_approx(p)
    for _ in range(3):
        err = std_normal_cdf(x) - p
        pdf = math.exp(-0.5 * x * x) / _SQRT_2PI
        if pdf == 0.0:
            break
        x -= err / pdf
    return x


# ---------------------------------------------------------------------------
# Regularized lower incomplete gamma and the chi-square family


def _lower_gamma_series(s: float, x: float) -> float:
    """P(s,x) by power series; converges fast for x < s + 1."""
    term = 1.0 / s
    total = term
    denom = s
    for _ in range(10000):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


def _upper_gamma_cf(s: float, x: float) -> float:
    """Q(s,x) by Lentz continued fraction; converges fast for x >= s + 1."""
    tiny = 1e-300
    b = x + 1.0 - s
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + s * math.log(x) - math.lgamma(s))


def reg_lower_gamma(s: float, x: float) -> float:
    """Regularized lower incomplete gamma P(s, x) for s > 0, x >= 0."""
    if s <= 0.0:
        raise ValueError(f"gamma shape must be positive, got {s}")
    if x < 0.0:
        raise ValueError(f"gamma argument must be >= 0, got {x}")
    if x == 0.0:
        return 0.0
    if x < s + 1.0:
        return _lower_gamma_series(s, x)
    return 1.0 - _upper_gamma_cf(s, x)


def chi_square_cdf(x: float, k: int) -> float:
    """CDF of the chi-square distribution with k degrees of freedom."""
    if k <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {k}")
    if x <= 0.0:
        return 0.0
    return reg_lower_gamma(0.5 * k, 0.5 * x)


def chi_square_quantile(p: float, k: int) -> float:
    """Inverse chi-square CDF by bisection, bracket resolved to <= 1e-8.

    Monotone and robust for k up to at least 512; that covers every latent
    dimensionality the package trains.
    """
    if k <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {k}")
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile domain: p={p} not in (0, 1)")
    hi = k + 20.0 * math.sqrt(k) + 40.0
    while chi_square_cdf(hi, k) < p:
        hi *= 2.0
    lo = 0.0
    mid = 0.5 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        c = chi_square_cdf(mid, k)
        if abs(c - p) <= 1e-9:
            break
        if c < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return mid


# ---------------------------------------------------------------------------
# Exact binomial machinery


def _log_binom_pmf(n: int, p: float) -> np.ndarray:
    """log pmf of Binomial(n, p) over all outcomes 0..n."""
    i = np.arange(n + 1, dtype=np.float64)
    lg = np.cumsum(np.concatenate(([0.0], np.log(np.arange(1, n + 1, dtype=np.float64)))))
    log_nck = lg[n] - lg - lg[::-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = i * (np.log(p) if p > 0 else -np.inf)
        lq = (n - i) * (np.log1p(-p) if p < 1 else -np.inf)
    out = log_nck + np.where(i == 0, 0.0, lp) + np.where(i == n, 0.0, lq)
    return out


def _binom_upper_tail(k: int, n: int, p: float) -> float:
    """P(Binomial(n, p) >= k), summed in log space."""
    if k <= 0:
        return 1.0
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    lp = _log_binom_pmf(n, p)[k:]
    m = lp.max()
    return float(np.exp(m) * np.exp(lp - m).sum())


def clopper_pearson_lower(successes: int, trials: int, confidence: float) -> float:
    """Exact one-sided lower confidence bound for a binomial proportion.

    Solves P(Binomial(trials, p) >= successes) = 1 - confidence for p.
    Returns 0 when successes == 0. For successes == trials the solution is
    (1 - confidence)**(1/trials).
    """
    if not 0 <= successes <= trials or trials <= 0:
        raise ValueError(f"need 0 <= successes <= trials, got {successes}/{trials}")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must be in (0, 1), got {confidence}")
    if successes == 0:
        return 0.0
    alpha = 1.0 - confidence
    if successes == trials:
        return alpha ** (1.0 / trials)
    lo, hi = 0.0, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _binom_upper_tail(successes, trials, mid) < alpha:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12:
            break
    return 0.5 * (lo + hi)


def binom_two_sided_pvalue(successes: int, trials: int, p: float) -> float:
    """Two-sided exact binomial test p-value, minimum-likelihood convention.

    Sums the probability of every outcome whose pmf does not exceed the pmf
    of the observed count (with the customary 1+1e-7 relative guard against
    float ties). Matches R's binom.test.
    """
    if not 0 <= successes <= trials or trials <= 0:
        raise ValueError(f"need 0 <= successes <= trials, got {successes}/{trials}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"null proportion must be in [0, 1], got {p}")
    lp = _log_binom_pmf(trials, p)
    cut = lp[successes] + math.log1p(1e-7)
    keep = lp[lp <= cut]
    m = keep.max()
    return float(min(1.0, np.exp(m) * np.exp(keep - m).sum()))
