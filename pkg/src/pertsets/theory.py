"""Closed-form guarantee calculators for learned perturbation sets.

Given training thresholds (R, K_i) measured from a model, these produce the
latent radius bound eps = B*r + sqrt(sum K_i) with its paired reconstruction
error bound delta, and the truncated-expectation bound delta * H where H
multiplies per-dimension density-ratio constants. Everything is plain float
arithmetic; H is handled in log scale because it overflows for trained
models almost immediately.
"""

import math
from dataclasses import dataclass

import numpy as np

from .cvae import CvaeModel, PerturbationPair
from .specialfn import chi_square_quantile, lambert_w

LN_2PI = math.log(2.0 * math.pi)
# exp() overflows float64 just above 709.78
_LN_HUGE = 300.0 * math.log(10.0)


@dataclass
class ObjectiveEstimate:
    """Measured training thresholds for one pair.

    R is the expected log-likelihood term (the -(m/2) ln 2pi constant
    included); K holds the per-dimension un-halved KL expressions
    K_i = s + d - 1 - ln s with s the variance ratio and d the squared
    mean gap over the prior variance, so K_i = 2 * per-dim KL.
    """

    R: float
    K: np.ndarray
    m: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        if self.K.ndim != 1 or self.K.size < 1:
            raise ValueError("K must be a non-empty 1-D sequence")
        if (self.K < -1e-6).any():
            raise ValueError("K_i must be non-negative")
        self.K = np.maximum(self.K, 0.0)

    @property
    def k(self) -> int:
        return self.K.size


@dataclass
class TheoryBounds:
    r: float                 # Mahalanobis radius at tail mass alpha
    alpha: float
    eps: float               # latent radius bound, eps >= r
    delta_sse: float         # reconstruction error bound, SSE units
    delta_per_pixel: float
    B: float                 # max_i sqrt(b_i)
    intervals: np.ndarray    # (k, 2) per-dimension [a_i, b_i]
    ln_h: float              # ln of the truncated-expectation constant
    h: float                 # exp(ln_h), inf once past float range


def mahalanobis_radius(k: int, alpha: float) -> float:
    """Radius of the ball holding 1 - alpha of a standard k-dim Gaussian."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    return math.sqrt(chi_square_quantile(1.0 - alpha, k))


def lemma3_interval(K: float) -> tuple:
    """Interval [a, b] containing every x > 0 with x - ln x <= K + 1.

    a = -W_0(-e^-(K+1)), b = -W_-1(-e^-(K+1)); the endpoints collapse to 1
    at K = 0.
    """
    if K < 0:
        raise ValueError(f"K must be non-negative, got {K}")
    arg = -math.exp(-(K + 1.0))
    a = -lambert_w(arg, branch="principal")
    b = -lambert_w(arg, branch="lower")
    return min(a, 1.0), max(b, 1.0)


def theorem1_bounds(est: ObjectiveEstimate, alpha: float = 0.01) -> TheoryBounds:
    """(eps, delta) guarantee: within latent radius eps = B*r + sqrt(sum K_i)
    there is a point whose reconstruction SSE is at most
    delta = -(2R + m ln 2pi) / (1 - alpha)."""
    r = mahalanobis_radius(est.k, alpha)
    intervals = np.array([lemma3_interval(v) for v in est.K])
    B = float(np.sqrt(intervals[:, 1]).max())
    eps = B * r + math.sqrt(float(est.K.sum()))
    delta = max(0.0, -(2.0 * est.R + est.m * LN_2PI) / (1.0 - alpha))
    ln_h = 0.0
    for (a, b), K in zip(intervals, est.K):
        c1 = (b - 1.0) * r * r - K
        c2 = ((1.0 - a) * r * r + 2.0 * r * math.sqrt(K) + K) / a
        ln_h += 0.5 * math.log(b) + max(c1, c2)
    h = math.exp(ln_h) if ln_h <= _LN_HUGE else math.inf
    return TheoryBounds(r=r, alpha=alpha, eps=eps, delta_sse=delta,
                        delta_per_pixel=delta / est.m, B=B,
                        intervals=intervals, ln_h=ln_h, h=h)


def theorem2_bound(est: ObjectiveEstimate, alpha: float = 0.01) -> float:
    """Bound on the truncated expected reconstruction SSE under the prior:
    delta * H. Returns inf once the product leaves float64 range; use
    theorem2_ln_bound for comparisons at that scale."""
    bounds = theorem1_bounds(est, alpha)
    if bounds.delta_sse == 0.0:
        return 0.0
    ln_total = math.log(bounds.delta_sse) + bounds.ln_h
    return math.exp(ln_total) if ln_total <= _LN_HUGE else math.inf


def theorem2_ln_bound(est: ObjectiveEstimate, alpha: float = 0.01) -> float:
    """ln(delta * H), finite whenever delta > 0; -inf at delta = 0."""
    bounds = theorem1_bounds(est, alpha)
    if bounds.delta_sse == 0.0:
        return -math.inf
    return math.log(bounds.delta_sse) + bounds.ln_h


def estimate_R_K(model: CvaeModel, pair: PerturbationPair,
                 rng: np.random.Generator, samples: int = 64) -> ObjectiveEstimate:
    """Measure (R, K_i) for one pair.

    R is a Monte-Carlo mean of -SSE/2 - (m/2) ln 2pi over full posterior
    samples; K_i comes from the closed-form per-dimension expression."""
    if samples < 1:
        raise ValueError(f"need samples >= 1, got {samples}")
    x = pair.perturbed[None, :]
    y = pair.conditioned[None, :]
    q = model.encode_posterior(x, y)
    p = model.encode_prior(y)
    z = np.asarray(q.mean, dtype=np.float64) + q.std() * rng.standard_normal(
        (samples, model.k))
    out = np.asarray(model.decode(z, np.repeat(y, samples, axis=0)))
    diff = out - x.astype(np.float64)
    sse = np.sum(diff * diff, axis=1)
    R = float(np.mean(-0.5 * sse)) - 0.5 * model.m * LN_2PI

    ratio = (q.std()[0].astype(np.float64) / p.std()[0]) ** 2
    gap = (np.asarray(q.mean[0], dtype=np.float64) - np.asarray(p.mean[0])) ** 2
    K = ratio + gap / p.var()[0] - 1.0 - np.log(ratio)
    return ObjectiveEstimate(R=R, K=K, m=model.m)


def delta_a_demo(a: float, eps: float, rng: np.random.Generator = None,
                 samples: int = 200_000) -> tuple:
    """Tent function of height a and half-width 1/a^2 at the origin: its max
    over any ball |z| <= eps is a, while E_{N(0,1)} stays below 1/a. Low
    expected error therefore never bounds the worst case in the set."""
    if a <= 0:
        raise ValueError(f"a must be positive, got {a}")
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if rng is None:
        rng = np.random.default_rng()
    z = rng.standard_normal(samples)
    mc = float(np.mean(a * np.clip(1.0 - a * a * np.abs(z), 0.0, 1.0)))
    return a, mc
