"""Randomized smoothing over a learned perturbation set.

The smoothed classifier votes over decodes of Gaussian latents u ~ N(0, s^2 I)
in the standardized prior space (the same space the attacks use). Prediction
runs a two-sided binomial test on the top two vote counts; certification
lower-bounds the top-class probability with a Clopper-Pearson interval and
converts it to a certified l2 latent radius sigma * quantile(p_a).
"""

import logging
from dataclasses import dataclass

import numpy as np

from .cvae import CvaeModel
from .robust import Classifier, _epoch_batches, _train_step
from .specialfn import binom_two_sided_pvalue, clopper_pearson_lower, std_normal_quantile

log = logging.getLogger(__name__)

ABSTAIN = -1


@dataclass
class Certificate:
    prediction: int          # class id, or ABSTAIN
    radius: float            # certified l2 radius in latent units, 0 on abstain
    p_a: float               # lower confidence bound on the top-class mass
    n0: int
    n: int
    sigma: float
    alpha: float


def sample_under_noise(h: Classifier, model: CvaeModel, x, n: int, sigma: float,
                       rng: np.random.Generator, batch_size: int = 512) -> np.ndarray:
    """Class counts over n decodes of x at latent noise level sigma."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float32).reshape(1, -1)
    if x.shape[1] != model.m or x.shape[1] != h.m:
        raise ValueError(f"dimension mismatch: input {x.shape[1]}, "
                         f"generator {model.m}, classifier {h.m}")
    prior = model.encode_prior(x)
    mu = np.asarray(prior.mean, dtype=np.float64)
    sd = prior.std().astype(np.float64)
    counts = np.zeros(h.n_classes, dtype=np.int64)
    done = 0
    while done < n:
        b = min(batch_size, n - done)
        u = sigma * rng.standard_normal((b, model.k))
        dec = np.asarray(model.decode(u * sd + mu, np.repeat(x, b, axis=0)))
        preds = h.predict(dec.astype(np.float32))
        counts += np.bincount(preds, minlength=h.n_classes)
        done += b
    return counts


def _top_two(counts):
    """Indices of the two largest counts, ties broken by lowest class id."""
    order = np.lexsort((np.arange(len(counts)), -np.asarray(counts)))
    return int(order[0]), int(order[1])


def _predict_from_counts(counts, alpha: float) -> int:
    a, b = _top_two(counts)
    na, nb = int(counts[a]), int(counts[b])
    if na + nb == 0:
        return ABSTAIN
    p = binom_two_sided_pvalue(na, na + nb, 0.5)
    return a if p <= alpha else ABSTAIN


def smoothed_predict(h: Classifier, model: CvaeModel, x, n: int, sigma: float,
                     alpha: float, rng: np.random.Generator) -> int:
    """Top class when the two-sided test rejects a top-two tie, else ABSTAIN."""
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    counts = sample_under_noise(h, model, x, n, sigma, rng)
    return _predict_from_counts(counts, alpha)


def certify(h: Classifier, model: CvaeModel, x, sigma: float,
            rng: np.random.Generator, n0: int = 100, n: int = 10_000,
            alpha: float = 0.001) -> Certificate:
    """Guess the top class from n0 samples, then lower-bound its probability
    with n fresh samples; certify radius sigma * quantile(p_a) when
    p_a > 1/2, otherwise abstain. The two stages use independent streams."""
    if n0 < 1 or n < 1:
        raise ValueError("need n0 >= 1 and n >= 1")
    rng0, rng1 = rng.spawn(2)
    guess, _ = _top_two(sample_under_noise(h, model, x, n0, sigma, rng0))
    counts = sample_under_noise(h, model, x, n, sigma, rng1)
    p_a = clopper_pearson_lower(int(counts[guess]), n, 1.0 - alpha)
    if p_a > 0.5:
        return Certificate(prediction=guess, radius=sigma * std_normal_quantile(p_a),
                           p_a=p_a, n0=n0, n=n, sigma=sigma, alpha=alpha)
    return Certificate(prediction=ABSTAIN, radius=0.0, p_a=p_a, n0=n0, n=n,
                       sigma=sigma, alpha=alpha)


def sigma_for_radius(eps_target: float, n: int = 10_000, alpha: float = 0.001) -> float:
    """Noise level whose best achievable certified radius (unanimous votes)
    equals eps_target: sigma = eps / quantile(clopper_pearson_lower(n, n))."""
    if eps_target <= 0:
        raise ValueError(f"eps_target must be > 0, got {eps_target}")
    best_p = clopper_pearson_lower(n, n, 1.0 - alpha)
    return eps_target / std_normal_quantile(best_p)


def noise_train_epoch(h: Classifier, model: CvaeModel, x, labels, sigma: float,
                      opt: dict, rng: np.random.Generator,
                      batch_size: int = 128) -> Classifier:
    """One epoch on Gaussian latent noise: each example is replaced by a
    decode at u ~ N(0, sigma^2 I) before a standard training step."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[1] != model.m or x.shape[1] != h.m:
        raise ValueError(f"dimension mismatch: inputs {x.shape[1]}, "
                         f"generator {model.m}, classifier {h.m}")
    losses = []
    for idx in _epoch_batches(len(x), batch_size, rng):
        xb = x[idx]
        prior = model.encode_prior(xb)
        u = sigma * rng.standard_normal((len(idx), model.k))
        z = u * prior.std().astype(np.float64) + np.asarray(prior.mean, np.float64)
        dec = np.asarray(model.decode(z, xb)).astype(np.float32)
        losses.append(_train_step(h, dec, labels[idx], opt))
    log.info("noise epoch: mean loss %.4f over %d batches", np.mean(losses), len(losses))
    return h
