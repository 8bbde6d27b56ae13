"""Set-quality evaluation for a trained perturbation-set model.

Radius selection plus six per-pair metrics: encoder, PGD, expected and over
approximation errors, one-sample reconstruction error, and KL. All errors are
per-pixel mean squared values (SSE / m); KL is in nats. Reports aggregate
mean/std and serialize to CSV (one row per pair) and a JSON summary.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cvae import CvaeModel, PairSet, PerturbationPair, kl_diag, sample_truncated_ball

METRICS = ("enc_ae", "pgd_ae", "eae", "oae", "recon_err", "kl")


# ---------------------------------------------------------------------------
# Batched internals; the public per-pair ops wrap these with B = 1


def _rows(pair: PerturbationPair):
    return pair.perturbed[None, :], pair.conditioned[None, :]


def _project_rows(u, eps):
    """Project each row of u onto the l2 ball of radius eps."""
    u = np.asarray(u, dtype=np.float64)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    scale = np.where(norms > eps, eps / np.where(norms == 0, 1.0, norms), 1.0)
    return u * scale


def _encoder_points(model: CvaeModel, x, y):
    """Standardized posterior-mean latents and their norms, plus the prior."""
    q = model.encode_posterior(x, y)
    prior = model.encode_prior(y)
    u = (np.asarray(q.mean, dtype=np.float64) - np.asarray(prior.mean)) / prior.std()
    return u, np.linalg.norm(u, axis=1), q, prior


def _mse_rows(model: CvaeModel, u, y, x, prior):
    # f64 throughout so values agree exactly with the gradient path in
    # _mse_and_grad (the best-iterate invariants compare across the two)
    z = np.asarray(u, dtype=np.float64) * prior.std() + np.asarray(prior.mean)
    out = np.asarray(model.decode(z, y))
    diff = out - np.asarray(x, dtype=np.float64)
    return np.sum(diff * diff, axis=1) / x.shape[1]


def _mse_and_grad(model: CvaeModel, u, y, x, prior):
    """Per-row per-pixel MSE and its gradient w.r.t. the standardized latent."""
    uvar = nn.Var(np.asarray(u, dtype=np.float64))
    z = nn.add(nn.mul(uvar, prior.std()), np.asarray(prior.mean, dtype=np.float64))
    out = model.decode(z, y)
    diff = nn.add(out, -np.asarray(x, dtype=np.float64))
    sse = nn.row_sum(nn.mul(diff, diff))
    nn.backward(nn.sum_all(sse))
    return np.asarray(nn._val(sse)) / x.shape[1], uvar.grad


def _pgd_best(model, x, y, eps, steps, step, start_u, maximize=False):
    """Projected gradient descent/ascent on reconstruction error in u-space.

    Normalized-gradient steps, best iterate kept (the start point counts as
    an iterate, so the result never loses to the warm start). Returns per-row
    (best per-pixel MSE, best u).
    """
    prior = model.encode_prior(y)
    u = _project_rows(start_u, eps)
    sign = 1.0 if maximize else -1.0
    best_err = None
    best_u = None
    for t in range(steps + 1):
        mse, g = _mse_and_grad(model, u, y, x, prior)
        if best_err is None:
            best_err, best_u = mse.copy(), u.copy()
        else:
            better = mse > best_err if maximize else mse < best_err
            best_err = np.where(better, mse, best_err)
            best_u[better] = u[better]
        if t == steps:
            break
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(gn > 0, g / np.where(gn == 0, 1.0, gn), 0.0)
        u = _project_rows(u + sign * step * direction, eps)
    return best_err, best_u


# ---------------------------------------------------------------------------
# Public operations


def select_radius(model: CvaeModel, pairs: PairSet, batch_size: int = 512) -> float:
    """Smallest ball radius containing every standardized mean encoding:
    eps = max over pairs of ||(mu_q - mu_p) / sigma_p||_2."""
    if len(pairs) == 0:
        raise ValueError("radius selection needs a non-empty pair set")
    best = 0.0
    for lo in range(0, len(pairs), batch_size):
        x = pairs.perturbed[lo:lo + batch_size]
        y = pairs.conditioned[lo:lo + batch_size]
        _, norms, _, _ = _encoder_points(model, x, y)
        best = max(best, float(norms.max()))
    return best


def encoder_ae(model: CvaeModel, pair: PerturbationPair, eps: float) -> float:
    """Per-pixel MSE at the encoder's standardized mean, projected into the
    eps ball."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x, y = _rows(pair)
    u, _, _, prior = _encoder_points(model, x, y)
    return float(_mse_rows(model, _project_rows(u, eps), y, x, prior)[0])


def pgd_ae(model: CvaeModel, pair: PerturbationPair, eps: float, steps: int = 50,
           step: float = None, start_u=None, return_point: bool = False):
    """Best per-pixel MSE found by projected gradient descent in the ball.

    Warm-started at the projected encoder point (or start_u when given), so
    the result never exceeds encoder_ae / the error at start_u."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if step is None:
        step = eps / 20.0
    x, y = _rows(pair)
    if start_u is None:
        u0, _, _, _ = _encoder_points(model, x, y)
    else:
        u0 = np.asarray(start_u, dtype=np.float64).reshape(1, -1)
    err, u = _pgd_best(model, x, y, eps, steps, step, u0, maximize=False)
    if return_point:
        return float(err[0]), u[0]
    return float(err[0])


def expected_ae(model: CvaeModel, pair: PerturbationPair, eps: float, n: int = 5,
                rng: np.random.Generator = None) -> float:
    """Monte-Carlo mean per-pixel MSE over n truncated-normal draws in the
    ball; eps = 0 degenerates to the error at the prior mean."""
    if eps < 0 or n < 1:
        raise ValueError("need eps >= 0 and n >= 1")
    x, y = _rows(pair)
    prior = model.encode_prior(y)
    if eps == 0:
        return float(_mse_rows(model, np.zeros((1, model.k)), y, x, prior)[0])
    if rng is None:
        rng = np.random.default_rng()
    us = sample_truncated_ball(model.k, eps, n, rng)
    total = 0.0
    for j in range(n):
        total += float(_mse_rows(model, us[j:j + 1], y, x, prior)[0])
    return total / n


def over_ae(model: CvaeModel, pair: PerturbationPair, eps: float, steps: int = 50,
            step: float = None, rng: np.random.Generator = None) -> float:
    """Best (largest) per-pixel MSE found by projected gradient ascent from a
    random point in the ball; never below the error at its initialization."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x, y = _rows(pair)
    prior = model.encode_prior(y)
    if eps == 0:
        return float(_mse_rows(model, np.zeros((1, model.k)), y, x, prior)[0])
    if step is None:
        step = eps / 20.0
    if rng is None:
        rng = np.random.default_rng()
    u0 = sample_truncated_ball(model.k, eps, 1, rng)
    err, _ = _pgd_best(model, x, y, eps, steps, step, u0, maximize=True)
    return float(err[0])


def recon_error(model: CvaeModel, pair: PerturbationPair,
                rng: np.random.Generator) -> float:
    """Per-pixel MSE with one full posterior sample z ~ q(z|x,y)."""
    x, y = _rows(pair)
    q = model.encode_posterior(x, y)
    prior = model.encode_prior(y)
    z = np.asarray(q.mean) + q.std() * rng.standard_normal((1, model.k))
    u = (z - np.asarray(prior.mean)) / prior.std()
    return float(_mse_rows(model, u, y, x, prior)[0])


def kl_metric(model: CvaeModel, pair: PerturbationPair) -> float:
    x, y = _rows(pair)
    q = model.encode_posterior(x, y)
    prior = model.encode_prior(y)
    return float(np.asarray(kl_diag(q, prior))[0])


# ---------------------------------------------------------------------------
# Dataset-level report


@dataclass
class EvalReport:
    eps: float
    records: dict            # metric name -> (N,) array, plus "latent_norm"
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records["enc_ae"])

    def summary(self) -> dict:
        out = {"eps": self.eps, "pairs": len(self), "metrics": {},
               "config_hash": self.config_hash()}
        for name in METRICS + ("latent_norm",):
            v = self.records[name]
            out["metrics"][name] = {"mean": float(v.mean()), "std": float(v.std())}
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_csv(self, path: str):
        names = METRICS + ("latent_norm",)
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("pair",) + names)
            for i in range(len(self)):
                w.writerow([i] + [repr(float(self.records[n][i])) for n in names])

    def to_summary_json(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")


def _pair_seeds(x, y, base: int):
    """Content-keyed per-pair seeds: metrics travel with the pair, so the
    aggregates are invariant to dataset permutation."""
    seeds = []
    for i in range(x.shape[0]):
        h = hashlib.blake2b(x[i].tobytes() + y[i].tobytes(), digest_size=8)
        seeds.append(np.random.SeedSequence([base, int.from_bytes(h.digest(), "big")]))
    return seeds


def evaluate_set(model: CvaeModel, pairs: PairSet, eps: float,
                 rng: np.random.Generator, steps: int = 50, n_expected: int = 5,
                 batch_size: int = 256) -> EvalReport:
    """All six metrics for every pair, plus latent norms and aggregates."""
    if len(pairs) == 0:
        raise ValueError("evaluation needs a non-empty pair set")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    step = eps / 20.0
    base = int(rng.integers(0, 2 ** 62))
    out = {name: [] for name in METRICS + ("latent_norm",)}
    for lo in range(0, len(pairs), batch_size):
        x = pairs.perturbed[lo:lo + batch_size]
        y = pairs.conditioned[lo:lo + batch_size]
        B = x.shape[0]
        u_enc, norms, q, prior = _encoder_points(model, x, y)
        out["latent_norm"].append(norms)
        out["kl"].append(np.asarray(kl_diag(q, prior), dtype=np.float64))

        u_proj = _project_rows(u_enc, eps)
        out["enc_ae"].append(_mse_rows(model, u_proj, y, x, prior))

        pgd_err, _ = _pgd_best(model, x, y, eps, steps, step, u_proj, maximize=False)
        out["pgd_ae"].append(pgd_err)

        rngs = [np.random.default_rng(s) for s in _pair_seeds(x, y, base)]

        noise = np.stack([r.standard_normal(model.k) for r in rngs])
        z = np.asarray(q.mean) + q.std() * noise
        u_smp = (z - np.asarray(prior.mean)) / prior.std()
        out["recon_err"].append(_mse_rows(model, u_smp, y, x, prior))

        draws = np.stack([sample_truncated_ball(model.k, eps, n_expected, r)
                          for r in rngs])
        eae = np.zeros(B)
        for j in range(n_expected):
            eae += _mse_rows(model, draws[:, j], y, x, prior)
        out["eae"].append(eae / n_expected)

        u0 = np.stack([sample_truncated_ball(model.k, eps, 1, r)[0] for r in rngs])
        oae_err, _ = _pgd_best(model, x, y, eps, steps, step, u0, maximize=True)
        out["oae"].append(oae_err)

    records = {name: np.concatenate(v) for name, v in out.items()}
    config = {"eps": eps, "steps": steps, "n_expected": n_expected,
              "model": model.meta()}
    return EvalReport(eps=eps, records=records, config=config)
