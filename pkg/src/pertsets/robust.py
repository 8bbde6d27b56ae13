"""Latent-space attacks and classifier training over a learned perturbation set.

The adversary moves in the standardized latent ball of a frozen generative
model: u with ||u||_2 <= eps, decoded through z = u * sigma(x) + mu(x). The
attack is projected gradient ascent on the classifier loss with normalized
steps and best-iterate output. Training epochs wire that attack (or
truncated-prior augmentation, or nothing) in front of a standard Adam step.
"""

import json
import logging

import numpy as np

from . import nn
from .cvae import CvaeModel, sample_truncated_ball

log = logging.getLogger(__name__)


class AttackConfig:
    """Latent PGD budget: radius eps, T steps of size step.

    step defaults to eps/5 (the training attack); eval_default gives the
    stronger evaluation attack with 50 steps of eps/20.
    """

    def __init__(self, eps: float, steps: int = 7, step: float = None):
        if eps < 0:
            raise ValueError(f"eps must be >= 0, got {eps}")
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        if step is None:
            step = eps / 5.0
        if eps > 0 and step <= 0:
            raise ValueError(f"step must be > 0, got {step}")
        self.eps, self.steps, self.step = float(eps), int(steps), float(step)

    @classmethod
    def eval_default(cls, eps: float) -> "AttackConfig":
        return cls(eps, steps=50, step=eps / 20.0)

    def to_json(self) -> dict:
        return {"eps": self.eps, "steps": self.steps, "step": self.step}


class Classifier:
    """Dense classifier: flattened image -> class logits."""

    def __init__(self, m: int, n_classes: int, hidden=(200,),
                 params: nn.ParamSet = None, rng: np.random.Generator = None):
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        self.m, self.n_classes = int(m), int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        layers = []
        for h in self.hidden:
            layers += [("dense", h), ("relu",)]
        layers.append(("dense", self.n_classes))
        self.net = nn.Network("classifier", self.m, layers)
        if params is None:
            if rng is None:
                raise ValueError("need params or an rng to initialize them")
            params = nn.ParamSet()
            self.net.init(params, rng)
        self.params = params

    def logits(self, x, rec=None):
        return self.net.apply(self.params, x, rec=rec)

    def predict(self, x) -> np.ndarray:
        return np.argmax(np.asarray(self.logits(x)), axis=-1)

    def save(self, stem: str):
        nn.save_params(self.params, stem)
        meta = {"m": self.m, "n_classes": self.n_classes, "hidden": list(self.hidden)}
        with open(stem + ".meta.json", "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")


def load_classifier(stem: str) -> Classifier:
    params, _ = nn.load_params(stem)
    with open(stem + ".meta.json", encoding="utf-8") as f:
        meta = json.load(f)
    return Classifier(meta["m"], meta["n_classes"], tuple(meta["hidden"]),
                      params=params)


# ---------------------------------------------------------------------------
# Attack


def _per_example_ce(logits, labels):
    lv = np.asarray(logits, dtype=np.float64)
    m = lv.max(axis=-1, keepdims=True)
    z = lv - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[..., 0]
    return lse - np.take_along_axis(lv, labels[:, None], axis=-1)[:, 0]


def _project_ball(u, eps):
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    scale = np.where(norms > eps, eps / np.where(norms == 0, 1.0, norms), 1.0)
    return u * scale


def latent_pgd_attack(h: Classifier, model: CvaeModel, x, labels,
                      cfg: AttackConfig, rng: np.random.Generator = None,
                      init_u=None, transcript: list = None):
    """Loss-maximizing perturbation in the latent ball for a batch.

    Starts at u = 0 (or init_u, projected), takes cfg.steps normalized
    gradient-ascent steps with projection, and returns the best iterate:
    (adversarial examples (B, m), latent points (B, k)). Rows with zero
    gradient skip their step and the loop continues. rng is accepted for
    interface stability; the zero initialization needs no randomness.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float32))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if x.shape[1] != model.m or x.shape[1] != h.m:
        raise ValueError(f"dimension mismatch: inputs {x.shape[1]}, "
                         f"generator {model.m}, classifier {h.m}")
    B = x.shape[0]
    prior = model.encode_prior(x)
    mu = np.asarray(prior.mean, dtype=np.float64)
    sd = prior.std().astype(np.float64)
    if init_u is None:
        u = np.zeros((B, model.k))
    else:
        u = _project_ball(np.asarray(init_u, dtype=np.float64).reshape(B, -1),
                          cfg.eps)
    best_loss = np.full(B, -np.inf)
    best_u = u.copy()
    steps = cfg.steps if cfg.eps > 0 else 0
    for t in range(steps + 1):
        uvar = nn.Var(u)
        adv = model.decode(nn.add(nn.mul(uvar, sd), mu), x)
        ce = nn.cross_entropy(h.logits(adv), labels)
        loss = np.asarray(nn._val(ce), dtype=np.float64)
        better = loss > best_loss
        best_loss[better] = loss[better]
        best_u[better] = u[better]
        if transcript is not None:
            transcript.append({"iteration": t, "loss": float(loss.mean()),
                               "u_norm": float(np.linalg.norm(u, axis=1).mean())})
        if t == steps:
            break
        nn.backward(nn.sum_all(ce))
        g = uvar.grad
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(gn > 0, g / np.where(gn == 0, 1.0, gn), 0.0)
        u = _project_ball(u + cfg.step * direction, cfg.eps)
    adv_best = np.asarray(model.decode(best_u * sd + mu, x))
    return adv_best.astype(np.float32), best_u


# ---------------------------------------------------------------------------
# Training epochs


def _check_dims(h: Classifier, model: CvaeModel, x):
    if x.shape[1] != model.m or x.shape[1] != h.m:
        raise ValueError(f"dimension mismatch: inputs {x.shape[1]}, "
                         f"generator {model.m}, classifier {h.m}")


def _train_step(h: Classifier, inputs, labels, opt: dict):
    rec = nn.Rec(h.params)
    ce = nn.cross_entropy(h.logits(inputs, rec=rec), labels)
    loss = nn.mean_all(ce)
    grads = nn.backprop_gradients(rec, loss)
    nn.adam_step(h.params, grads, opt["lr"],
                 beta1=opt.get("beta1", 0.9), beta2=opt.get("beta2", 0.999),
                 eps=opt.get("eps", 1e-8))
    return float(nn._val(loss))


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def adv_train_epoch(h: Classifier, model: CvaeModel, x, labels,
                    cfg: AttackConfig, opt: dict, rng: np.random.Generator,
                    batch_size: int = 128) -> Classifier:
    """One epoch of adversarial training: attack each batch in the frozen
    generator's latent ball, then take a standard step on the attacked
    examples."""
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    _check_dims(h, model, x)
    losses = []
    for idx in _epoch_batches(len(x), batch_size, rng):
        adv, _ = latent_pgd_attack(h, model, x[idx], labels[idx], cfg)
        losses.append(_train_step(h, adv, labels[idx], opt))
    log.info("adv epoch: mean loss %.4f over %d batches", np.mean(losses), len(losses))
    return h


def augment_train_epoch(h: Classifier, model: CvaeModel, x, labels, eps: float,
                        opt: dict, rng: np.random.Generator,
                        batch_size: int = 128) -> Classifier:
    """One epoch on truncated-prior samples: each example is replaced by a
    decode of a random latent from the eps ball before the training step."""
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    _check_dims(h, model, x)
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    losses = []
    for idx in _epoch_batches(len(x), batch_size, rng):
        xb = x[idx]
        if eps > 0:
            u = sample_truncated_ball(model.k, eps, len(idx), rng)
        else:
            u = np.zeros((len(idx), model.k))
        prior = model.encode_prior(xb)
        z = u * prior.std() + np.asarray(prior.mean)
        aug = np.asarray(model.decode(z.astype(np.float32), xb))
        losses.append(_train_step(h, aug, labels[idx], opt))
    log.info("augment epoch: mean loss %.4f over %d batches", np.mean(losses), len(losses))
    return h


def clean_train_epoch(h: Classifier, x, labels, opt: dict,
                      rng: np.random.Generator, batch_size: int = 128) -> Classifier:
    """One standard training epoch on the raw examples."""
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    losses = []
    for idx in _epoch_batches(len(x), batch_size, rng):
        losses.append(_train_step(h, x[idx], labels[idx], opt))
    log.info("clean epoch: mean loss %.4f over %d batches", np.mean(losses), len(losses))
    return h


# ---------------------------------------------------------------------------
# Accuracy


def accuracy(h: Classifier, x, labels, batch_size: int = 512) -> float:
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    hits = 0
    for lo in range(0, len(x), batch_size):
        hits += int((h.predict(x[lo:lo + batch_size]) == labels[lo:lo + batch_size]).sum())
    return hits / len(x)


def robust_accuracy(h: Classifier, model: CvaeModel, x, labels,
                    cfg: AttackConfig, batch_size: int = 256) -> float:
    """Fraction of examples classified correctly both clean and under the
    latent attack; never exceeds plain accuracy by construction."""
    x = np.asarray(x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    _check_dims(h, model, x)
    hits = 0
    for lo in range(0, len(x), batch_size):
        xb, yb = x[lo:lo + batch_size], labels[lo:lo + batch_size]
        clean_ok = h.predict(xb) == yb
        adv, _ = latent_pgd_attack(h, model, xb, yb, cfg)
        adv_ok = h.predict(adv) == yb
        hits += int((clean_ok & adv_ok).sum())
    return hits / len(x)
