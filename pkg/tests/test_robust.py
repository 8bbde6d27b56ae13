"""Tests for latent PGD attacks, training epochs and robust accuracy."""

import math

import numpy as np
import pytest

from pertsets import nn
from pertsets.cvae import CvaeModel
from pertsets.robust import (
    AttackConfig,
    Classifier,
    _per_example_ce,
    accuracy,
    adv_train_epoch,
    augment_train_epoch,
    clean_train_epoch,
    latent_pgd_attack,
    load_classifier,
    robust_accuracy,
)

M, K, HID = 4, 2, 6


def rand_model(seed=0, m=M, k=K):
    return CvaeModel(m, k, HID, rng=np.random.default_rng(seed))


def rand_clf(seed=1, m=M, n_classes=3, hidden=(8,)):
    return Classifier(m, n_classes, hidden, rng=np.random.default_rng(seed))


def rand_data(n, seed=2, m=M, n_classes=3):
    rng = np.random.default_rng(seed)
    return (rng.uniform(0, 1, (n, m)).astype(np.float32),
            rng.integers(0, n_classes, n))


def ce_at(h, model, x, labels, u):
    prior = model.encode_prior(x)
    z = u * prior.std().astype(np.float64) + np.asarray(prior.mean, np.float64)
    adv = np.asarray(model.decode(z, x))
    return _per_example_ce(h.logits(adv.astype(np.float32)), labels)


# ---------------------------------------------------------------------------
# Config and classifier plumbing


def test_attack_config_validation():
    cfg = AttackConfig(2.0)
    assert cfg.steps == 7 and math.isclose(cfg.step, 0.4)
    ev = AttackConfig.eval_default(2.0)
    assert ev.steps == 50 and math.isclose(ev.step, 0.1)
    assert AttackConfig(0.0).eps == 0.0
    with pytest.raises(ValueError):
        AttackConfig(-1.0)
    with pytest.raises(ValueError):
        AttackConfig(1.0, steps=0)
    with pytest.raises(ValueError):
        AttackConfig(1.0, step=0.0)


def test_classifier_shapes_and_roundtrip(tmp_path):
    h = rand_clf()
    x, _ = rand_data(5)
    lg = np.asarray(h.logits(x))
    assert lg.shape == (5, 3) and np.isfinite(lg).all()
    assert h.predict(x).shape == (5,)
    stem = str(tmp_path / "clf")
    h.save(stem)
    h2 = load_classifier(stem)
    np.testing.assert_array_equal(np.asarray(h2.logits(x)), lg)
    with pytest.raises(ValueError):
        Classifier(M, 1, rng=np.random.default_rng(0))


def test_classifier_no_hidden_is_linear():
    h = Classifier(M, 2, hidden=(), rng=np.random.default_rng(3))
    x, _ = rand_data(4, n_classes=2)
    w = h.params.values["classifier/w0"].astype(np.float64)
    b = h.params.values["classifier/b0"].astype(np.float64)
    np.testing.assert_allclose(np.asarray(h.logits(x)), x @ w + b, rtol=1e-5)


# ---------------------------------------------------------------------------
# Attack


def monotone_setup(label):
    """1-D latent driving every pixel up; a linear head makes the loss
    strictly monotone in u, so the optimum sits at eps * sign."""
    model = CvaeModel(3, 1, 4, rng=np.random.default_rng(0))
    for name in list(model.params.values):
        model.params.values[name][:] = 0.0
    model.params.values["decoder/w0"][0, 0] = 1.0
    model.params.values["decoder/b0"][:] = [5.0, 0.0, 0.0, 0.0]
    model.params.values["decoder/w1"][0, :] = 1.0
    h = Classifier(3, 2, hidden=(), rng=np.random.default_rng(1))
    h.params.values["classifier/w0"][:] = 0.0
    h.params.values["classifier/w0"][:, 1] = 1.0
    h.params.values["classifier/b0"][:] = 0.0
    x = np.full((1, 3), 0.5, dtype=np.float32)
    return model, h, x, np.array([label])


@pytest.mark.parametrize("label,sign", [(0, 1.0), (1, -1.0)])
def test_attack_recovers_linear_optimum(label, sign):
    model, h, x, labels = monotone_setup(label)
    _, u = latent_pgd_attack(h, model, x, labels, AttackConfig(2.0, steps=12))
    assert abs(u[0, 0] - sign * 2.0) <= 1e-4


def test_attack_zero_radius_returns_prior_mean_decode():
    model, h = rand_model(), rand_clf()
    x, labels = rand_data(4)
    adv, u = latent_pgd_attack(h, model, x, labels, AttackConfig(0.0))
    np.testing.assert_array_equal(u, 0.0)
    prior = model.encode_prior(x)
    want = np.asarray(model.decode(np.zeros((4, K)) * prior.std()
                                   + np.asarray(prior.mean, np.float64), x))
    np.testing.assert_allclose(adv, want.astype(np.float32), atol=1e-7)


def test_attack_best_iterate_and_feasibility():
    model, h = rand_model(4), rand_clf(5)
    x, labels = rand_data(6, seed=6)
    for eps in (0.5, 1.0, 3.0):
        cfg = AttackConfig(eps, steps=10)
        adv, u = latent_pgd_attack(h, model, x, labels, cfg)
        assert (np.linalg.norm(u, axis=1) <= eps + 1e-6).all()
        base = ce_at(h, model, x, labels, np.zeros((6, K)))
        got = ce_at(h, model, x, labels, u)
        assert (got >= base - 1e-10).all()
        assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_attack_budget_monotonicity():
    model, h = rand_model(7), rand_clf(8)
    x, labels = rand_data(5, seed=9)
    _, u_small = latent_pgd_attack(h, model, x, labels, AttackConfig(0.5, steps=10))
    _, u_large = latent_pgd_attack(h, model, x, labels,
                                   AttackConfig(1.5, steps=10), init_u=u_small)
    small = ce_at(h, model, x, labels, u_small)
    large = ce_at(h, model, x, labels, u_large)
    assert (large >= small - 1e-10).all()


def test_attack_zero_gradient_rows_stay_put():
    model = rand_model(10)
    h = rand_clf(11)
    for name in list(h.params.values):
        h.params.values[name][:] = 0.0
    x, labels = rand_data(3, seed=12)
    adv, u = latent_pgd_attack(h, model, x, labels, AttackConfig(1.0, steps=5))
    np.testing.assert_array_equal(u, 0.0)
    assert np.isfinite(adv).all()


def test_attack_transcript():
    model, h = rand_model(13), rand_clf(14)
    x, labels = rand_data(4, seed=15)
    rows = []
    latent_pgd_attack(h, model, x, labels, AttackConfig(1.0, steps=6),
                      transcript=rows)
    assert [r["iteration"] for r in rows] == list(range(7))
    assert all(np.isfinite(r["loss"]) and r["u_norm"] >= 0 for r in rows)
    assert rows[0]["u_norm"] == 0.0


def test_attack_dimension_mismatch():
    model = rand_model(m=5)
    h = rand_clf(m=M)
    x, labels = rand_data(2, m=5)
    with pytest.raises(ValueError, match="mismatch"):
        latent_pgd_attack(h, model, x, labels, AttackConfig(1.0))


# ---------------------------------------------------------------------------
# Training epochs


def clone_clf(h):
    params = h.params.copy()
    return Classifier(h.m, h.n_classes, h.hidden, params=params)


def test_adv_epoch_deterministic():
    model = rand_model(16)
    x, labels = rand_data(40, seed=17)
    h1, h2 = rand_clf(18), rand_clf(18)
    for h, seed in ((h1, 19), (h2, 19)):
        adv_train_epoch(h, model, x, labels, AttackConfig(1.0, steps=3),
                        {"lr": 1e-3}, np.random.default_rng(seed), batch_size=16)
    for name in h1.params.values:
        np.testing.assert_array_equal(h1.params.values[name], h2.params.values[name])


def test_adv_epoch_zero_eps_equals_clean_on_decoded():
    model = rand_model(20)
    x, labels = rand_data(30, seed=21)
    ha, hc = rand_clf(22), rand_clf(22)
    adv_train_epoch(ha, model, x, labels, AttackConfig(0.0), {"lr": 1e-3},
                    np.random.default_rng(23), batch_size=10)
    prior = model.encode_prior(x)
    dec = np.asarray(model.decode(np.asarray(prior.mean, np.float64), x))
    clean_train_epoch(hc, dec.astype(np.float32), labels, {"lr": 1e-3},
                      np.random.default_rng(23), batch_size=10)
    for name in ha.params.values:
        np.testing.assert_array_equal(ha.params.values[name], hc.params.values[name])


def test_augment_epoch_runs_and_is_deterministic():
    model = rand_model(24)
    x, labels = rand_data(30, seed=25)
    h1, h2 = rand_clf(26), rand_clf(26)
    for h in (h1, h2):
        augment_train_epoch(h, model, x, labels, 1.0, {"lr": 1e-3},
                            np.random.default_rng(27), batch_size=10)
    for name in h1.params.values:
        np.testing.assert_array_equal(h1.params.values[name], h2.params.values[name])
        assert np.isfinite(h1.params.values[name]).all()
    with pytest.raises(ValueError):
        augment_train_epoch(h1, model, x, labels, -0.5, {"lr": 1e-3},
                            np.random.default_rng(0))


def test_clean_training_learns_separable_task():
    rng = np.random.default_rng(28)
    n = 200
    labels = rng.integers(0, 2, n)
    x = rng.uniform(0, 0.3, (n, M)).astype(np.float32)
    x[labels == 1] += 0.6
    h = Classifier(M, 2, hidden=(8,), rng=np.random.default_rng(29))
    for _ in range(15):
        clean_train_epoch(h, x, labels, {"lr": 5e-3}, np.random.default_rng(30))
    assert accuracy(h, x, labels) >= 0.95


# ---------------------------------------------------------------------------
# Accuracy semantics


def test_robust_accuracy_never_exceeds_clean():
    model = rand_model(31)
    h = rand_clf(32)
    x, labels = rand_data(25, seed=33)
    acc = accuracy(h, x, labels)
    rob = robust_accuracy(h, model, x, labels, AttackConfig(1.0, steps=5),
                          batch_size=9)
    assert 0.0 <= rob <= acc <= 1.0


def test_robust_accuracy_counts_conjunction():
    # classifier that always answers class 0: robust accuracy equals the
    # fraction of true zeros no matter what the attack does
    model = rand_model(34)
    h = rand_clf(35, n_classes=2)
    for name in list(h.params.values):
        h.params.values[name][:] = 0.0
    h.params.values["classifier/b1"][:] = [1.0, 0.0]
    x, labels = rand_data(20, seed=36, n_classes=2)
    rob = robust_accuracy(h, model, x, labels, AttackConfig(0.5, steps=3))
    assert rob == pytest.approx((labels == 0).mean())
