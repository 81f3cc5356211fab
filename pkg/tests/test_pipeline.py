
import numpy as np
import pytest

from adda_forge import autodiff as ad
from adda_forge.datasets import LabeledSet, SyntheticSpec, gen_two_domain
from adda_forge.errors import ConfigError, ShapeError, TrainingDivergedError
from adda_forge.models import ArchSpec, build_discriminator, build_encoder, clone_into_target
from adda_forge.pipeline import (VALID_PAIRINGS, AdaptConfig, BaggedModel, adapt_target,
                                 bag_weights, bagged_infer, compose_encoder_batch,
                                 discriminator_objective, encoder_objective, infer,
                                 is_valid_pairing, pretrain_source, run_experiment)

ARCH = ArchSpec(hidden=(8,), disc_hidden=(8,))


@pytest.fixture(scope="module")
def task():
    return gen_two_domain(SyntheticSpec(rotation_deg=30, per_class=40, seed=0))


@pytest.fixture(scope="module")
def source_enc(task):
    return pretrain_source(AdaptConfig(step1_iters=200, step1_batch=32), task[0], ARCH)


def small_cfg(**kw):
    base = dict(step1_iters=200, step1_batch=32, step2_iters=5, step2_batch=16)
    return AdaptConfig(**{**base, **kw})


def test_defaults():
    cfg = AdaptConfig()
    assert (cfg.step1_lr, cfg.step1_iters, cfg.step1_batch) == (0.001, 10000, 128)
    assert (cfg.step2_lr, cfg.beta1, cfg.beta2, cfg.step2_iters, cfg.step2_batch) == (0.0002, 0.5, 0.999, 10000, 128)
    assert (cfg.z, cfg.l1_lambda, cfg.val_fraction, cfg.disc_steps, cfg.enc_steps) == (0.7, 0.001, 0.05, 1, 1)
    assert cfg.kernel.sigmas == (1.0, 0.1, 0.01, 0.001, 0.0001)


def test_config_validation():
    for kw in ({"disc_variant": "GAN"}, {"enc_variant": "KL"}, {"z": 0.0}, {"val_fraction": 1.0},
               {"l1_lambda": -1.0}, {"step2_batch": 0}):
        with pytest.raises(ConfigError):
            AdaptConfig(**kw)


def test_corruption_only_for_rec_by_default():
    assert AdaptConfig(disc_variant="REC").corrupt_z == 0.7
    assert AdaptConfig(disc_variant="JOINT", enc_variant="FEAT").corrupt_z == 1.0
    assert AdaptConfig(disc_variant="JOINT", enc_variant="FEAT", corrupt=True).corrupt_z == 0.7


def test_pairings():
    assert is_valid_pairing("REC", "MMD_PQ") and is_valid_pairing("ADDA", "INV")
    assert not is_valid_pairing("ADDA", "PSEUDO") and not is_valid_pairing("REC", "INV")
    assert set(VALID_PAIRINGS) == {"ADDA", "MULTI", "JOINT", "REC"}


def test_pretrain_separable_and_deterministic():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 400)
    x = rng.standard_normal((400, 2)) * 0.5 + np.where(y[:, None] == 0, -2.0, 2.0)
    ds = LabeledSet(x, y)
    history = []
    cfg = AdaptConfig(step1_iters=500, seed=3)
    enc = pretrain_source(cfg, ds, ArchSpec(hidden=(16,)), history=history)
    assert enc.frozen
    assert infer(enc, ds)[1] >= 0.99
    again = pretrain_source(cfg, ds, ArchSpec(hidden=(16,)))
    for a, b in zip(enc.params(), again.params()):
        np.testing.assert_array_equal(a, b)
    avg = np.convolve(history, np.ones(100) / 100, mode="valid")
    assert avg[-1] <= avg[0]
    assert np.all(np.diff(avg[::100]) <= 1e-9)


def test_compose_encoder_batch():
    s, t = np.zeros((128, 2)), np.ones((128, 2))
    np.testing.assert_array_equal(compose_encoder_batch(s, t, False), t)
    mixed = compose_encoder_batch(s, t, True)
    assert mixed.shape == (128, 2) and mixed[:, 0].sum() == 64
    odd = compose_encoder_batch(np.zeros((7, 1)), np.ones((7, 1)), True)
    assert odd[:, 0].tolist() == [0, 0, 0, 1, 1, 1, 1]
    with pytest.raises(ShapeError):
        compose_encoder_batch(np.zeros((3, 1)), np.ones((4, 1)), True)


def test_zero_iterations_is_clone(task, source_enc):
    src, tgt = task
    res = adapt_target(small_cfg(step2_iters=0), source_enc, src, tgt)
    np.testing.assert_array_equal(infer(res.target_encoder, tgt)[0], infer(source_enc, tgt)[0])
    assert res.metrics == []


def test_requires_frozen_source(task):
    with pytest.raises(ConfigError):
        adapt_target(small_cfg(), build_encoder(ARCH, 3, 0), task[0], task[1])


@pytest.mark.parametrize("disc,enc", [(d, e) for d, es in VALID_PAIRINGS.items() for e in es])
def test_every_pairing_runs_and_keeps_source_frozen(task, source_enc, disc, enc):
    src, tgt = task
    before = [p.tobytes() for p in source_enc.params()]
    res = adapt_target(small_cfg(disc_variant=disc, enc_variant=enc, target_reg=True), source_enc, src, tgt)
    assert [p.tobytes() for p in source_enc.params()] == before
    assert len(res.metrics) == 5
    assert all(np.isfinite(r["disc_loss"]) and np.isfinite(r["enc_loss"]) for r in res.metrics)


def test_update_isolation(task, source_enc):
    src, tgt = task
    cfg = small_cfg()
    target = clone_into_target(source_enc)
    disc = build_discriminator(3, (8,), cfg.head, 0, cfg.l1_lambda)
    rng = np.random.default_rng(0)
    hs = source_enc.logits(src.x[:16])
    ps = ad.softmax(hs)
    enc_before = [p.copy() for p in target.params()]
    _, g = discriminator_objective(disc, hs, ps, src.y[:16], target.logits(tgt.x[:16]), cfg, rng)
    disc.apply_update(g, ad.AdamState(lr=0.01))
    for a, b in zip(target.params(), enc_before):
        np.testing.assert_array_equal(a, b)
    disc_before = [p.copy() for p in disc.params()]
    _, g = encoder_objective(disc, target, tgt.x[:16], hs, ps, cfg, rng)
    target.apply_update(g, ad.AdamState(lr=0.01))
    for a, b in zip(disc.params(), disc_before):
        np.testing.assert_array_equal(a, b)


def test_full_run_is_deterministic(task, source_enc):
    src, tgt = task
    cfg = small_cfg(seed=5, val_every=2)
    a = run_experiment(cfg, ARCH, src, tgt, tgt, source_enc=source_enc)
    b = run_experiment(cfg, ARCH, src, tgt, tgt, source_enc=source_enc)
    assert a.summary() == b.summary()
    assert [r["disc_loss"] for r in a.metrics] == [r["disc_loss"] for r in b.metrics]
    for p, q in zip(a.target_encoder.params(), b.target_encoder.params()):
        np.testing.assert_array_equal(p, q)
    assert a.metrics[1]["val_accuracy"] is not None and a.metrics[0]["val_accuracy"] is None


def test_nan_loss_aborts(task, source_enc):
    src, tgt = task
    bad = LabeledSet(np.full_like(tgt.x, np.nan), tgt.y, "target")
    with pytest.raises(TrainingDivergedError, match="seed="):
        adapt_target(small_cfg(disc_variant="JOINT", enc_variant="MAX"), source_enc, src, bad)


def test_infer_chance_and_perfect():
    rng = np.random.default_rng(0)
    enc = build_encoder(ArchSpec(input_dim=5, hidden=(16,)), 10, seed=1)
    x = rng.standard_normal((1000, 5))
    y = rng.integers(0, 10, 1000)
    preds, acc = infer(enc, LabeledSet(x, y))
    perm = rng.permutation(1000)
    assert infer(enc, LabeledSet(x[perm], y[perm]))[1] == acc
    assert abs(acc - 0.1) <= 0.05
    assert infer(enc, LabeledSet(x, preds))[1] == 1.0
    assert infer(enc, x)[1] is None


def test_bag_weights():
    w_reg, w_noreg = bag_weights(np.log([[0.9, 0.1]]), np.log([[0.6, 0.4]]))
    assert w_reg[0] == pytest.approx(0.6) and w_noreg[0] == pytest.approx(0.4)
    w_reg, w_noreg = bag_weights(np.zeros((1, 3)), np.zeros((1, 3)))
    assert w_reg[0] == w_noreg[0] == 0.5
    rng = np.random.default_rng(0)
    w_reg, w_noreg = bag_weights(rng.standard_normal((500, 4)) * 5, rng.standard_normal((500, 4)) * 5)
    assert np.max(np.abs(w_reg + w_noreg - 1)) < 1e-12
    assert np.all((w_reg > 0) & (w_reg < 1))


def test_bagging_identical_models(task, source_enc):
    bag = BaggedModel(source_enc, clone_into_target(source_enc))
    np.testing.assert_array_equal(bagged_infer(bag, task[1]), infer(source_enc, task[1])[0])
    with pytest.raises(ConfigError):
        BaggedModel(source_enc, build_encoder(ARCH, 4, 0))


def test_keep_probability_one_matches_no_corruption(task, source_enc):
    source, target = task
    a = run_experiment(small_cfg(z=1.0), ARCH, source, target, target, source_enc)
    b = run_experiment(small_cfg(corrupt=False), ARCH, source, target, target, source_enc)
    assert all(np.array_equal(x, y) for x, y in zip(a.target_encoder.params(), b.target_encoder.params()))
