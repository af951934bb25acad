import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from _support import copy_task, tiny_dataset
from vita.augment import IDENTITY
from vita.autodiff import SGD, Tape, Tensor, backward, cross_entropy, finite_diff_param_gradient, kl_divergence
from vita.autodiff import log_softmax, relative_error
from vita.networks import Classifier, PatchDiscriminator, UNetTranslator, checkpoint_load
from vita.training import (
    DivergenceError,
    GanPairs,
    MilestoneScheduler,
    PlateauScheduler,
    TrainConfig,
    compose_robust_batch,
    consistency_loss,
    fraction_plan,
    gan_discriminator_loss,
    gan_generator_loss,
    harvest_gan_pairs,
    harvest_spec,
    make_scheduler,
    robust_train,
    train_erm,
    train_translator,
)
from vita.vicinal import ADVERSARIAL, AUGMENTATION


class ConstantD:
    """Discriminator stub: fixed probabilities, chosen by candidate identity."""

    def __init__(self, real, fake=None):
        self.real, self.fake = real, real if fake is None else fake
        self.real_input = None

    def __call__(self, x, candidate):
        p = self.real if candidate is self.real_input else self.fake
        return Tensor(np.broadcast_to(p, (len(x), 1, 2, 2)).astype(np.float64))


class LogitD:
    def __init__(self, z_real, z_fake, real_input):
        self.z_real, self.z_fake, self.real_input = z_real, z_fake, real_input

    def logits(self, x, candidate):
        z = self.z_real if candidate is self.real_input else self.z_fake
        return Tensor(np.full((len(x), 1, 2, 2), z))


class IdentityTranslator:
    def check_input(self, x):
        pass

    def __call__(self, x):
        return x


def images(n=8, s=8, seed=0):
    return np.random.default_rng(seed).random((n, 3, s, s)).astype(np.float32)


def small_cfg(**kw):
    base = dict(harvest_steps=2, epochs=1, batch_size=8, gan_batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config

def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.fractions == (0.25, 0.25, 0.5) and cfg.beta == 1.0 and cfg.lam == 1.0
    assert (cfg.lr, cfg.momentum, cfg.adv_lr, cfg.adv_milestone) == (0.1, 0.9, 0.01, 60)
    assert cfg.eps_train == cfg.eps_test == 0.031
    assert TrainConfig(**{"lambda": 0.5}).lam == 0.5
    for bad in ({"fractions": (0.5, 0.5, 0.5)}, {"beta": -1}, {"batch_size": 7}, {"lam": 0},
                {"fractions": (0.3, 0.3, 0.4)}, {"optimizer": "adam"}, {"attack_methods": ("ead",)}):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)


def test_fraction_plans():
    assert fraction_plan((0.25, 0.25, 0.5)) == (0.5, True, True) or fraction_plan((0.25, 0.25, 0.5)).gen
    plan = fraction_plan((0.25, 0.25, 0.5))
    assert (plan.aug_share, plan.direct, plan.gen) == (0.5, True, True)
    assert fraction_plan((0.5, 0.5, 0)).gen is False
    assert fraction_plan((0, 0, 1)).direct is False
    assert fraction_plan((0.5, 0, 0.5)).aug_share == 1.0
    assert fraction_plan((1, 0, 0)).aug_share == 1.0


def test_harvest_spec_keeps_total_step_length():
    spec = harvest_spec("pgd_linf", TrainConfig(harvest_steps=10))
    assert spec.nb_iter == 10 and spec.nb_iter * spec.eps_iter == pytest.approx(40 * 0.001)
    assert harvest_spec("pgd_linf", TrainConfig()).nb_iter == 40
    adv = harvest_spec("fgsm", TrainConfig(mode="adversarial"))
    assert adv.method == "pgd_linf" and adv.eps == 0.031


# ---------------------------------------------------------------- GAN objective

def test_discriminator_loss_at_half_is_two_ln2():
    x = images(2)
    assert float(gan_discriminator_loss(ConstantD(0.5), x, x, x).data) == pytest.approx(2 * math.log(2), abs=1e-6)


def test_discriminator_loss_at_optimum_vanishes():
    x, real, fake = images(2), images(2, seed=1), images(2, seed=2)
    loss = float(gan_discriminator_loss(LogitD(30.0, -30.0, real), x, real, fake).data)
    assert 0 <= loss < 1e-10


def test_discriminator_loss_scalar_oracle():
    rng = np.random.default_rng(0)
    x, real, fake = images(3), images(3, seed=1), images(3, seed=2)
    pr, pf = rng.uniform(0.05, 0.95, (3, 1, 2, 2)), rng.uniform(0.05, 0.95, (3, 1, 2, 2))
    d = ConstantD(pr, pf)
    d.real_input = real
    expected = -(np.mean([math.log(v) for v in pr.ravel()]) + np.mean([math.log(1 - v) for v in pf.ravel()]))
    assert float(gan_discriminator_loss(d, x, real, fake).data) == pytest.approx(expected, abs=1e-6)


def test_generator_loss_examples():
    x = images(2)
    assert float(gan_generator_loss(ConstantD(1.0), x, x).data) == pytest.approx(0.0, abs=1e-9)
    assert float(gan_generator_loss(ConstantD(0.5), x, x).data) == pytest.approx(math.log(2), abs=1e-6)


def test_generator_loss_gradient_matches_finite_differences():
    t = UNetTranslator(3, depth=2, base_channels=4, seed=0)
    d = PatchDiscriminator(3, hidden=8, seed=1)
    x, raw = images(2, seed=3), images(2, seed=4)

    def loss():
        return gan_generator_loss(d, x, t(Tensor(raw)))

    with Tape() as tape:
        out = loss()
    backward(out, tape)
    rng = np.random.default_rng(0)
    checked = 0
    for p in t.parameters():
        coords = rng.choice(p.data.size, min(10, p.data.size), replace=False)
        fd = finite_diff_param_gradient(loss, p, h=1e-3, coords=coords).ravel()[coords]
        if np.abs(fd).max() < 1e-7:
            # biases feeding a normalization have no effect on the loss
            assert np.abs(p.grad).max() < 1e-6
            continue
        assert relative_error(p.grad.ravel()[coords], fd) < 1e-2
        checked += 1
    assert checked >= len(t.parameters()) // 2


# ---------------------------------------------------------------- translator training

def test_zero_epochs_leaves_translator_untouched():
    t, d = UNetTranslator(3, base_channels=4), PatchDiscriminator(3, 8)
    before = {k: v.copy() for k, v in t.named_tensors().items()}
    x = images(8)
    trace = train_translator(t, d, GanPairs(x, x, np.full(8, AUGMENTATION, object)), TrainConfig(), epochs=0)
    assert trace.d_loss == trace.g_loss == [] and trace.steps == 0
    assert all(before[k].tobytes() == v.tobytes() for k, v in t.named_tensors().items())


def test_copy_task_trace_and_discriminator_band():
    t, d, x, trace = copy_task()
    assert trace.steps == 200
    assert len(trace.d_loss) == len(trace.g_loss) == len(trace.d_fake) > 0
    assert 0.2 < trace.d_fake[-1] < 0.8


def test_translator_checkpoints_and_divergence(tmp_path):
    x = images(8)
    pairs = GanPairs(x, x.copy(), np.full(8, AUGMENTATION, object))
    t, d = UNetTranslator(3, base_channels=4), PatchDiscriminator(3, 8)
    trace = train_translator(t, d, pairs, small_cfg(), epochs=2, out_dir=tmp_path)
    assert len(trace.g_loss) == 2
    assert checkpoint_load(tmp_path / "translator_epoch002.ckpt").step == 2
    assert (tmp_path / "translator_trace.json").exists()
    t.parameters()[0].data[...] = np.nan
    with pytest.raises(DivergenceError) as err:
        train_translator(t, d, pairs, small_cfg(), epochs=1)
    assert err.value.step == 0


def test_harvested_pairs_are_balanced():
    data = tiny_dataset(n_train=16, n_test=4, size=16).train
    pairs = harvest_gan_pairs(data, Classifier(3, 2, width=2), small_cfg())
    assert (pairs.source == AUGMENTATION).sum() == (pairs.source == ADVERSARIAL).sum() == 8
    for j in range(0, 16, 8):
        assert set(pairs.source[j:j + 8]) == {AUGMENTATION, ADVERSARIAL}
    norms = np.sqrt(((pairs.x_v - pairs.x)[pairs.source == AUGMENTATION] ** 2).reshape(8, -1).sum(1))
    assert norms.max() <= 0.5 + 1e-5


# ---------------------------------------------------------------- batch composition

@pytest.fixture(scope="module")
def small_models():
    return UNetTranslator(3, depth=3, base_channels=4, seed=0), Classifier(3, 3, width=2, seed=0).eval()


def test_batch_census_over_many_batches(small_models):
    t, model = small_models
    cfg = small_cfg(harvest_steps=1, attack_methods=("fgsm", "pgd_linf", "mim"))
    rng = np.random.default_rng(0)
    for b in range(100):
        x, y = images(8, seed=b), rng.integers(0, 3, 8)
        batch = compose_robust_batch(x, y, t, model, cfg, (0, b))
        assert batch.census() == {"aug": 4, "adv": 4, "gen_aug": 4, "gen_adv": 4}
        assert list(batch.tags[:4]) == ["aug"] * 4 and list(batch.tags[8:12]) == ["gen_aug"] * 4
        np.testing.assert_array_equal(batch.y_all, np.concatenate([y, y]))
        assert batch.x_all.shape == (16, 3, 8, 8)
        assert batch.x_all.min() >= 0 and batch.x_all.max() <= 1


def test_identity_translator_and_shuffle_reproduce_direct_rows(small_models):
    _, model = small_models
    x, y = images(8, seed=5), np.arange(8) % 3
    batch = compose_robust_batch(x, y, IdentityTranslator(), model, small_cfg(), 7,
                                 perms=(np.arange(4), np.arange(4)))
    np.testing.assert_array_equal(batch.x_all[8:], batch.x_all[:8])


def test_compose_rejects_odd_batches(small_models):
    t, model = small_models
    with pytest.raises(ValueError, match="even"):
        compose_robust_batch(images(7), np.zeros(7, int), t, model, small_cfg(), 0)


def test_compose_is_seed_deterministic(small_models):
    t, model = small_models
    x, y = images(8, seed=2), np.arange(8) % 3
    a = compose_robust_batch(x, y, t, model, small_cfg(), (1, 2))
    b = compose_robust_batch(x, y, t, model, small_cfg(), (1, 2))
    assert a.x_all.tobytes() == b.x_all.tobytes()


# ---------------------------------------------------------------- consistency objective

def test_consistency_examples():
    model = Classifier(3, 3, width=2, seed=1).eval()
    x, y = images(6, seed=1), np.arange(6) % 3
    ce = float(cross_entropy(model(Tensor(x)), y).data)
    assert float(consistency_loss(model, x, y, TrainConfig(beta=0)).loss.data) == pytest.approx(ce, abs=1e-6)
    same = consistency_loss(model, x, y, TrainConfig(beta=2.0), x_reg=x)
    assert same.kl == pytest.approx(0.0, abs=1e-7)
    x_reg = images(6, seed=9)
    parts = consistency_loss(model, x, y, TrainConfig(beta=0.7), x_reg=x_reg)
    lp = lambda v: log_softmax(model(Tensor(v)), axis=1)  # noqa: E731
    expected = ce + 0.7 * float(kl_divergence(lp(x), lp(x_reg)).data)
    assert float(parts.loss.data) == pytest.approx(expected, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.sampled_from(["kl", "js"]))
def test_consistency_term_is_nonnegative(seed, kind):
    model = Classifier(3, 3, width=2, seed=seed % 5).eval()
    x = images(4, seed=seed)
    parts = consistency_loss(model, x, np.arange(4) % 3, TrainConfig(consistency=kind), seed)
    assert parts.kl >= -1e-7


def test_adversarial_mode_regularizer_runs():
    model = Classifier(3, 3, width=2, seed=1).eval()
    parts = consistency_loss(model, images(4), np.arange(4) % 3, TrainConfig(mode="adversarial", harvest_steps=2), 0)
    assert math.isfinite(parts.ce) and parts.kl >= -1e-7


# ---------------------------------------------------------------- schedules

def test_plateau_scheduler_halves_after_patience():
    s = PlateauScheduler(0.1, 0.5, 5, 1e-3)
    lrs = [s.step(1.0) for _ in range(7)]
    assert lrs[:6] == [0.1] * 6 and lrs[6] == 0.05
    assert s.step(0.5) == 0.05


def test_plateau_threshold_is_relative():
    s = PlateauScheduler(0.1, 0.5, 0, 1e-3)
    s.step(1.0)
    assert s.step(0.9995) == 0.05  # less than a 0.1% improvement
    assert s.step(0.5) == 0.05


def test_milestone_scheduler_divides_at_sixty():
    s = make_scheduler(TrainConfig(mode="adversarial"))
    assert isinstance(s, MilestoneScheduler)
    lrs = [s.step() for _ in range(61)]
    assert lrs[58] == 0.01 and lrs[59] == pytest.approx(0.001)


# ---------------------------------------------------------------- training loops

def test_snapshot_is_not_aliased():
    model = Classifier(3, 2, width=2)
    snap = model.clone()
    model.parameters()[0].data += 1.0
    snap.parameters()[1].data -= 1.0
    assert not np.array_equal(model.parameters()[0].data, snap.parameters()[0].data)
    assert not np.array_equal(model.parameters()[1].data, snap.parameters()[1].data)
    for a, b in zip(model.named_tensors().values(), snap.named_tensors().values()):
        assert not np.shares_memory(a, b)


def _direct_erm(data, cfg, seed_model):
    model = Classifier(3, data.n_classes, width=4, seed=seed_model).train()
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    losses = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch])).permutation(len(data))
        losses = []
        for i in range(0, len(data) - cfg.batch_size + 1, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = cross_entropy(model(Tensor(data.images[idx])), data.labels[idx])
            backward(loss, tape)
            opt.step()
            losses.append(float(loss.data))
    return float(np.mean(losses))


def test_degenerate_robust_training_is_erm():
    data = tiny_dataset(n_train=64, n_test=4, size=16).train
    cfg = TrainConfig(beta=0, fractions=(1, 0, 0), augment_kinds=(IDENTITY,), epochs=3, batch_size=16, lr=0.05)
    result = robust_train(Classifier(3, 2, width=4, seed=0), data, None, cfg)
    reference = _direct_erm(data, cfg, 0)
    assert result.history[-1]["train_loss"] == pytest.approx(reference, rel=0.05)
    erm = train_erm(Classifier(3, 2, width=4, seed=0), data, cfg)
    assert erm.history[-1]["train_loss"] == pytest.approx(reference, rel=0.05)


def test_robust_training_replays_and_logs(small_models, tmp_path):
    t, _ = small_models
    data = tiny_dataset(n_train=16, n_test=4, size=16).train
    cfg = small_cfg(attack_methods=("fgsm", "bim_linf"))
    a = robust_train(Classifier(3, 2, width=2, seed=0), data, t, cfg, out_dir=tmp_path)
    b = robust_train(Classifier(3, 2, width=2, seed=0), data, t, cfg)
    assert a.history[0]["train_loss"] == pytest.approx(b.history[0]["train_loss"], abs=1e-6)
    with open(tmp_path / "classifier_metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "lr", "train_loss", "ce_term", "kl_term", "clean_val_error", "seed"]
    assert float(rows[0]["train_loss"]) == a.history[0]["train_loss"]
    assert checkpoint_load(tmp_path / "classifier_epoch001.ckpt", "classifier").step == 2


def test_non_finite_loss_aborts_with_dump(tmp_path):
    data = tiny_dataset(n_train=16, n_test=4, size=16).train
    model = Classifier(3, 2, width=2)
    model.parameters()[-2].data[...] = np.nan
    with pytest.raises(DivergenceError) as err:
        train_erm(model, data, small_cfg(), out_dir=tmp_path)
    assert err.value.step == 0 and err.value.dump.endswith(".ckpt")
    assert checkpoint_load(err.value.dump).kind == "classifier"
