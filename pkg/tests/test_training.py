import copy

import numpy as np
import pytest
import torch

from srdiag import losses, models, training
from srdiag.config import AdamConfig, DiscriminatorConfig, GanStageConfig, GeneratorConfig, LossWeights, PixelStageConfig
from srdiag.models import build_discriminator, build_generator

G_CFG = GeneratorConfig(blocks=1, features=8, growth=4)
D_CFG = DiscriminatorConfig(input_size=64, features=(4, 4, 8, 8, 8, 8), fc_units=8)


def pixel_cfg(**kw):
    base = dict(crop=32, batch_size=2, iterations=4, optimizer=AdamConfig(lr=1e-3), checkpoint_every=0, seed=3)
    base.update(kw)
    return PixelStageConfig(**base)


def gan_cfg(**kw):
    base = dict(crop=64, batch_size=2, epochs=2, feature_width=0.0625, checkpoint_every=0, seed=4)
    base.update(kw)
    return GanStageConfig(**base)


@pytest.fixture(scope="module")
def images():
    rng = np.random.default_rng(0)
    return [rng.random((72, 72, 3)) for _ in range(4)]


@pytest.fixture(scope="module")
def fx():
    return losses.load_feature_extractor("random:0", 0.0625)


def weights_of(model):
    return {k: v.clone() for k, v in models.state_tensors(model).items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_zero_iterations_leave_weights(images):
    gen = build_generator(G_CFG, 1)
    before = weights_of(gen)
    gen, hist = training.train_pixel_stage(gen, images, pixel_cfg(iterations=0))
    assert same(before, weights_of(gen))
    assert hist == {"iteration": [], "loss": []}


def test_pixel_loss_decreases():
    rng = np.random.default_rng(0)
    flat = [np.full((32, 32, 3), v) for v in rng.uniform(0.2, 0.8, 4)]
    gen, hist = training.train_pixel_stage(build_generator(G_CFG, 0), flat, pixel_cfg(iterations=60, log_every=20))
    assert hist["iteration"] == [20, 40, 60]
    assert hist["loss"][-1] < hist["loss"][0]


def test_history_length(images):
    _, hist = training.train_pixel_stage(build_generator(G_CFG, 0), images, pixel_cfg(iterations=6, log_every=2))
    assert hist["iteration"] == [2, 4, 6] and len(hist["loss"]) == 3


def test_pixel_stage_deterministic(images):
    a, _ = training.train_pixel_stage(build_generator(G_CFG, 2), images, pixel_cfg())
    b, _ = training.train_pixel_stage(build_generator(G_CFG, 2), images, pixel_cfg())
    assert training.params_digest(a) == training.params_digest(b)


def test_pixel_resume_matches_uninterrupted(tmp_path, images):
    cfg = pixel_cfg(iterations=4)
    full = training.run_pixel_stage(training.init_pixel_state(build_generator(G_CFG, 5), cfg), images, cfg)
    part = training.run_pixel_stage(training.init_pixel_state(build_generator(G_CFG, 5), cfg), images, cfg, until=2)
    training.save_checkpoint(tmp_path / "c.srt", part)
    resumed = training.load_checkpoint(tmp_path / "c.srt", G_CFG, stage_cfg=cfg)
    assert resumed.step == 2
    resumed = training.run_pixel_stage(resumed, images, cfg)
    assert same(weights_of(full.generator), weights_of(resumed.generator))
    assert full.history == resumed.history


def test_resume_may_extend_schedule(tmp_path, images):
    state = training.run_pixel_stage(training.init_pixel_state(build_generator(G_CFG, 5), pixel_cfg()), images,
                                     pixel_cfg())
    training.save_checkpoint(tmp_path / "c.srt", state)
    longer = pixel_cfg(iterations=6)
    resumed = training.run_pixel_stage(training.load_checkpoint(tmp_path / "c.srt", G_CFG, stage_cfg=longer),
                                       images, longer)
    assert resumed.step == 6


def test_checkpoint_save_load_save_identical(tmp_path, images):
    cfg = pixel_cfg(iterations=2)
    state = training.run_pixel_stage(training.init_pixel_state(build_generator(G_CFG, 1), cfg), images, cfg)
    training.save_checkpoint(tmp_path / "a.srt", state)
    training.save_checkpoint(tmp_path / "b.srt", training.load_checkpoint(tmp_path / "a.srt"))
    assert (tmp_path / "a.srt").read_bytes() == (tmp_path / "b.srt").read_bytes()


def test_checkpoint_config_mismatch(tmp_path, images):
    cfg = pixel_cfg(iterations=1)
    state = training.run_pixel_stage(training.init_pixel_state(build_generator(G_CFG, 1), cfg), images, cfg)
    training.save_checkpoint(tmp_path / "c.srt", state)
    with pytest.raises(ValueError, match="generator.features"):
        training.load_checkpoint(tmp_path / "c.srt", GeneratorConfig(blocks=1, features=16, growth=4))
    with pytest.raises(ValueError, match="pixel_stage.batch_size"):
        training.load_checkpoint(tmp_path / "c.srt", G_CFG, stage_cfg=pixel_cfg(batch_size=3))


def test_small_images_skipped(images, caplog):
    tiny = [np.zeros((16, 16, 3))]
    training.train_pixel_stage(build_generator(G_CFG, 0), images + tiny, pixel_cfg(iterations=1))
    assert "skipping 1 image" in caplog.text
    with pytest.raises(ValueError):
        training.train_pixel_stage(build_generator(G_CFG, 0), tiny, pixel_cfg(iterations=1))


def test_gan_stage_history_and_copy(images, fx):
    g_pix = build_generator(G_CFG, 0)
    before = weights_of(g_pix)
    g_feat, hist = training.train_gan_stage(g_pix, build_discriminator(D_CFG, 0), images, gan_cfg(), fx)
    assert same(before, weights_of(g_pix))
    assert not same(before, weights_of(g_feat))
    assert hist["epoch"] == [1, 2]
    assert all(len(hist[k]) == 2 for k in ("d_loss", "perceptual", "adversarial", "pixel_term", "total"))


def test_gan_needs_extractor(images):
    with pytest.raises(ValueError, match="feature extractor"):
        training.train_gan_stage(build_generator(G_CFG, 0), build_discriminator(D_CFG, 0), images, gan_cfg(), None)


def test_gan_crop_must_match_discriminator(images, fx):
    with pytest.raises(ValueError, match="does not match"):
        training.train_gan_stage(build_generator(G_CFG, 0), build_discriminator(D_CFG, 0), images,
                                 gan_cfg(crop=128), fx)


def test_feature_extractor_stays_frozen(images, fx):
    digest = training.params_digest(fx)
    training.train_gan_stage(build_generator(G_CFG, 0), build_discriminator(D_CFG, 0), images, gan_cfg(epochs=1), fx)
    assert training.params_digest(fx) == digest


def _gan_state(cfg):
    return training.init_gan_state(build_generator(G_CFG, 0), build_discriminator(D_CFG, 0), cfg)


def test_updates_are_isolated(images, fx):
    cfg = gan_cfg()
    lr, hr = next(training.gan_epoch_batches(images, cfg, np.random.default_rng(0), 4))

    # discriminator update alone leaves the generator untouched
    state = _gan_state(cfg)
    g0, d0 = training.params_digest(state.generator), training.params_digest(state.discriminator)
    state.g_opt.step = lambda *a, **k: None
    training.gan_step(state, fx, cfg.weights, lr, hr)
    assert training.params_digest(state.generator) == g0
    assert training.params_digest(state.discriminator) != d0

    # generator update alone leaves discriminator parameters untouched
    state = _gan_state(cfg)
    g0, d0 = training.params_digest(state.generator), training.params_digest(state.discriminator)
    state.d_opt.step = lambda *a, **k: None
    training.gan_step(state, fx, cfg.weights, lr, hr)
    assert training.params_digest(state.discriminator) == d0
    assert training.params_digest(state.generator) != g0


def test_generator_gradient_without_adversarial_term(images, fx):
    """With zero adversarial weight and unit pixel weight the update direction is perceptual + L1."""
    cfg = gan_cfg(weights=LossWeights(adversarial=0.0, pixel=1.0))
    lr, hr = next(training.gan_epoch_batches(images, cfg, np.random.default_rng(0), 4))
    gen = build_generator(G_CFG, 0)
    x_lr, x_hr = models.images_to_tensor(lr), models.images_to_tensor(hr)

    ref = copy.deepcopy(gen)
    sr = ref(x_lr)
    (losses.perceptual_loss(fx, x_hr, sr) + losses.pixel_loss(x_hr, sr)).backward()
    expected = [p.grad.clone() for p in ref.parameters()]

    disc = build_discriminator(D_CFG, 0)
    sr = gen(x_lr)
    total, _ = losses.total_generator_loss(fx, cfg.weights, x_hr, sr, disc(x_hr).detach(), disc(sr))
    total.backward()
    for p, e in zip(gen.parameters(), expected):
        assert torch.allclose(p.grad, e, rtol=1e-5, atol=1e-7)


def test_gan_resume_matches_uninterrupted(tmp_path, images, fx):
    cfg = gan_cfg(epochs=2)
    full = training.run_gan_stage(_gan_state(cfg), images, cfg, fx)
    part = training.run_gan_stage(_gan_state(cfg), images, cfg, fx, until=1)
    training.save_checkpoint(tmp_path / "g.srt", part)
    resumed = training.load_checkpoint(tmp_path / "g.srt", G_CFG, D_CFG, cfg)
    resumed = training.run_gan_stage(resumed, images, cfg, fx)
    assert same(weights_of(full.generator), weights_of(resumed.generator))
    assert same(weights_of(full.discriminator), weights_of(resumed.discriminator))
    assert full.history == resumed.history


def test_history_csv(tmp_path):
    training.write_history_csv(tmp_path / "h.csv", {"iteration": [1, 2], "loss": [0.5, 0.25]})
    assert (tmp_path / "h.csv").read_text().splitlines() == ["iteration,loss", "1,0.5", "2,0.25"]
