import math

import numpy as np
import pytest
import torch

from irisinvert.gan import (Discriminator, DiscriminatorConfig, GanDivergence, GanTrainer, TrainSchedule,
                            add_real_noise, discriminator_forward, gan_train_step, train_gan)
from irisinvert.generator import Generator, GeneratorConfig
from irisinvert.losses import ReconstructionLoss, TextureExtractor
from irisinvert.nn import ConfigurationError

GEN = GeneratorConfig(16, (16, 16), (4, 8), (8, 4), (4,))
DISC = DiscriminatorConfig((16, 16), (4, 4, 4, 4))


def small_loss():
    return ReconstructionLoss(TextureExtractor(channels=(4,) * 9, seed=0))


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(lr_generator=0.0),
                                dict(lr_generator=2e-5, lr_discriminator=1e-5), dict(real_noise_sigma=-1.0)])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        TrainSchedule(**kw)


def test_discriminator_config_errors():
    with pytest.raises(ConfigurationError):
        DiscriminatorConfig((16, 16), (4, 4, 4))
    with pytest.raises(ConfigurationError):
        DiscriminatorConfig((24, 16), (4, 4, 4, 4))


def test_discriminator_one_logit_per_image():
    d = Discriminator(DISC)
    out = discriminator_forward(np.random.default_rng(0).random((5, 16, 16)), d)
    assert out.shape == (5,)
    with pytest.raises(ConfigurationError):
        d(torch.zeros(1, 1, 32, 32))


def test_real_noise_clamped_and_seeded():
    x = torch.rand(4, 1, 8, 8)
    a = add_real_noise(x, 1.0, torch.Generator().manual_seed(0))
    b = add_real_noise(x, 1.0, torch.Generator().manual_seed(0))
    assert torch.equal(a, b) and a.min() >= 0 and a.max() <= 1
    assert add_real_noise(x, 0.0) is x
    with pytest.raises(ValueError):
        add_real_noise(x, -0.1)


def trainer(seed=0, **kw):
    torch.manual_seed(seed)
    gen = Generator(GEN, seed=seed)
    disc = Discriminator(DISC, seed=seed + 7)
    return GanTrainer(gen, disc, small_loss(), TrainSchedule(seed=seed, **kw))


def test_step_updates_both_networks():
    tr = trainer()
    g0 = {k: v.clone() for k, v in tr.gen.state_dict().items()}
    d0 = {k: v.clone() for k, v in tr.disc.state_dict().items()}
    rng = np.random.default_rng(0)
    d, g = gan_train_step(rng.random((4, 16, 16)), rng.normal(size=(4, 16)), tr)
    assert math.isfinite(d) and math.isfinite(g)
    assert any(not torch.equal(g0[k], v) for k, v in tr.gen.state_dict().items())
    assert any(not torch.equal(d0[k], v) for k, v in tr.disc.state_dict().items())


def test_step_size_mismatch():
    with pytest.raises(ValueError):
        gan_train_step(np.zeros((3, 16, 16)), np.zeros((2, 16)), trainer())


def test_divergence_snapshot():
    tr = trainer()
    with pytest.raises(GanDivergence) as e:
        gan_train_step(np.full((2, 16, 16), np.nan), np.zeros((2, 16)), tr)
    assert e.value.snapshot["loss"] == "discriminator"
    assert isinstance(e.value, FloatingPointError)


def test_train_gan_callbacks_and_determinism():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(6, 16)).astype(np.float32)
    y = rng.random((6, 16, 16)).astype(np.float32)
    sched = TrainSchedule(epochs=4, steps_per_epoch=3, batch_size=3, checkpoint_every=2, eval_every=2, seed=5)
    ticks = []

    def run():
        gen = Generator(GEN, seed=2)
        return train_gan(t, y, gen, DISC, sched, small_loss(), evaluate=lambda g: {"probe": 1.0},
                         on_checkpoint=lambda e, g, d: ticks.append(e))

    g1, d1, h1 = run()
    assert ticks == [1, 3]
    assert [("probe" in h) for h in h1] == [False, True, False, True]
    assert h1[0]["lr_g"] == 1e-5 and h1[0]["lr_d"] == 1.5e-5
    g2, d2, h2 = run()
    assert h1 == h2
    for a, b in ((g1, g2), (d1, d2)):
        for (k, x), (_, z) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(x, z), k
