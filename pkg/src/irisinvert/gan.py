"""Adversarial fine-tuning of a pretrained core against a relativistic average discriminator."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .generator import Generator, batch_indices, _as_image_batch
from .losses import ReconstructionLoss, combine_core_terms, d_loss_ra, g_loss_ra
from .nn import Adam, ConfigurationError, Layer, LayerSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_shape: tuple[int, int] = (64, 64)
    ds_kernels: tuple[int, ...] = (128, 128, 128, 128)
    spectral_norm: bool = True

    def __post_init__(self):
        if len(self.ds_kernels) != 4:
            raise ConfigurationError("the discriminator has exactly four strided stages")
        h, w = self.input_shape
        if h % 16 or w % 16:
            raise ConfigurationError(f"input shape {self.input_shape} not divisible by 16")

    def to_dict(self) -> dict:
        return asdict(self)

    def layer_plan(self) -> dict[str, LayerSpec]:
        plan, c = {}, 1
        for i, k in enumerate(self.ds_kernels, 1):
            plan[f"DS{i}"] = LayerSpec("conv-stride2", c, k, "leaky-relu", False, self.spectral_norm, name=f"DS{i}")
            c = k
        h, w = self.input_shape
        flat = c * (h // 16) * (w // 16)
        plan["T4"] = LayerSpec("dense", flat, 1, spectral_norm=self.spectral_norm, name="T4")
        return plan


class Discriminator(nn.Module):
    """Four strided convolutions then a dense layer producing one raw logit per image."""

    def __init__(self, cfg: DiscriminatorConfig, seed: int = 0, device=None):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleDict({k: Layer(s, gen, device) for k, s in cfg.layer_plan().items()})

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = image[:, None] if image.dim() == 3 else image
        if tuple(x.shape[-2:]) != tuple(self.cfg.input_shape):
            raise ConfigurationError(f"discriminator expects {self.cfg.input_shape}, got {tuple(x.shape[-2:])}")
        for i in range(1, 5):
            x = self.layers[f"DS{i}"](x)
        return self.layers["T4"](x.flatten(1))[:, 0]


def discriminator_forward(images, disc: Discriminator) -> torch.Tensor:
    return disc(torch.as_tensor(np.asarray(images), dtype=torch.float32))


@dataclass
class TrainSchedule:
    epochs: int = 60
    steps_per_epoch: int = 50
    batch_size: int = 8
    lr_generator: float = 1e-5
    lr_discriminator: float = 1.5e-5
    real_noise_sigma: float = 0.05
    betas: tuple[float, float] = (0.5, 0.999)
    checkpoint_every: int = 10
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "steps_per_epoch", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_discriminator < self.lr_generator:
            raise ValueError("two-timescale rule: discriminator learning rate must be >= generator rate")
        if self.real_noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")


PAPER_SCHEDULE = dict(epochs=400, steps_per_epoch=200, batch_size=12, lr_generator=1e-5, lr_discriminator=1.5e-5)


def add_real_noise(batch: torch.Tensor, sigma: float, rng: torch.Generator | None = None) -> torch.Tensor:
    """Per-pixel N(0, sigma^2) noise, clamped back to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return batch
    noise = torch.randn(batch.shape, generator=rng, dtype=batch.dtype)
    return (batch + sigma * noise).clamp(0.0, 1.0)


class GanDivergence(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class GanTrainer:
    gen: Generator
    disc: Discriminator
    loss: ReconstructionLoss
    schedule: TrainSchedule
    literal_ra: bool = False

    def __post_init__(self):
        s = self.schedule
        self.opt_g = Adam(self.gen.named_parameters(), lr=s.lr_generator, betas=s.betas)
        self.opt_d = Adam(self.disc.named_parameters(), lr=s.lr_discriminator, betas=s.betas)
        self.noise_rng = torch.Generator().manual_seed(s.seed + 1)

    def step(self, real: torch.Tensor, templates: torch.Tensor) -> tuple[float, float]:
        """One discriminator update followed by one generator update."""
        if len(real) != len(templates):
            raise ValueError("real and template batches differ in size")
        self.gen.train()
        self.disc.train()
        rec = self.gen(templates)
        fake = rec.t2_image
        real_noisy = add_real_noise(real, self.schedule.real_noise_sigma, self.noise_rng)

        d_loss = d_loss_ra(self.disc(real_noisy), self.disc(fake.detach()), self.literal_ra)
        self._check(d_loss, "discriminator", real, fake)
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        c_real, c_fake = self.disc(real_noisy), self.disc(fake)
        terms = self.loss.terms(real, fake, rec.t3_image)
        g_loss = g_loss_ra(c_real, c_fake, self.literal_ra) + combine_core_terms(terms, self.loss.weights)
        self._check(g_loss, "generator", real, fake)
        self.opt_g.zero_grad()
        g_loss.backward()
        self.opt_g.step()
        self.opt_d.zero_grad()
        return d_loss.item(), g_loss.item()

    def _check(self, value: torch.Tensor, which: str, real, fake):
        if torch.isfinite(value):
            return
        snap = {
            "loss": which,
            "real_mean": float(real.mean()),
            "fake_mean": float(fake.detach().mean()),
            "fake_finite": bool(torch.isfinite(fake).all()),
        }
        raise GanDivergence(f"non-finite {which} loss", snap)


def gan_train_step(real_batch, template_batch, trainer: GanTrainer) -> tuple[float, float]:
    return trainer.step(_as_image_batch(real_batch), torch.as_tensor(np.asarray(template_batch), dtype=torch.float32))


def train_gan(templates, images, gen: Generator, disc_cfg: DiscriminatorConfig, schedule: TrainSchedule,
              loss: ReconstructionLoss, literal_ra: bool = False,
              evaluate: Optional[Callable[[Generator], dict]] = None,
              on_checkpoint: Optional[Callable[[int, Generator, Discriminator], None]] = None):
    """Run the adversarial schedule from a pretrained core.

    Returns ``(generator, discriminator, history)``. ``evaluate`` is called
    every ``eval_every`` epochs and its metrics are merged into that
    epoch's record; ``on_checkpoint`` every ``checkpoint_every`` epochs.
    """
    templates = torch.as_tensor(np.asarray(templates), dtype=torch.float32)
    images = _as_image_batch(images)
    if len(templates) != len(images):
        raise ValueError(f"{len(templates)} templates but {len(images)} images")
    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    disc = Discriminator(disc_cfg, seed=schedule.seed + 7)
    trainer = GanTrainer(gen, disc, loss, schedule, literal_ra)
    bs = min(schedule.batch_size, len(templates))
    history = []
    for epoch in range(schedule.epochs):
        dl, gl = [], []
        for idx in batch_indices(rng, len(templates), schedule.steps_per_epoch, bs):
            d, g = trainer.step(images[idx], templates[idx])
            dl.append(d)
            gl.append(g)
        rec = {"epoch": epoch, "d_loss": float(np.mean(dl)), "g_loss": float(np.mean(gl)),
               "lr_g": schedule.lr_generator, "lr_d": schedule.lr_discriminator}
        if evaluate is not None and schedule.eval_every and (epoch + 1) % schedule.eval_every == 0:
            rec.update(evaluate(gen))
        if on_checkpoint is not None and schedule.checkpoint_every and (epoch + 1) % schedule.checkpoint_every == 0:
            on_checkpoint(epoch, gen, disc)
        history.append(rec)
        log.info("gan epoch %d d %.4f g %.4f", epoch, rec["d_loss"], rec["g_loss"])
    gen.eval()
    disc.eval()
    return gen, disc, history
