"""Training objectives: pixel, structural, perceptual and (relativistic) GAN losses.

Images are ``(N, 1, H, W)`` tensors in [0, 1]; 2D ``(H, W)`` inputs are
promoted. GAN losses over logits are evaluated through ``softplus`` so they
stay finite and keep their gradient when the discriminator saturates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0  # perceptual
    beta: float = 1.0  # L1
    gamma: float = 1.0  # SSIM

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window_size <= 0 or self.window_size % 2 == 0:
            raise ValueError("SSIM window size must be a positive odd integer")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be strictly positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def _same_shape(y: torch.Tensor, y_hat: torch.Tensor):
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_hat.shape)}")


def l1_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel error over batch, height and width."""
    _same_shape(y, y_hat)
    return (y - y_hat).abs().mean()


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    ax = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(y: torch.Tensor, y_hat: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    """Mean SSIM over all fully-contained Gaussian windows."""
    _same_shape(y, y_hat)
    y, y_hat = _as_batch(y), _as_batch(y_hat)
    n, c, h, w = y.shape
    if h < cfg.window_size or w < cfg.window_size:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {cfg.window_size}")
    win = gaussian_window(cfg.window_size, cfg.window_sigma, y.dtype).to(y.device)
    win = win.expand(c, 1, -1, -1)

    def filt(t):
        return F.conv2d(t, win, groups=c)

    mu_x, mu_y = filt(y), filt(y_hat)
    sxx = filt(y * y) - mu_x ** 2
    syy = filt(y_hat * y_hat) - mu_y ** 2
    sxy = filt(y * y_hat) - mu_x * mu_y
    c1, c2 = cfg.c1, cfg.c2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (num / den).mean()


def ssim_loss(y: torch.Tensor, y_hat: torch.Tensor, cfg: SsimConfig = SsimConfig()) -> torch.Tensor:
    return 1 - ssim(y, y_hat, cfg)


TEXTURE_CHANNELS = (16, 16, 32, 32, 64, 64, 64, 128, 128)
TEXTURE_POOL_AFTER = (2, 4, 7)


class TextureExtractor(nn.Module):
    """Fixed stack of 3x3 stride-1 convolutions with ReLU, VGG style.

    2x2 max pooling follows the layers listed in ``pool_after`` (1-based),
    like the block boundaries of VGG16. Activations are read after layer
    ``tap_index``. Weights never receive gradients.
    """

    def __init__(self, channels: Sequence[int] = TEXTURE_CHANNELS, tap_index: int = 9,
                 pool_after: Sequence[int] = TEXTURE_POOL_AFTER, seed: int = 0, in_channels: int = 1):
        super().__init__()
        if not 1 <= tap_index <= len(channels):
            raise ValueError(f"tap_index {tap_index} outside 1..{len(channels)}")
        self.channels = tuple(channels)
        self.tap_index = tap_index
        self.pool_after = tuple(pool_after)
        self.weights_source = "seeded-random"
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        c = in_channels
        for k in self.channels:
            conv = nn.Conv2d(c, k, 3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, math.sqrt(2.0 / (c * 9)), generator=gen)
                conv.bias.zero_()
            self.convs.append(conv)
            c = k
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = _as_batch(x)
        for i, conv in enumerate(self.convs[: self.tap_index], start=1):
            x = F.relu(conv(x))
            if i in self.pool_after and i < self.tap_index:
                if x.shape[-1] < 2 or x.shape[-2] < 2:
                    raise ValueError(f"input too small for pooling after layer {i}")
                x = F.max_pool2d(x, 2)
        return x

    def state_tensors(self) -> dict:
        return {k: v.detach().cpu() for k, v in self.state_dict().items()}

    def load_tensors(self, tensors: dict):
        self.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
        self.weights_source = "file"


def perceptual_loss(y: torch.Tensor, y_hat: torch.Tensor, phi: TextureExtractor,
                    metric: str = "l1") -> torch.Tensor:
    """Distance between tap activations, normalized by C*H*W (and batch).

    ``metric='l1'`` is the mean absolute difference; ``'l2'`` the mean squared one.
    """
    _same_shape(y, y_hat)
    fy, fh = phi(y), phi(y_hat)
    diff = fy - fh
    if metric == "l1":
        return diff.abs().mean()
    if metric == "l2":
        return (diff ** 2).mean()
    raise ValueError(f"unknown perceptual metric {metric!r}")


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def d_loss_standard(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return -torch.log(_clamp(d_real)).mean() - torch.log(1 - _clamp(d_fake)).mean()


def g_loss_standard(d_fake: torch.Tensor) -> torch.Tensor:
    return -torch.log(_clamp(d_fake)).mean()


def _check_logits(c_real: torch.Tensor, c_fake: torch.Tensor):
    if c_real.numel() == 0 or c_fake.numel() == 0:
        raise ValueError("logit batches must be non-empty")


def relativistic_logits(c_real: torch.Tensor, c_fake: torch.Tensor):
    """Return ``(D_ra(real), D_ra(fake))`` as probabilities."""
    _check_logits(c_real, c_fake)
    return torch.sigmoid(c_real - c_fake.mean()), torch.sigmoid(c_fake - c_real.mean())


def d_loss_ra(c_real: torch.Tensor, c_fake: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """Relativistic average discriminator loss on raw logits.

    ``literal`` swaps the fake term for the non-relativistic ``D(fake)``.
    """
    _check_logits(c_real, c_fake)
    # -log(sigmoid(z)) == softplus(-z); -log(1 - sigmoid(z)) == softplus(z)
    real_term = F.softplus(-(c_real - c_fake.mean())).mean()
    fake_z = c_fake if literal else c_fake - c_real.mean()
    return real_term + F.softplus(fake_z).mean()


def g_loss_ra(c_real: torch.Tensor, c_fake: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """Generator counterpart of :func:`d_loss_ra` (real and fake roles swapped)."""
    _check_logits(c_real, c_fake)
    fake_term = F.softplus(-(c_fake - c_real.mean())).mean()
    real_z = c_real if literal else c_real - c_fake.mean()
    return fake_term + F.softplus(real_z).mean()


@dataclass
class ReconstructionLoss:
    """Bundle of the settings the reconstruction objective needs."""

    phi: TextureExtractor
    weights: LossWeights = field(default_factory=LossWeights)
    ssim_cfg: SsimConfig = field(default_factory=SsimConfig)
    perceptual_metric: str = "l1"

    def terms(self, y, y_hat_t2, y_hat_t3) -> dict:
        return {
            "perceptual": perceptual_loss(y, y_hat_t2, self.phi, self.perceptual_metric),
            "l1": l1_loss(y, y_hat_t2),
            "ssim": ssim_loss(y, y_hat_t3, self.ssim_cfg),
        }


def combine_core_terms(terms: dict, w: LossWeights) -> torch.Tensor:
    return w.alpha * terms["perceptual"] + w.beta * terms["l1"] + w.gamma * terms["ssim"]


def core_total_loss(y, y_hat_t2, y_hat_t3, phi: TextureExtractor, w: LossWeights = LossWeights(),
                    ssim_cfg: SsimConfig = SsimConfig(), perceptual_metric: str = "l1") -> torch.Tensor:
    """alpha * perceptual(T2) + beta * L1(T2) + gamma * (1 - SSIM(T3))."""
    terms = ReconstructionLoss(phi, w, ssim_cfg, perceptual_metric).terms(y, y_hat_t2, y_hat_t3)
    return combine_core_terms(terms, w)


def generator_total_loss(c_real, c_fake, y, y_hat_t2, y_hat_t3, phi: TextureExtractor,
                         w: LossWeights = LossWeights(), ssim_cfg: SsimConfig = SsimConfig(),
                         perceptual_metric: str = "l1", literal: bool = False) -> torch.Tensor:
    return (g_loss_ra(c_real, c_fake, literal)
            + core_total_loss(y, y_hat_t2, y_hat_t3, phi, w, ssim_cfg, perceptual_metric))
