"""Template-to-image core: U-Net style encoder/decoder with two sigmoid heads.

Data flow for a template ``t``::

    T1 dense        t -> 1 x H x W
    E1..En          stride-2 conv, BN, LeakyReLU
    D1..Dn          stride-2 deconv, BN, ReLU; D1 reads En, Di reads
                    [D(i-1), E(n+1-i)] (concatenated, or summed after a 1x1 projection)
    T2              3x3 conv + sigmoid on Dn              -> t2_image
    R1..Rm          stride-2 conv re-encoding [t2, Dn], then [R(j-1), D(n+1-j)]
    T3              1x1 channel squeeze, dense to H*W, 3x3 conv + sigmoid -> t3_image
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .losses import ReconstructionLoss, combine_core_terms, l1_loss
from .nn import Adam, ConfigurationError, Layer, LayerSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorConfig:
    template_dim: int = 128
    out_shape: tuple[int, int] = (64, 64)
    encoder_kernels: tuple[int, ...] = (32, 64, 128, 256, 512)
    decoder_kernels: tuple[int, ...] = (512, 256, 128, 64, 32)
    refine_kernels: tuple[int, ...] = (64, 128, 256)
    spectral_norm: bool = True
    skip_mode: str = "concat"

    def __post_init__(self):
        if self.template_dim <= 0:
            raise ConfigurationError("template_dim must be positive")
        n = len(self.encoder_kernels)
        if n != len(self.decoder_kernels):
            raise ConfigurationError("encoder and decoder need the same number of layers")
        if len(self.refine_kernels) >= n:
            raise ConfigurationError("refinement stack must be shorter than the decoder")
        h, w = self.out_shape
        if h % 2 ** n or w % 2 ** n:
            raise ConfigurationError(f"out_shape {self.out_shape} not divisible by 2^{n}")
        if self.skip_mode not in ("concat", "add"):
            raise ConfigurationError(f"unknown skip mode {self.skip_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def layer_plan(self) -> dict[str, LayerSpec]:
        """Every layer of the network keyed by name, in execution order."""
        sn = self.spectral_norm
        enc, dec, ref = self.encoder_kernels, self.decoder_kernels, self.refine_kernels
        n, m = len(enc), len(ref)
        h, w = self.out_shape
        plan = {"T1": LayerSpec("dense", self.template_dim, h * w, spectral_norm=sn, name="T1")}
        c = 1
        for i, k in enumerate(enc, 1):
            plan[f"E{i}"] = LayerSpec("conv-stride2", c, k, "leaky-relu", True, sn, name=f"E{i}")
            c = k
        for i, k in enumerate(dec, 1):
            cin = enc[-1] if i == 1 else dec[i - 2]
            if i > 1:
                skip = enc[n - i]
                if self.skip_mode == "concat":
                    cin += skip
                else:
                    plan[f"P{i}"] = LayerSpec("conv-stride1", skip, cin, spectral_norm=sn, kernel=1, name=f"P{i}")
            plan[f"D{i}"] = LayerSpec("deconv-stride2", cin, k, "relu", True, sn, name=f"D{i}")
        plan["T2"] = LayerSpec("conv-stride1", dec[-1], 1, "sigmoid", spectral_norm=sn, name="T2")
        c = 1 + dec[-1]
        for j, k in enumerate(ref, 1):
            plan[f"R{j}"] = LayerSpec("conv-stride2", c, k, "leaky-relu", True, sn, name=f"R{j}")
            c = k + dec[n - 1 - j]
        small = (h // 2 ** m) * (w // 2 ** m)
        plan["T3squeeze"] = LayerSpec("conv-stride1", ref[-1], 1, spectral_norm=sn, kernel=1, name="T3squeeze")
        plan["T3dense"] = LayerSpec("dense", small, h * w, spectral_norm=sn, name="T3dense")
        plan["T3"] = LayerSpec("conv-stride1", 1, 1, "sigmoid", spectral_norm=sn, name="T3")
        return plan


@dataclass
class Reconstruction:
    t2_image: torch.Tensor
    t3_image: torch.Tensor


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, seed: int = 0, device=None):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleDict({k: Layer(s, gen, device) for k, s in cfg.layer_plan().items()})

    def forward(self, template: torch.Tensor) -> Reconstruction:
        cfg, L = self.cfg, self.layers
        if template.dim() == 1:
            template = template[None]
        if template.shape[-1] != cfg.template_dim:
            raise ConfigurationError(f"template length {template.shape[-1]} != template_dim {cfg.template_dim}")
        h, w = cfg.out_shape
        n, m = len(cfg.encoder_kernels), len(cfg.refine_kernels)
        x = L["T1"](template).reshape(-1, 1, h, w)
        enc = []
        for i in range(1, n + 1):
            x = L[f"E{i}"](x)
            enc.append(x)
        dec = []
        for i in range(1, n + 1):
            if i > 1:
                skip = enc[n - i]
                if cfg.skip_mode == "concat":
                    x = torch.cat([x, skip], dim=1)
                else:
                    x = x + L[f"P{i}"](skip)
            x = L[f"D{i}"](x)
            dec.append(x)
        t2 = L["T2"](x)
        r = torch.cat([t2, dec[-1]], dim=1)
        for j in range(1, m + 1):
            r = L[f"R{j}"](r)
            if j < m:
                r = torch.cat([r, dec[n - 1 - j]], dim=1)
        r = L["T3squeeze"](r).flatten(1)
        t3 = L["T3"](L["T3dense"](r).reshape(-1, 1, h, w))
        return Reconstruction(t2, t3)

    def layer_shapes(self) -> dict[str, tuple]:
        return {k: tuple(l.weight.shape) for k, l in self.layers.items()}


def generator_forward(template, gen: Generator) -> Reconstruction:
    return gen(torch.as_tensor(np.asarray(template), dtype=torch.float32))


@torch.no_grad()
def reconstruct(templates, gen: Generator, batch_size: int = 32) -> np.ndarray:
    """T2-head images for a batch of templates, evaluation mode, shape (N, H, W)."""
    was = gen.training
    gen.eval()
    t = torch.as_tensor(np.asarray(templates), dtype=torch.float32)
    if t.dim() == 1:
        t = t[None]
    out = torch.cat([gen(t[i:i + batch_size]).t2_image for i in range(0, len(t), batch_size)])
    gen.train(was)
    return out[:, 0].numpy()


@dataclass
class CoreSchedule:
    epochs: int = 40
    steps_per_epoch: int = 25
    batch_size: int = 8
    lr: float = 2e-4
    phase1_fraction: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0

    @property
    def phase1_epochs(self) -> int:
        return int(round(self.epochs * self.phase1_fraction))


def batch_indices(rng: np.random.Generator, n: int, steps: int, batch_size: int):
    """Yield ``steps`` index batches walking through reshuffled passes of ``range(n)``."""
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order = np.concatenate([order[pos:], rng.permutation(n)])
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def _as_image_batch(images) -> torch.Tensor:
    y = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return y[:, None] if y.dim() == 3 else y


def train_core_standalone(templates, images, cfg: GeneratorConfig, schedule: CoreSchedule,
                          loss: ReconstructionLoss, gen: Generator | None = None,
                          start_epoch: int = 0) -> tuple[Generator, list[dict]]:
    """Two-phase core training: L1 on T2, then the weighted three-term loss over both heads."""
    templates = torch.as_tensor(np.asarray(templates), dtype=torch.float32)
    images = _as_image_batch(images)
    if len(templates) != len(images):
        raise ValueError(f"{len(templates)} templates but {len(images)} images")
    if len(templates) == 0:
        raise ValueError("no training pairs")
    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    if gen is None:
        gen = Generator(cfg, seed=schedule.seed)
    gen.train()
    opt = Adam(gen.named_parameters(), lr=schedule.lr, betas=schedule.betas)
    bs = min(schedule.batch_size, len(templates))
    history = []
    for epoch in range(start_epoch, schedule.epochs):
        phase = 1 if epoch < schedule.phase1_epochs else 2
        acc: dict[str, list] = {}
        for idx in batch_indices(rng, len(templates), schedule.steps_per_epoch, bs):
            y = images[idx]
            rec = gen(templates[idx])
            if phase == 1:
                terms = {"l1": l1_loss(y, rec.t2_image)}
                total = terms["l1"]
            else:
                terms = loss.terms(y, rec.t2_image, rec.t3_image)
                total = combine_core_terms(terms, loss.weights)
            if not torch.isfinite(total):
                raise FloatingPointError(f"non-finite core loss at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            acc.setdefault("loss", []).append(total.item())
            for k, v in terms.items():
                acc.setdefault(k, []).append(v.item())
        rec_ = {"epoch": epoch, "phase": phase, **{k: float(np.mean(v)) for k, v in acc.items()}}
        history.append(rec_)
        log.info("core epoch %d phase %d l1 %.4f loss %.4f", epoch, phase, rec_["l1"], rec_["loss"])
    gen.eval()
    return gen, history
