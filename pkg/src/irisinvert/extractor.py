"""Convolutional embedding network trained with a semi-hard triplet loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn import Adam, ConfigurationError, Layer, LayerSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractorConfig:
    input_shape: tuple[int, int] = (64, 64)
    embedding_dim: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    triplet_margin: float = 0.2
    use_flip_augmentation: bool = True

    def __post_init__(self):
        if self.embedding_dim <= 0:
            raise ConfigurationError("embedding_dim must be positive")
        h, w = self.input_shape
        f = 2 ** len(self.channels)
        if h % f or w % f:
            raise ConfigurationError(f"input shape {self.input_shape} not divisible by {f}")

    @property
    def template_dim(self) -> int:
        return self.embedding_dim * (2 if self.use_flip_augmentation else 1)

    def conv_stack(self) -> list[LayerSpec]:
        specs, c = [], 1
        for i, k in enumerate(self.channels, 1):
            specs.append(LayerSpec("conv-stride2", c, k, "leaky-relu", batch_norm=True, name=f"B{i}"))
            c = k
        return specs


@dataclass
class ExtractorSchedule:
    epochs: int = 40
    min_epochs: int = 10
    steps_per_epoch: int = 20
    classes_per_batch: int = 16
    samples_per_class: int = 4
    lr: float = 1e-3
    holdout_per_class: int = 1
    target_rank1: float = 0.95
    seed: int = 0


class EmbeddingNet(nn.Module):
    def __init__(self, cfg: ExtractorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList(Layer(s, gen) for s in cfg.conv_stack())
        self.head = Layer(LayerSpec("dense", cfg.channels[-1], cfg.embedding_dim, name="embed"), gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[:, None]
        if tuple(x.shape[-2:]) != tuple(self.cfg.input_shape):
            raise ConfigurationError(f"extractor expects {self.cfg.input_shape} images, got {tuple(x.shape[-2:])}")
        for b in self.blocks:
            x = b(x)
        x = x.mean(dim=(2, 3))
        return F.normalize(self.head(x), dim=1)


def _to_batch(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.dim() == 2:
        x = x[None]
    return x[:, None] if x.dim() == 3 else x


@torch.no_grad()
def extract_embedding(images, net: EmbeddingNet, batch_size: int = 64) -> np.ndarray:
    """Unit-norm embeddings in evaluation mode; one row per image."""
    was_training = net.training
    net.eval()
    x = _to_batch(images)
    out = torch.cat([net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    net.train(was_training)
    return out.numpy()


def augmented_template(images, net: EmbeddingNet) -> np.ndarray:
    """[embed(image); embed(hflip(image))], renormalized to unit length."""
    x = _to_batch(images)
    a = extract_embedding(x, net)
    b = extract_embedding(torch.flip(x, dims=[-1]), net)
    t = np.concatenate([a, b], axis=1)
    return t / np.linalg.norm(t, axis=1, keepdims=True)


def make_templates(images, net: EmbeddingNet) -> np.ndarray:
    if net.cfg.use_flip_augmentation:
        return augmented_template(images, net)
    return extract_embedding(images, net)


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance undefined for zero vectors")
    return float(1.0 - a @ b / (na * nb))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine distance undefined for zero vectors")
    return 1.0 - (a @ b.T) / np.outer(na, nb)


def triplet_loss(anchor, positive, negative, margin: float = 0.2) -> torch.Tensor:
    """mean(max(0, |a-p|^2 - |a-n|^2 + margin)) over the leading axis."""
    a, p, n = (torch.as_tensor(v) for v in (anchor, positive, negative))
    d_ap = ((a - p) ** 2).sum(-1)
    d_an = ((a - n) ** 2).sum(-1)
    return F.relu(d_ap - d_an + margin).mean()


def semi_hard_triplet_loss(emb: torch.Tensor, labels: torch.Tensor, margin: float) -> torch.Tensor:
    """Batch-all positives with one mined negative each.

    The negative is the closest one still farther than the positive; when no
    such negative exists the farthest negative is used.
    """
    d = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(-1)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_i, pos_j = torch.nonzero(same & ~eye, as_tuple=True)
    if len(pos_i) == 0:
        raise ValueError("batch has no positive pairs")
    d_ap = d[pos_i, pos_j]
    d_an = d[pos_i]  # (P, B)
    neg = ~same[pos_i]
    big = torch.finfo(d.dtype).max
    harder = neg & (d_an > d_ap[:, None])
    semi = torch.where(harder, d_an, torch.full_like(d_an, big)).min(dim=1).values
    fallback = torch.where(neg, d_an, torch.full_like(d_an, -big)).max(dim=1).values
    chosen = torch.where(harder.any(dim=1), semi, fallback)
    return F.relu(d_ap - chosen + margin).mean()


def rank1_leave_one_out(templates: np.ndarray, labels: np.ndarray) -> float:
    d = cosine_matrix(templates, templates)
    np.fill_diagonal(d, np.inf)
    return float(np.mean(labels[np.argmin(d, axis=1)] == labels))


def _holdout_split(labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    train, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) - k >= 2 and k > 0:
            held.extend(idx[-k:])
            train.extend(idx[:-k])
        else:
            train.extend(idx)
    return np.array(sorted(train)), np.array(sorted(held), dtype=int)


def train_extractor(images: np.ndarray, labels: Sequence[int], cfg: ExtractorConfig,
                    schedule: ExtractorSchedule = ExtractorSchedule()) -> tuple[EmbeddingNet, list[dict]]:
    """Train on P classes x K samples batches; returns the network and per-epoch history.

    The last ``holdout_per_class`` images of each class are kept aside to
    measure rank-1; training stops once it reaches ``target_rank1`` after
    ``min_epochs`` epochs.
    """
    labels = np.asarray(labels)
    images = np.asarray(images, dtype=np.float32)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("extractor training needs at least two classes")
    if counts.min() < 2:
        raise ValueError("every class needs at least two training images")
    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    tr_idx, ho_idx = _holdout_split(labels, schedule.holdout_per_class)
    by_class = {c: tr_idx[labels[tr_idx] == c] for c in classes}
    net = EmbeddingNet(cfg, seed=schedule.seed)
    opt = Adam(net.named_parameters(), lr=schedule.lr)
    x_all = torch.from_numpy(images)
    history = []
    p = min(schedule.classes_per_batch, len(classes))
    for epoch in range(schedule.epochs):
        net.train()
        losses = []
        for _ in range(schedule.steps_per_epoch):
            chosen = rng.choice(classes, size=p, replace=False)
            idx = np.concatenate([rng.choice(by_class[c], size=schedule.samples_per_class,
                                             replace=len(by_class[c]) < schedule.samples_per_class)
                                  for c in chosen])
            emb = net(x_all[idx])
            loss = semi_hard_triplet_loss(emb, torch.from_numpy(labels[idx]), cfg.triplet_margin)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if len(ho_idx):
            ref = np.concatenate([tr_idx, ho_idx])
            t = make_templates(images[ref], net)
            lab = labels[ref]
            d = cosine_matrix(t[len(tr_idx):], t[:len(tr_idx)])
            rec["holdout_rank1"] = float(np.mean(lab[:len(tr_idx)][np.argmin(d, axis=1)] == lab[len(tr_idx):]))
        history.append(rec)
        log.info("extractor epoch %d loss %.4f rank1 %s", epoch, rec["loss"], rec.get("holdout_rank1"))
        if epoch + 1 >= schedule.min_epochs and rec.get("holdout_rank1", 0.0) >= schedule.target_rank1:
            break
    net.eval()
    return net, history
