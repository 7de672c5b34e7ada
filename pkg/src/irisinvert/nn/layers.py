"""Layer contracts shared by the generator, discriminator and extractor."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .spectral import SpectralState, converge, spectral_normalize

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9  # running = 0.9 * running + 0.1 * batch
BN_EPS = 1e-5
INIT_STD = 0.02

KINDS = ("dense", "conv-stride2", "deconv-stride2", "conv-stride1")
ACTIVATIONS = ("leaky-relu", "relu", "sigmoid", "none")


class ConfigurationError(ValueError):
    """Raised when shapes or settings of a network do not line up."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    activation: str = "none"
    batch_norm: bool = False
    spectral_norm: bool = False
    kernel: Optional[int] = None
    name: str = "layer"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"{self.name}: unknown activation {self.activation!r}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ConfigurationError(f"{self.name}: channel counts must be positive")

    @property
    def kernel_size(self) -> int:
        if self.kernel is not None:
            return self.kernel
        return 3 if self.kind == "conv-stride1" else 4

    def weight_shape(self) -> tuple:
        k = self.kernel_size
        if self.kind == "dense":
            return (self.out_channels, self.in_channels)
        if self.kind == "deconv-stride2":
            # torch layout for transposed convolution: (in, out, kh, kw)
            return (self.in_channels, self.out_channels, k, k)
        return (self.out_channels, self.in_channels, k, k)

    def output_spatial(self, h: int, w: int) -> tuple:
        if self.kind == "conv-stride2":
            if h % 2 or w % 2:
                raise ConfigurationError(f"{self.name}: conv-stride2 needs even spatial dims, got {h}x{w}")
            return h // 2, w // 2
        if self.kind == "deconv-stride2":
            return h * 2, w * 2
        return h, w

    def to_dict(self) -> dict:
        return asdict(self)


def _padding(spec: LayerSpec) -> int:
    k = spec.kernel_size
    if spec.kind == "conv-stride1":
        if k % 2 == 0:
            raise ConfigurationError(f"{spec.name}: stride-1 kernels must be odd")
        return k // 2
    # 4x4 stride-2 with padding 1 halves / doubles exactly
    return (k - 2) // 2


def _activate(x: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "leaky-relu":
        return F.leaky_relu(x, LEAKY_SLOPE)
    if activation == "relu":
        return F.relu(x)
    if activation == "sigmoid":
        return torch.sigmoid(x)
    return x


def _check_input(x: torch.Tensor, spec: LayerSpec, weights: torch.Tensor):
    if tuple(weights.shape) != spec.weight_shape():
        raise ConfigurationError(
            f"{spec.name}: weight shape {tuple(weights.shape)} != expected {spec.weight_shape()}")
    if spec.kind == "dense":
        if x.dim() != 2 or x.shape[1] != spec.in_channels:
            raise ConfigurationError(
                f"{spec.name}: dense layer expects (N, {spec.in_channels}), got {tuple(x.shape)}")
        return
    if x.dim() != 4 or x.shape[1] != spec.in_channels:
        raise ConfigurationError(
            f"{spec.name}: expects (N, {spec.in_channels}, H, W), got {tuple(x.shape)}")
    spec.output_spatial(x.shape[2], x.shape[3])


def layer_forward(x: torch.Tensor, spec: LayerSpec, weights: torch.Tensor,
                  bias: Optional[torch.Tensor] = None, bn: Optional[nn.Module] = None) -> torch.Tensor:
    """Linear map, then optional batch norm, then activation."""
    _check_input(x, spec, weights)
    if spec.kind == "dense":
        y = F.linear(x, weights, bias)
    elif spec.kind == "deconv-stride2":
        y = F.conv_transpose2d(x, weights, bias, stride=2, padding=_padding(spec))
    elif spec.kind == "conv-stride2":
        y = F.conv2d(x, weights, bias, stride=2, padding=_padding(spec))
    else:
        y = F.conv2d(x, weights, bias, stride=1, padding=_padding(spec))
    if bn is not None:
        y = bn(y)
    return _activate(y, spec.activation)


class Layer(nn.Module):
    """Parameter holder for one :class:`LayerSpec`.

    Spectral normalization runs before every forward pass; the singular
    vector estimate only advances in training mode so evaluation is a pure
    function of the stored state.
    """

    def __init__(self, spec: LayerSpec, generator: torch.Generator | None = None,
                 device: torch.device | str | None = None):
        super().__init__()
        self.spec = spec
        weight = torch.empty(spec.weight_shape(), device=device)
        if weight.device.type != "meta":
            nn.init.trunc_normal_(weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(spec.out_channels, device=device))
        self.bn = None
        if spec.batch_norm:
            cls = nn.BatchNorm1d if spec.kind == "dense" else nn.BatchNorm2d
            self.bn = cls(spec.out_channels, eps=BN_EPS, momentum=1.0 - BN_MOMENTUM, device=device)
        if spec.spectral_norm:
            if weight.device.type == "meta":
                u = torch.empty(weight.shape[0], device=device)
            else:
                state = SpectralState.for_weight(self.weight.detach(), generator=generator)
                # warm start so the one-step-per-forward estimate is already converged
                converge(self.weight.detach(), state)
                u = state.u
            self.register_buffer("sn_u", u)

    @property
    def spectral_state(self) -> SpectralState | None:
        if not self.spec.spectral_norm:
            return None
        return SpectralState(u=self.sn_u)

    def effective_weight(self) -> torch.Tensor:
        if not self.spec.spectral_norm:
            return self.weight
        return spectral_normalize(self.weight, self.spectral_state, update=self.training)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_forward(x, self.spec, self.effective_weight(), self.bias, self.bn)

    def extra_repr(self) -> str:
        s = self.spec
        return (f"{s.name}: {s.kind} {s.in_channels}->{s.out_channels} act={s.activation} "
                f"bn={s.batch_norm} sn={s.spectral_norm}")
