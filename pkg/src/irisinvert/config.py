"""Experiment configuration: nested dataclasses loaded from YAML presets.

Image shapes and template sizes are derived from the pipeline choice, so
the network sections only carry widths and switches. ``from_dict`` rejects
unknown keys; ``validate`` builds every module config once so shape
problems surface before any stage runs.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .data.manifest import SplitPolicy
from .data.synthetic import SyntheticIrisSpec
from .extractor import ExtractorConfig, ExtractorSchedule
from .gabor import GaborBank, SampleGrid
from .gan import DiscriminatorConfig, TrainSchedule
from .generator import CoreSchedule, GeneratorConfig
from .losses import LossWeights, SsimConfig
from .nn import ConfigurationError

PIPELINES = ("gabor", "deep-segmented", "deep-normalized")
PRESETS = ("desk", "paper")


@dataclass
class DataConfig:
    synthetic: SyntheticIrisSpec = field(default_factory=SyntheticIrisSpec)
    # external dataset: manifest.csv path; empty means generate synthetic data
    manifest: str = ""


@dataclass
class NormalizeConfig:
    rows: int = 32
    cols: int = 128


@dataclass
class GaborConfig:
    wavelengths: tuple[float, ...] = (8.0, 16.0, 32.0)
    orientations: tuple[float, ...] = (0.0, 1.5707963267948966)
    sigma_scale: float = 0.5
    kernel_size: int = 31
    row_step: int = 4
    col_step: int = 4
    max_shift: int = 0

    def bank(self) -> GaborBank:
        return GaborBank.default(self.wavelengths, self.orientations, self.sigma_scale, self.kernel_size)

    def grid(self) -> SampleGrid:
        return SampleGrid(self.row_step, self.col_step)


@dataclass
class ExtractorSection:
    embedding_dim: int = 64
    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    triplet_margin: float = 0.2
    use_flip_augmentation: bool = True
    schedule: ExtractorSchedule = field(default_factory=ExtractorSchedule)


@dataclass
class GeneratorSection:
    encoder_kernels: tuple[int, ...] = (32, 64, 128, 256, 512)
    decoder_kernels: tuple[int, ...] = (512, 256, 128, 64, 32)
    refine_kernels: tuple[int, ...] = (64, 128, 256)
    spectral_norm: bool = True
    skip_mode: str = "concat"


@dataclass
class DiscriminatorSection:
    ds_kernels: tuple[int, ...] = (128, 128, 128, 128)
    spectral_norm: bool = True


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    perceptual_metric: str = "l1"
    texture_seed: int = 0
    # optional checkpoint with pretrained texture-network weights
    texture_weights: str = ""
    literal_ra: bool = False


@dataclass
class EvalConfig:
    far_target: float = 0.01
    rank1_include_source: bool = False


@dataclass
class ExperimentConfig:
    pipeline: str = "deep-segmented"
    seed: int = 0
    out_dir: str = "runs/desk"
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitPolicy = field(default_factory=SplitPolicy)
    normalize: NormalizeConfig = field(default_factory=NormalizeConfig)
    gabor: GaborConfig = field(default_factory=GaborConfig)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = field(default_factory=DiscriminatorSection)
    losses: LossConfig = field(default_factory=LossConfig)
    core: CoreSchedule = field(default_factory=CoreSchedule)
    gan: TrainSchedule = field(default_factory=TrainSchedule)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # derived shapes

    @property
    def image_shape(self) -> tuple[int, int]:
        """Shape of the images a pipeline consumes and the generator produces."""
        syn = self.data.synthetic
        if self.pipeline == "deep-segmented" or syn.image_mode == "normalized":
            return tuple(syn.shape)
        return (self.normalize.rows, self.normalize.cols)

    def extractor_config(self) -> ExtractorConfig:
        e = self.extractor
        return ExtractorConfig(self.image_shape, e.embedding_dim, tuple(e.channels), e.triplet_margin,
                               e.use_flip_augmentation)

    def template_dim(self) -> int:
        if self.pipeline == "gabor":
            g = self.gabor.grid().shape(*self.image_shape)
            return 2 * len(self.gabor.wavelengths) * len(self.gabor.orientations) * g[0] * g[1]
        return self.extractor_config().template_dim

    def generator_config(self) -> GeneratorConfig:
        g = self.generator
        return GeneratorConfig(self.template_dim(), self.image_shape, tuple(g.encoder_kernels),
                               tuple(g.decoder_kernels), tuple(g.refine_kernels), g.spectral_norm, g.skip_mode)

    def discriminator_config(self) -> DiscriminatorConfig:
        d = self.discriminator
        return DiscriminatorConfig(self.image_shape, tuple(d.ds_kernels), d.spectral_norm)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with the top-level seed pushed into every schedule."""
        out = from_dict(self.to_dict())
        out.seed = seed
        out.extractor.schedule.seed = seed
        out.core.seed = seed
        out.gan.seed = seed
        return out

    def validate(self) -> "ExperimentConfig":
        if self.pipeline not in PIPELINES:
            raise ConfigurationError(f"unknown pipeline {self.pipeline!r}; choose from {', '.join(PIPELINES)}")
        syn = self.data.synthetic
        if self.pipeline == "deep-segmented" and syn.image_mode != "segmented":
            raise ConfigurationError("deep-segmented pipeline needs segmented images")
        if self.losses.perceptual_metric not in ("l1", "l2"):
            raise ConfigurationError(f"unknown perceptual metric {self.losses.perceptual_metric!r}")
        if not 0 < self.eval.far_target < 1:
            raise ConfigurationError("far_target must lie in (0, 1)")
        if self.pipeline == "gabor":
            self.gabor.bank()
            if self.gabor.max_shift < 0:
                raise ConfigurationError("max_shift must be non-negative")
        else:
            self.extractor_config()
        self.generator_config()
        self.discriminator_config()
        h, w = self.image_shape
        win = self.losses.ssim.window_size
        if min(h, w) < win:
            raise ConfigurationError(f"SSIM window {win} larger than image {h}x{w}")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = _coerce(hints[k], v, f"{where}.{k}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{where}: {e}") from e


def _coerce(tp, v, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, v, where)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(v, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if args else None
        return tuple(_coerce(inner, x, where) if inner not in (None, Ellipsis) else x for x in v)
    if tp is float and isinstance(v, int) and not isinstance(v, bool):
        return float(v)
    if tp in (int, float, str, bool) and not isinstance(v, tp):
        raise ConfigurationError(f"{where}: expected {tp.__name__}, got {v!r}")
    return v


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("irisinvert.presets").joinpath(f"{name}.yaml").read_text()
    return yaml.safe_load(text) or {}


def load_config(path=None, preset: str = "desk", overrides: dict | None = None) -> ExperimentConfig:
    """Preset, then the YAML file at ``path`` merged on top, then ``overrides``."""
    data = preset_dict(preset)
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        data = _merge(data, user)
    if overrides:
        data = _merge(data, overrides)
    return from_dict(data).validate()


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
