"""Procedural iris textures with per-class identity and per-sample nuisance.

A class is a polar texture ``T(rho, theta)`` (rho 0 at the pupil, 1 at the
limbus) built from periodic value noise, oriented sinusoidal furrows and
radial streaks. Samples of a class re-render that texture with a small
rotation, gain/offset change, smooth elastic warp, pupil dilation and
pixel noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from ..gabor import EyeGeometry
from .manifest import DatasetManifest, Record, save_image

TEX_ROWS = 48
TEX_COLS = 512


@dataclass(frozen=True)
class SyntheticIrisSpec:
    n_classes: int = 20
    samples_per_class: int = 12
    image_mode: str = "segmented"
    shape: tuple[int, int] = (64, 64)
    class_seed_base: int = 1000
    rotation_deg: float = 4.0
    brightness: float = 0.08
    noise_sigma: float = 0.02
    elastic_jitter: float = 1.0
    pupil_dilation: float = 0.05

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.samples_per_class < 2:
            raise ValueError("need at least two samples per class")
        if self.image_mode not in ("segmented", "normalized"):
            raise ValueError(f"unknown image mode {self.image_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def eye_of(class_id: int) -> str:
    return "L" if class_id % 2 == 0 else "R"


def _periodic_noise(rng: np.random.Generator, n_r: int, n_a: int) -> np.ndarray:
    """Bilinear value noise on the texture grid, periodic along the angle."""
    grid = rng.uniform(-1.0, 1.0, size=(n_r, n_a))
    rr = np.linspace(0, n_r - 1, TEX_ROWS)[:, None]
    aa = (np.arange(TEX_COLS) * n_a / TEX_COLS)[None, :]
    r0 = np.floor(rr).astype(int).clip(0, n_r - 2)
    a0 = np.floor(aa).astype(int)
    fr, fa = rr - r0, aa - a0
    a1 = (a0 + 1) % n_a
    # smoothstep easing keeps the interpolant C1
    fr = fr * fr * (3 - 2 * fr)
    fa = fa * fa * (3 - 2 * fa)
    v00, v01 = grid[r0, a0 % n_a], grid[r0, a1]
    v10, v11 = grid[r0 + 1, a0 % n_a], grid[r0 + 1, a1]
    return (v00 * (1 - fa) + v01 * fa) * (1 - fr) + (v10 * (1 - fa) + v11 * fa) * fr


def class_texture(class_seed: int) -> np.ndarray:
    rng = np.random.default_rng(class_seed)
    rho = np.linspace(0, 1, TEX_ROWS)[:, None]
    theta = 2 * np.pi * np.arange(TEX_COLS)[None, :] / TEX_COLS
    tex = np.zeros((TEX_ROWS, TEX_COLS))
    for o, (n_r, n_a) in enumerate(((3, 8), (5, 16), (9, 32), (13, 64))):
        tex += 0.8 ** o * _periodic_noise(rng, n_r, n_a)
    for _ in range(rng.integers(3, 7)):
        k_a = rng.integers(4, 33)
        k_r = rng.uniform(-3, 3)
        amp = rng.uniform(0.2, 0.6)
        tex += amp * np.cos(k_a * theta + 2 * np.pi * k_r * rho + rng.uniform(0, 2 * np.pi))
    for _ in range(rng.integers(8, 20)):
        centre = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.015, 0.05)
        start, length = rng.uniform(0, 0.6), rng.uniform(0.3, 1.0)
        dth = np.angle(np.exp(1j * (theta - centre)))
        radial = ((rho >= start) & (rho <= start + length)).astype(float)
        tex += rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.0) * np.exp(-0.5 * (dth / width) ** 2) * radial
    tex = (tex - tex.mean()) / tex.std()
    base = rng.uniform(0.4, 0.6)
    contrast = rng.uniform(0.13, 0.18)
    return base + contrast * tex


def _sample_texture(tex: np.ndarray, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    r = np.clip(rho, 0.0, 1.0) * (TEX_ROWS - 1)
    a = np.mod(theta, 2 * np.pi) / (2 * np.pi) * TEX_COLS
    # pad one column so angular interpolation wraps
    padded = np.concatenate([tex, tex[:, :1]], axis=1)
    return map_coordinates(padded, [r.ravel(), a.ravel()], order=1, mode="nearest").reshape(rho.shape)


def _warp(rng: np.random.Generator, amp: float) -> tuple[np.ndarray, np.ndarray]:
    d_r = _periodic_noise(rng, 4, 8) * amp / TEX_ROWS
    d_a = _periodic_noise(rng, 4, 8) * amp * 2 * np.pi / TEX_COLS
    return d_r, d_a


def render_sample(spec: SyntheticIrisSpec, class_id: int, sample_id: int,
                  texture: np.ndarray | None = None) -> tuple[np.ndarray, EyeGeometry | None]:
    """Render one image quantized to 8 bits (returned as floats in [0, 1])."""
    if texture is None:
        texture = class_texture(spec.class_seed_base + class_id)
    rng = np.random.default_rng([spec.class_seed_base, class_id, sample_id])
    rot = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    gain = 1 + rng.uniform(-spec.brightness, spec.brightness)
    offset = rng.uniform(-spec.brightness, spec.brightness) / 2
    dil = 1 + rng.uniform(-spec.pupil_dilation, spec.pupil_dilation)
    d_r, d_a = _warp(rng, spec.elastic_jitter)
    h, w = spec.shape
    geom = None
    if spec.image_mode == "segmented":
        cx, cy = (w - 1) / 2, (h - 1) / 2
        ri = 0.45 * min(h, w)
        rp = 0.4 * ri * dil
        geom = EyeGeometry(cx, cy, rp, cx, cy, ri)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        r = np.hypot(xx - cx, yy - cy)
        theta = np.arctan2(yy - cy, xx - cx)
        rho = (r - rp) / (ri - rp)
        # paint one pixel past both circles so boundary samples never mix with the zero background
        rim = 1.0 / (ri - rp)
        inside = (rho >= -rim) & (rho <= 1 + rim)
    else:
        rho = np.repeat(np.linspace(0, 1, h)[:, None], w, axis=1)
        theta = np.repeat((2 * np.pi * np.arange(w) / w)[None, :], h, axis=0)
        inside = np.ones((h, w), dtype=bool)
    rho_w = rho + _sample_texture(d_r, rho, theta)
    theta_w = theta - rot + _sample_texture(d_a, rho, theta)
    img = _sample_texture(texture, rho_w, theta_w) * gain + offset
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.02, 1.0)
    img = np.where(inside, img, 0.0)
    return np.round(img * 255) / 255, geom


def generate_synthetic_dataset(spec: SyntheticIrisSpec, out_dir) -> DatasetManifest:
    """Write ``n_classes * samples_per_class`` PNGs plus ``manifest.csv`` under ``out_dir``.

    Even class ids are left eyes and odd ones right eyes of subject ``class_id // 2``.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    records = []
    for c in range(spec.n_classes):
        tex = class_texture(spec.class_seed_base + c)
        eye = eye_of(c)
        for s in range(spec.samples_per_class):
            img, geom = render_sample(spec, c, s, tex)
            rel = f"images/{c:04d}_{eye}_{s:03d}.png"
            save_image(img, out / rel)
            records.append(Record(rel, c, eye, s, spec.image_mode, geom))
    manifest = DatasetManifest(out, records)
    manifest.save()
    return manifest
