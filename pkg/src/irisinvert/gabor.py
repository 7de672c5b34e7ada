"""Iriscode pipeline: rubber-sheet normalization, Gabor phase coding, Hamming matching."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class EyeGeometry:
    pupil_x: float
    pupil_y: float
    pupil_radius: float
    iris_x: float
    iris_y: float
    iris_radius: float

    def validate(self, image_shape: tuple | None = None):
        if not 0 < self.pupil_radius < self.iris_radius:
            raise GeometryError(f"need 0 < pupil radius < iris radius, got {self.pupil_radius}, {self.iris_radius}")
        gap = math.hypot(self.pupil_x - self.iris_x, self.pupil_y - self.iris_y)
        if gap + self.pupil_radius > self.iris_radius:
            raise GeometryError("pupil circle is not contained in the iris circle")
        if image_shape is not None:
            h, w = image_shape[:2]
            for cx, cy, r in ((self.pupil_x, self.pupil_y, self.pupil_radius),
                              (self.iris_x, self.iris_y, self.iris_radius)):
                if cx - r < 0 or cy - r < 0 or cx + r > w - 1 or cy + r > h - 1:
                    raise GeometryError(f"circle ({cx}, {cy}, r={r}) exceeds image bounds {h}x{w}")


def rubber_sheet_normalize(image: np.ndarray, geom: EyeGeometry, rows: int = 64, cols: int = 512) -> np.ndarray:
    """Daugman rubber-sheet remap of the iris annulus to a ``rows x cols`` raster.

    Column ``c`` samples the ray at angle ``2*pi*c/cols``; row ``r`` sits at
    fraction ``r/(rows-1)`` from the pupil boundary to the iris boundary.
    Pixel ``(i, j)`` of ``image`` has its centre at ``x=j, y=i``.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("expected a 2D grayscale image")
    if rows < 2 or cols < 1:
        raise ValueError("need rows >= 2 and cols >= 1")
    geom.validate(image.shape)
    theta = 2 * np.pi * np.arange(cols) / cols
    frac = np.arange(rows)[:, None] / (rows - 1)
    cos, sin = np.cos(theta)[None, :], np.sin(theta)[None, :]
    px = geom.pupil_x + geom.pupil_radius * cos
    py = geom.pupil_y + geom.pupil_radius * sin
    ix = geom.iris_x + geom.iris_radius * cos
    iy = geom.iris_y + geom.iris_radius * sin
    x = (1 - frac) * px + frac * ix
    y = (1 - frac) * py + frac * iy
    out = map_coordinates(image, [y.ravel(), x.ravel()], order=1, mode="nearest")
    return np.clip(out.reshape(rows, cols), 0.0, 1.0)


@dataclass(frozen=True)
class GaborFilter:
    wavelength: float
    orientation: float
    sigma_x: float
    sigma_y: float
    size: int

    def kernels(self) -> tuple[np.ndarray, np.ndarray]:
        """Even (cosine) and odd (sine) kernels, both DC-free."""
        if self.size % 2 == 0:
            raise ValueError("Gabor kernel size must be odd")
        half = self.size // 2
        yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        xr = xx * c + yy * s
        yr = -xx * s + yy * c
        env = np.exp(-0.5 * (xr ** 2 / self.sigma_x ** 2 + yr ** 2 / self.sigma_y ** 2))
        phase = 2 * np.pi * xr / self.wavelength
        even = env * np.cos(phase)
        even -= env * (even.sum() / env.sum())
        odd = env * np.sin(phase)
        odd -= odd.mean()
        norm = np.abs(even).sum() + np.abs(odd).sum()
        return even / norm, odd / norm


@dataclass(frozen=True)
class GaborBank:
    filters: tuple[GaborFilter, ...]

    @classmethod
    def default(cls, wavelengths: Sequence[float] = (8, 16, 32), orientations: Sequence[float] = (0.0, math.pi / 2),
                sigma_scale: float = 0.5, size: int = 31) -> "GaborBank":
        return cls(tuple(GaborFilter(float(lam), float(th), sigma_scale * lam, sigma_scale * lam, size)
                         for lam in wavelengths for th in orientations))

    def __len__(self):
        return len(self.filters)

    def to_dict(self) -> dict:
        return {"filters": [asdict(f) for f in self.filters]}

    @classmethod
    def from_dict(cls, d: dict) -> "GaborBank":
        return cls(tuple(GaborFilter(**f) for f in d["filters"]))


@dataclass(frozen=True)
class SampleGrid:
    row_step: int = 4
    col_step: int = 4
    row_offset: int | None = None
    col_offset: int | None = None

    def positions(self, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
        r0 = self.row_step // 2 if self.row_offset is None else self.row_offset
        c0 = self.col_step // 2 if self.col_offset is None else self.col_offset
        return np.arange(r0, rows, self.row_step), np.arange(c0, cols, self.col_step)

    def shape(self, rows: int, cols: int) -> tuple[int, int]:
        r, c = self.positions(rows, cols)
        return len(r), len(c)


@dataclass
class BinaryTemplate:
    """Phase-quadrant bits laid out as ``(filter, part, grid_row, grid_col)``.

    ``part`` 0 is the real (even) response, 1 the imaginary (odd) response.
    """

    bits: np.ndarray
    grid_shape: tuple[int, int, int]  # (filters, grid rows, grid cols)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8).ravel()
        f, gr, gc = self.grid_shape
        if self.bits.size != 2 * f * gr * gc:
            raise ValueError(f"template has {self.bits.size} bits, layout needs {2 * f * gr * gc}")

    def __len__(self):
        return self.bits.size

    def as_grid(self) -> np.ndarray:
        f, gr, gc = self.grid_shape
        return self.bits.reshape(f, 2, gr, gc)

    def shifted(self, k: int) -> "BinaryTemplate":
        return BinaryTemplate(np.roll(self.as_grid(), k, axis=-1), self.grid_shape)


def gabor_responses(norm: np.ndarray, bank: GaborBank, grid: SampleGrid = SampleGrid()) -> np.ndarray:
    """Complex filter responses at grid points, shape ``(filters, grid rows, grid cols)``.

    The raster is padded by reflection along the radial axis and cyclically
    along the angular axis.
    """
    if len(bank) == 0:
        raise ValueError("empty filter bank")
    norm = np.asarray(norm, dtype=np.float64)
    rows, cols = norm.shape
    rpos, cpos = grid.positions(rows, cols)
    if len(rpos) == 0 or len(cpos) == 0:
        raise ValueError("empty sample grid")
    # zero-mean kernels ignore a constant offset; removing it makes flat rasters respond with exact zeros
    centred = norm - norm.mean()
    out = np.empty((len(bank), len(rpos), len(cpos)), dtype=np.complex128)
    for i, f in enumerate(bank.filters):
        even, odd = f.kernels()
        half = f.size // 2
        padded = np.pad(centred, ((half, half), (0, 0)), mode="symmetric")
        padded = np.pad(padded, ((0, 0), (half, half)), mode="wrap")
        win = np.lib.stride_tricks.sliding_window_view(padded, (f.size, f.size))
        patches = win[rpos][:, cpos]
        re = np.einsum("abij,ij->ab", patches, even)
        im = np.einsum("abij,ij->ab", patches, odd)
        out[i] = re + 1j * im
    return out


def gabor_encode(norm: np.ndarray, bank: GaborBank, grid: SampleGrid = SampleGrid()) -> BinaryTemplate:
    """Two bits per filter and grid point: real >= 0, imaginary >= 0."""
    resp = gabor_responses(norm, bank, grid)
    bits = np.stack([resp.real >= 0, resp.imag >= 0], axis=1).astype(np.uint8)
    return BinaryTemplate(bits, resp.shape)


def _bits(t) -> np.ndarray:
    return t.bits if isinstance(t, BinaryTemplate) else np.asarray(t, dtype=np.uint8).ravel()


def hamming_distance(a, b) -> float:
    """Fraction of differing bits (no occlusion masks)."""
    x, y = _bits(a), _bits(b)
    if x.size != y.size:
        raise ValueError(f"template length mismatch: {x.size} vs {y.size}")
    if x.size == 0:
        raise ValueError("empty templates")
    return float(np.count_nonzero(x != y)) / x.size


def match_rotation_tolerant(a: BinaryTemplate, b: BinaryTemplate, max_shift: int = 0) -> float:
    """Minimum Hamming distance over cyclic angular shifts of ``b`` in [-max_shift, max_shift]."""
    if a.grid_shape != b.grid_shape:
        raise ValueError(f"grid layouts differ: {a.grid_shape} vs {b.grid_shape}")
    return min(hamming_distance(a, b.shifted(k)) for k in range(-max_shift, max_shift + 1))


def hamming_matrix(a: np.ndarray, b: np.ndarray, grid_shape: tuple | None = None, max_shift: int = 0) -> np.ndarray:
    """Pairwise (rotation-tolerant) Hamming distances between rows of two bit matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("template length mismatch")
    n = a.shape[1]
    best = None
    for k in range(-max_shift, max_shift + 1):
        bk = b
        if k:
            if grid_shape is None:
                raise ValueError("rotation-tolerant matching needs the grid layout")
            f, gr, gc = grid_shape
            bk = np.roll(b.reshape(len(b), f, 2, gr, gc), k, axis=-1).reshape(len(b), n)
        d = (a @ (1 - bk).T + (1 - a) @ bk.T) / n
        best = d if best is None else np.minimum(best, d)
    return best
