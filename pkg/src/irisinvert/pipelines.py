"""Per-pipeline glue: which image a pipeline sees, and how it turns images into templates.

``gabor`` and ``deep-normalized`` work on rubber-sheet rectangles (or on the
raw image when the dataset is already normalized); ``deep-segmented`` works
on the square frame. Reconstructions live in the same image space, so
re-extraction is just ``templates(recon)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data.manifest import Record, load_image
from .data.store import TemplateStore
from .evaluation import Metric
from .extractor import EmbeddingNet, make_templates
from .gabor import GaborBank, SampleGrid, gabor_encode, rubber_sheet_normalize


def pipeline_image(img: np.ndarray, rec: Record, pipeline: str, norm_shape: tuple[int, int]) -> np.ndarray:
    if pipeline == "deep-segmented" or rec.mode == "normalized":
        return np.asarray(img, dtype=np.float64)
    if rec.geometry is None:
        raise ValueError(f"{rec.path}: segmented image without geometry cannot be normalized")
    return rubber_sheet_normalize(img, rec.geometry, *norm_shape)


def load_pipeline_images(records: Sequence[Record], root, pipeline: str,
                         norm_shape: tuple[int, int]) -> np.ndarray:
    """Stack of pipeline-space images, float32 in [0, 1]."""
    root = Path(root)
    out = [pipeline_image(load_image(root / r.path), r, pipeline, norm_shape) for r in records]
    return np.stack(out).astype(np.float32) if out else np.zeros((0, *norm_shape), np.float32)


@dataclass
class GaborTemplater:
    bank: GaborBank
    grid: SampleGrid
    max_shift: int = 0
    pipeline: str = "gabor"

    def grid_shape(self, image_shape) -> tuple[int, int, int]:
        return (len(self.bank), *self.grid.shape(*image_shape))

    def templates(self, images) -> np.ndarray:
        images = np.asarray(images)
        return np.stack([gabor_encode(im, self.bank, self.grid).bits for im in images])

    def metric(self, image_shape) -> Metric:
        return Metric("hamming", self.grid_shape(image_shape), self.max_shift)

    def store(self, templates, keys, image_shape) -> TemplateStore:
        return TemplateStore(templates, keys, "bit", "hamming", False, self.pipeline, self.grid_shape(image_shape))


@dataclass
class DeepTemplater:
    net: EmbeddingNet
    pipeline: str = "deep-segmented"

    def templates(self, images) -> np.ndarray:
        return make_templates(np.asarray(images, dtype=np.float32), self.net)

    def metric(self, image_shape=None) -> Metric:
        return Metric("cosine")

    def store(self, templates, keys, image_shape=None) -> TemplateStore:
        return TemplateStore(templates, keys, "f32", "cosine", True, self.pipeline)
