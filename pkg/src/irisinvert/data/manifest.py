"""Dataset manifests, image files and the class-disjoint split protocol."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from ..gabor import EyeGeometry

FIELDS = ["path", "class_id", "eye", "sample_id", "mode", "pupil_x", "pupil_y", "pupil_radius",
          "iris_x", "iris_y", "iris_radius", "split"]


@dataclass(frozen=True)
class Record:
    path: str
    class_id: int
    eye: str
    sample_id: int
    mode: str = "segmented"
    geometry: EyeGeometry | None = None
    split: str = ""

    @property
    def key(self) -> tuple[int, str, int]:
        return (self.class_id, self.eye, self.sample_id)


@dataclass
class DatasetManifest:
    root: Path
    records: list[Record] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def save(self, path: Path | None = None) -> Path:
        path = Path(path) if path else self.root / "manifest.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                g = r.geometry
                row = {"path": r.path, "class_id": r.class_id, "eye": r.eye, "sample_id": r.sample_id,
                       "mode": r.mode, "split": r.split}
                if g is not None:
                    row.update({k: repr(float(getattr(g, k))) for k in FIELDS[5:11]})
                w.writerow(row)
        return path

    @classmethod
    def load(cls, path, root: Path | None = None, check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        root = Path(root) if root else path.parent
        records = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                geom = None
                if row.get("pupil_radius"):
                    geom = EyeGeometry(*(float(row[k]) for k in FIELDS[5:11]))
                eye = row["eye"].upper()
                if eye not in ("L", "R"):
                    raise ValueError(f"{path}: eye must be L or R, got {row['eye']!r}")
                rec = Record(row["path"], int(row["class_id"]), eye, int(row["sample_id"]),
                             row.get("mode") or "segmented", geom, row.get("split") or "")
                if check_paths and not (root / rec.path).exists():
                    raise FileNotFoundError(f"manifest entry {rec.path} missing under {root}")
                records.append(rec)
        return cls(root, records)


def save_image(img: np.ndarray, path) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


@dataclass
class SplitPolicy:
    name: str = "paper"
    extractor_per_class: int = 6
    test_fraction: float = 0.2


@dataclass
class Split:
    extractor: list[Record]
    inversion: list[Record]
    test: list[Record]

    def tagged(self) -> list[Record]:
        out = []
        for tag in ("extractor", "inversion", "test"):
            out.extend(replace(r, split=tag) for r in getattr(self, tag))
        return out


def _by_class(records: Iterable[Record]) -> dict:
    groups: dict = {}
    for r in records:
        groups.setdefault((r.class_id, r.eye), []).append(r)
    for k in groups:
        groups[k].sort(key=lambda r: r.sample_id)
    return dict(sorted(groups.items()))


def split_train_test(manifest: DatasetManifest, policy: SplitPolicy = SplitPolicy()) -> Split:
    """Left-eye classes feed extractor and inversion training, right-eye classes the test set.

    The first ``extractor_per_class`` left images of a class train the
    extractor, the remaining left images train the inversion network, and
    the first ``test_fraction`` of each right class forms the test set.
    """
    if policy.name != "paper":
        raise ValueError(f"unknown split policy {policy.name!r}")
    ext, inv, test = [], [], []
    for (cid, eye), recs in _by_class(manifest.records).items():
        if eye == "L":
            if len(recs) <= policy.extractor_per_class:
                raise ValueError(f"class {cid}/L has {len(recs)} images; policy needs more than "
                                 f"{policy.extractor_per_class}")
            ext.extend(recs[:policy.extractor_per_class])
            inv.extend(recs[policy.extractor_per_class:])
        else:
            n = int(round(policy.test_fraction * len(recs)))
            if n < 1:
                raise ValueError(f"class {cid}/R has too few images for a {policy.test_fraction:.0%} test share")
            test.extend(recs[:n])
    if not ext or not test:
        raise ValueError("split needs both left-eye and right-eye classes")
    return Split(ext, inv, test)


def load_split(path, root) -> Split:
    m = DatasetManifest.load(path, root)
    groups = {"extractor": [], "inversion": [], "test": []}
    for r in m.records:
        if r.split in groups:
            groups[r.split].append(r)
    return Split(**groups)
