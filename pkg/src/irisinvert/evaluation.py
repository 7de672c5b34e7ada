"""Attack-success metrics: Type-1 / Type-2 acceptance, rank-1 identification, ROC and EER.

Templates are rows of a 2D array; each row carries a key
``(class_id, eye, sample_id)``. Two templates share a class when both
``class_id`` and ``eye`` agree. Gallery ties in rank-1 are broken towards
the smallest key.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .extractor import cosine_matrix
from .gabor import hamming_matrix

log = logging.getLogger(__name__)

Key = tuple  # (class_id, eye, sample_id)

TIE_RULE = "lowest (class_id, eye, sample_id) gallery key wins"


@dataclass(frozen=True)
class Metric:
    """Distance used by a template store; Hamming may tolerate angular shifts."""

    name: str = "cosine"
    grid_shape: tuple | None = None
    max_shift: int = 0

    def matrix(self, a, b) -> np.ndarray:
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        if self.name == "cosine":
            return cosine_matrix(a, b)
        if self.name == "hamming":
            return hamming_matrix(a, b, self.grid_shape, self.max_shift)
        raise ValueError(f"unknown distance {self.name!r}")

    def pairwise(self, a, b) -> np.ndarray:
        """Row-aligned distances d(a[i], b[i])."""
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        if len(a) != len(b):
            raise ValueError(f"index misalignment: {len(a)} vs {len(b)} templates")
        return np.array([self.matrix(a[i:i + 1], b[i:i + 1])[0, 0] for i in range(len(a))])


def _class_of(key) -> tuple:
    return (key[0], key[1])


def type1_accuracy(recon, source, threshold: float, metric: Metric = Metric()) -> float:
    """Fraction of reconstructions within ``threshold`` of the exact template they came from."""
    d = metric.pairwise(recon, source)
    return float(np.count_nonzero(d <= threshold)) / len(d)


def type2_scores(recon, recon_keys: Sequence[Key], gallery, gallery_keys: Sequence[Key],
                 metric: Metric = Metric()) -> tuple[np.ndarray, np.ndarray]:
    """Genuine (same class, source excluded) and impostor distances over all probes."""
    d = metric.matrix(recon, gallery)
    genuine, impostor = [], []
    for i, pk in enumerate(recon_keys):
        pc = _class_of(pk)
        n_gen = 0
        for j, gk in enumerate(gallery_keys):
            if tuple(gk) == tuple(pk):
                continue
            if _class_of(gk) == pc:
                genuine.append(d[i, j])
                n_gen += 1
            else:
                impostor.append(d[i, j])
        if n_gen == 0:
            log.warning("probe %s has no second same-class gallery sample; impostor scores only", pk)
    return np.array(genuine, dtype=np.float64), np.array(impostor, dtype=np.float64)


@dataclass
class Roc:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray
    eer: float

    def tar_at(self, far: float) -> tuple[float, float]:
        """Best TAR with FAR <= ``far`` and its threshold (``-inf`` when only the empty point qualifies)."""
        ok = np.flatnonzero(self.far <= far + 1e-15)
        if len(ok) == 0:
            return 0.0, -math.inf
        i = ok[np.argmax(self.tar[ok])]
        # among equal TARs prefer the largest admissible threshold
        best = ok[self.tar[ok] == self.tar[i]]
        i = best[-1]
        return float(self.tar[i]), float(self.thresholds[i])

    def points(self) -> list[tuple[float, float, float]]:
        rows = sorted(zip(self.far.tolist(), self.tar.tolist(), self.thresholds.tolist()))
        return rows


def roc_from_scores(genuine, impostor) -> Roc:
    """Empirical ROC over every observed score; accept when distance <= threshold.

    The EER is linearly interpolated where FAR crosses 1 - TAR, starting
    from the virtual point (FAR 0, TAR 0) below every score.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    im = np.sort(np.asarray(impostor, dtype=np.float64))
    if len(g) == 0 or len(im) == 0:
        raise ValueError("ROC needs non-empty genuine and impostor score sets")
    thr = np.unique(np.concatenate([g, im]))
    tar = np.searchsorted(g, thr, side="right") / len(g)
    far = np.searchsorted(im, thr, side="right") / len(im)
    # crossing of FAR and FRR = 1 - TAR
    fa = np.concatenate([[0.0], far])
    fr = np.concatenate([[1.0], 1.0 - tar])
    diff = fa - fr
    k = int(np.argmax(diff >= 0))
    if k == 0:
        eer = 0.0 if diff[0] >= 0 else float("nan")
    else:
        lam = diff[k - 1] / (diff[k - 1] - diff[k])
        eer = float(fa[k - 1] + lam * (fa[k] - fa[k - 1]))
    return Roc(far, tar, thr, eer)


def rank1(recon, recon_keys: Sequence[Key], gallery, gallery_keys: Sequence[Key],
          metric: Metric = Metric(), include_source: bool = False) -> float:
    """Fraction of probes whose nearest gallery template shares their class."""
    if len(gallery_keys) == 0:
        raise ValueError("empty gallery")
    order = sorted(range(len(gallery_keys)), key=lambda j: tuple(gallery_keys[j]))
    gk = [tuple(gallery_keys[j]) for j in order]
    d = metric.matrix(recon, np.atleast_2d(gallery)[order])
    hits = 0
    for i, pk in enumerate(recon_keys):
        row = d[i].copy()
        if not include_source:
            for j, k in enumerate(gk):
                if k == tuple(pk):
                    row[j] = np.inf
        j = int(np.argmin(row))  # first minimum == smallest key
        hits += _class_of(gk[j]) == _class_of(pk)
    return hits / len(recon_keys)


@dataclass
class EvalReport:
    type1_tar: float
    type2_tar_at_1far: float
    rank1: float
    eer: float
    operating_threshold: float
    type2_roc: list = field(default_factory=list)  # (far, tar, threshold) rows, FAR ascending
    far_target: float = 0.01
    metadata: dict = field(default_factory=dict)

    @property
    def threshold_grid(self) -> list[float]:
        return [t for _, _, t in self.type2_roc]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("type2_roc")
        return d

    def __post_init__(self):
        for name in ("type1_tar", "type2_tar_at_1far", "rank1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def evaluate_attack(recon, source, recon_keys, gallery, gallery_keys, metric: Metric = Metric(),
                    far_target: float = 0.01, include_source: bool = False) -> EvalReport:
    """Score reconstructed templates against the real gallery.

    The operating threshold is the largest one reaching ``far_target`` on
    the Type-2 ROC; Type-1 acceptance is measured at that same threshold.
    """
    genuine, impostor = type2_scores(recon, recon_keys, gallery, gallery_keys, metric)
    roc = roc_from_scores(genuine, impostor)
    tar2, thr = roc.tar_at(far_target)
    t1 = type1_accuracy(recon, source, thr, metric)
    r1 = rank1(recon, recon_keys, gallery, gallery_keys, metric, include_source)
    meta = {"distance": metric.name, "max_shift": metric.max_shift, "rank1_includes_source": include_source,
            "rank1_tie_rule": TIE_RULE, "n_probes": len(recon_keys), "n_gallery": len(gallery_keys),
            "n_genuine": int(len(genuine)), "n_impostor": int(len(impostor))}
    return EvalReport(t1, tar2, r1, roc.eer, thr, roc.points(), far_target, meta)


def evaluate_legitimate(gallery, gallery_keys, metric: Metric = Metric(), far_target: float = 0.01,
                        include_source: bool = False) -> EvalReport:
    """Baseline: the gallery probing itself (Type-1 is trivially 1 for a deterministic pipeline)."""
    rep = evaluate_attack(gallery, gallery, gallery_keys, gallery, gallery_keys, metric, far_target, include_source)
    return rep


def impostor_mean(templates, keys, metric: Metric = Metric()) -> float:
    d = metric.matrix(templates, templates)
    cls = [_class_of(k) for k in keys]
    mask = np.array([[a != b for b in cls] for a in cls])
    return float(d[mask].mean())


def genuine_mean(templates, keys, metric: Metric = Metric()) -> float:
    d = metric.matrix(templates, templates)
    cls = [_class_of(k) for k in keys]
    mask = np.array([[a == b for b in cls] for a in cls])
    np.fill_diagonal(mask, False)
    return float(d[mask].mean())


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(reports: dict[str, EvalReport], out_dir, plot: bool = True) -> dict[str, Path]:
    """Write ``metrics.json``, one ``roc_<row>.csv`` per row and ``roc.png``.

    ``reports`` maps a row name (``legitimate``, ``core``, ``resist``...) to
    its report; output is byte-identical for identical input.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write report to {out}: {e}") from e
    paths = {}
    metrics = {name: rep.to_dict() for name, rep in reports.items()}
    p = out / "metrics.json"
    p.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    paths["metrics"] = p
    for name, rep in reports.items():
        p = out / f"roc_{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["far", "tar", "threshold"])
            for far, tar, thr in sorted(rep.type2_roc):
                w.writerow([_fmt(far), _fmt(tar), _fmt(thr)])
        paths[f"roc_{name}"] = p
    if plot:
        from .plotting import plot_roc_curves

        paths["plot"] = plot_roc_curves({n: r.type2_roc for n, r in reports.items()}, out / "roc.png")
    return paths


def load_report(out_dir) -> dict[str, EvalReport]:
    out = Path(out_dir)
    metrics = json.loads((out / "metrics.json").read_text())
    reports = {}
    for name, d in metrics.items():
        rows = []
        roc_path = out / f"roc_{name}.csv"
        if roc_path.exists():
            with open(roc_path, newline="") as fh:
                rows = [(float(r["far"]), float(r["tar"]), float(r["threshold"])) for r in csv.DictReader(fh)]
        reports[name] = EvalReport(type2_roc=rows, **d)
    return reports
