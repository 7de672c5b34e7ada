"""Stage runner behind the CLI.

Every stage reads its inputs from earlier stage directories under
``out_dir`` and writes ``out_dir/<stage>/`` including ``run_meta.json``
(config snapshot, seeds, duration, library versions). A missing input
raises :class:`StageError` naming the stage that produces it.
"""
from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, save_config
from .data.checkpoint import CheckpointError, load_checkpoint, load_into, save_module
from .data.manifest import DatasetManifest, Split, load_image, load_split, save_image, split_train_test
from .data.store import TemplateStore, load_store, save_store
from .data.synthetic import generate_synthetic_dataset
from .evaluation import emit_report, evaluate_attack, evaluate_legitimate, load_report, rank1
from .extractor import EmbeddingNet, train_extractor
from .gabor import GaborBank, SampleGrid
from .gan import train_gan
from .generator import Generator, reconstruct, train_core_standalone
from .losses import ReconstructionLoss, TextureExtractor
from .pipelines import DeepTemplater, GaborTemplater, load_pipeline_images
from .plotting import image_grid, plot_history, plot_roc_curves

log = logging.getLogger(__name__)

STAGES = ("gen-data", "split", "train-extractor", "extract-templates", "train-core", "train-gan",
          "reconstruct", "evaluate", "plot-roc")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _versions() -> dict:
    import matplotlib
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "torch": torch.__version__, "matplotlib": matplotlib.__version__}


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


class Experiment:
    def __init__(self, cfg: ExperimentConfig, out_dir=None):
        self.cfg = cfg.validate()
        self.out = Path(out_dir if out_dir is not None else cfg.out_dir)

    # bookkeeping

    def dir(self, stage: str) -> Path:
        return self.out / stage

    def require(self, stage: str, needed_by: str, *files: str) -> Path:
        d = self.dir(stage)
        for f in ("run_meta.json", *files):
            if not (d / f).exists():
                raise StageError(needed_by, f"missing {d / f}; run stage '{stage}' first")
        return d

    def _finish(self, stage: str, started: float, extra: dict | None = None) -> Path:
        c = self.cfg
        meta = {"stage": stage, "pipeline": c.pipeline, "config": c.to_dict(),
                "seeds": {"experiment": c.seed, "extractor": c.extractor.schedule.seed, "core": c.core.seed,
                          "gan": c.gan.seed},
                "duration_s": round(time.time() - started, 3), "versions": _versions()}
        meta.update(extra or {})
        save_config(c, self.dir(stage) / "config.yaml")
        return _write_json(self.dir(stage) / "run_meta.json", meta)

    def run(self, stage: str):
        if stage not in STAGES:
            raise StageError(stage, f"unknown stage; choose from {', '.join(STAGES)}")
        torch.manual_seed(self.cfg.seed)
        fn = getattr(self, "stage_" + stage.replace("-", "_"))
        started = time.time()
        try:
            extra = fn() or {}
        except StageError:
            raise
        except (ValueError, OSError, CheckpointError, FloatingPointError) as e:
            raise StageError(stage, str(e)) from e
        self._finish(stage, started, extra)
        log.info("stage %s done in %.1fs", stage, time.time() - started)
        return extra

    def run_all(self, stages=STAGES):
        for s in stages:
            if s == "gen-data" and self.cfg.data.manifest:
                continue
            self.run(s)

    # shared loaders

    def manifest(self, needed_by: str) -> DatasetManifest:
        if self.cfg.data.manifest:
            return DatasetManifest.load(self.cfg.data.manifest)
        d = self.require("gen-data", needed_by, "manifest.csv")
        return DatasetManifest.load(d / "manifest.csv")

    def split(self, needed_by: str) -> tuple[Split, Path]:
        d = self.require("split", needed_by, "split.csv")
        root = Path(json.loads((d / "run_meta.json").read_text())["dataset_root"])
        return load_split(d / "split.csv", root), root

    def images(self, records, root) -> np.ndarray:
        c = self.cfg
        return load_pipeline_images(records, root, c.pipeline, (c.normalize.rows, c.normalize.cols))

    def templater(self, needed_by: str):
        c = self.cfg
        if c.pipeline == "gabor":
            d = self.require("train-extractor", needed_by, "gabor_bank.json")
            spec = json.loads((d / "gabor_bank.json").read_text())
            return GaborTemplater(GaborBank.from_dict(spec["bank"]), SampleGrid(**spec["grid"]), spec["max_shift"])
        d = self.require("train-extractor", needed_by, "extractor.rstc")
        net = EmbeddingNet(c.extractor_config(), seed=c.extractor.schedule.seed)
        load_into(net, load_checkpoint(d / "extractor.rstc", "extractor", self._extractor_ckpt_config()))
        net.eval()
        return DeepTemplater(net, c.pipeline)

    def _extractor_ckpt_config(self) -> dict:
        return {"pipeline": self.cfg.pipeline, **asdict(self.cfg.extractor_config())}

    def _generator_ckpt_config(self) -> dict:
        return {"pipeline": self.cfg.pipeline, **asdict(self.cfg.generator_config())}

    def _discriminator_ckpt_config(self) -> dict:
        return {"pipeline": self.cfg.pipeline, **asdict(self.cfg.discriminator_config())}

    def stores(self, needed_by: str) -> tuple[TemplateStore, TemplateStore]:
        d = self.require("extract-templates", needed_by, "inversion.rsts", "test.rsts")
        return load_store(d / "inversion.rsts"), load_store(d / "test.rsts")

    def recon_loss(self) -> ReconstructionLoss:
        lc = self.cfg.losses
        phi = TextureExtractor(seed=lc.texture_seed)
        if lc.texture_weights:
            phi.load_tensors(load_checkpoint(lc.texture_weights, "texture").torch_state())
        return ReconstructionLoss(phi, lc.weights, lc.ssim, lc.perceptual_metric)

    def load_generator(self, stage: str, name: str, needed_by: str) -> Generator:
        d = self.require(stage, needed_by, name)
        gen = Generator(self.cfg.generator_config(), seed=self.cfg.core.seed)
        load_into(gen, load_checkpoint(d / name, "generator", self._generator_ckpt_config()))
        gen.eval()
        return gen

    def _image_set(self, split: Split, root, store: TemplateStore, which: str) -> np.ndarray:
        recs = {r.key: r for r in getattr(split, which)}
        return self.images([recs[k] for k in store.keys], root)

    # stages

    def stage_gen_data(self):
        spec = self.cfg.data.synthetic
        m = generate_synthetic_dataset(spec, self.dir("gen-data"))
        return {"n_images": len(m), "spec": spec.to_dict()}

    def stage_split(self):
        m = self.manifest("split")
        s = split_train_test(m, self.cfg.split)
        self.dir("split").mkdir(parents=True, exist_ok=True)
        DatasetManifest(m.root, s.tagged()).save(self.dir("split") / "split.csv")
        return {"dataset_root": str(Path(m.root).resolve()),
                "counts": {k: len(getattr(s, k)) for k in ("extractor", "inversion", "test")}}

    def stage_train_extractor(self):
        c = self.cfg
        d = self.dir("train-extractor")
        if c.pipeline == "gabor":
            g = c.gabor
            _write_json(d / "gabor_bank.json", {"bank": g.bank().to_dict(), "max_shift": g.max_shift,
                                                "grid": {"row_step": g.row_step, "col_step": g.col_step}})
            return {"template_dim": c.template_dim()}
        split, root = self.split("train-extractor")
        imgs = self.images(split.extractor, root)
        labels = np.array([r.class_id * 2 + (r.eye == "R") for r in split.extractor])
        net, hist = train_extractor(imgs, labels, c.extractor_config(), c.extractor.schedule)
        save_module(d / "extractor.rstc", "extractor", self._extractor_ckpt_config(), net)
        _write_json(d / "history.json", hist)
        plot_history(hist, ["loss", "holdout_rank1"], d / "history.png", "extractor")
        return {"epochs_run": len(hist), "final": hist[-1]}

    def stage_extract_templates(self):
        c = self.cfg
        split, root = self.split("extract-templates")
        tp = self.templater("extract-templates")
        d = self.dir("extract-templates")
        counts = {}
        for which in ("inversion", "test"):
            recs = getattr(split, which)
            if not recs:
                raise StageError("extract-templates", f"split has no {which} images")
            imgs = self.images(recs, root)
            store = tp.store(tp.templates(imgs), [r.key for r in recs], c.image_shape)
            save_store(store, d / f"{which}.rsts")
            counts[which] = len(store)
        return {"counts": counts, "template_dim": c.template_dim()}

    def stage_train_core(self):
        c = self.cfg
        split, root = self.split("train-core")
        inv, _ = self.stores("train-core")
        imgs = self._image_set(split, root, inv, "inversion")
        gen, hist = train_core_standalone(inv.as_float(), imgs, c.generator_config(), c.core, self.recon_loss())
        d = self.dir("train-core")
        save_module(d / "core.rstc", "generator", self._generator_ckpt_config(), gen)
        _write_json(d / "history.json", hist)
        plot_history(hist, ["loss", "l1"], d / "history.png", "standalone core")
        return {"final_l1": hist[-1]["l1"]}

    def _rank1_probe(self, needed_by: str):
        """Closure scoring a generator by rank-1 of its test reconstructions."""
        c = self.cfg
        tp = self.templater(needed_by)
        _, test = self.stores(needed_by)
        metric = tp.metric(c.image_shape)

        def evaluate(gen):
            rec = np.round(np.clip(reconstruct(test.as_float(), gen), 0, 1) * 255) / 255
            t = tp.templates(rec)
            return {"rank1": rank1(t, test.keys, test.vectors, test.keys, metric, c.eval.rank1_include_source)}

        return evaluate

    def stage_train_gan(self):
        c = self.cfg
        split, root = self.split("train-gan")
        inv, _ = self.stores("train-gan")
        gen = self.load_generator("train-core", "core.rstc", "train-gan")
        imgs = self._image_set(split, root, inv, "inversion")
        d = self.dir("train-gan")

        def on_checkpoint(epoch, g, disc):
            save_module(d / "checkpoints" / f"generator_e{epoch + 1:04d}.rstc", "generator",
                        self._generator_ckpt_config(), g)

        gen, disc, hist = train_gan(inv.as_float(), imgs, gen, c.discriminator_config(), c.gan, self.recon_loss(),
                                    c.losses.literal_ra, self._rank1_probe("train-gan"), on_checkpoint)
        save_module(d / "generator.rstc", "generator", self._generator_ckpt_config(), gen)
        save_module(d / "discriminator.rstc", "discriminator", self._discriminator_ckpt_config(), disc)
        _write_json(d / "history.json", hist)
        plot_history(hist, ["d_loss", "g_loss"], d / "history.png", "adversarial training")
        return {"final": hist[-1]}

    def stage_reconstruct(self):
        _, test = self.stores("reconstruct")
        d = self.dir("reconstruct")
        models = {"core": self.load_generator("train-core", "core.rstc", "reconstruct")}
        if (self.dir("train-gan") / "generator.rstc").exists():
            models["resist"] = self.load_generator("train-gan", "generator.rstc", "reconstruct")
        for name, gen in models.items():
            rec = reconstruct(test.as_float(), gen)
            for (cid, eye, sid), img in zip(test.keys, rec):
                save_image(img, _recon_path(d / name, cid, eye, sid))
            image_grid(list(rec[:32]), d / f"{name}_grid.png",
                       titles=[f"{k[0]}{k[1]}/{k[2]}" for k in test.keys[:32]])
        return {"models": sorted(models), "count": len(test)}

    def stage_evaluate(self):
        c = self.cfg
        d_rec = self.require("reconstruct", "evaluate")
        _, test = self.stores("evaluate")
        tp = self.templater("evaluate")
        metric = tp.metric(c.image_shape)
        far, inc = c.eval.far_target, c.eval.rank1_include_source
        gallery = test.vectors
        reports = {"legitimate": evaluate_legitimate(gallery, test.keys, metric, far, inc)}
        for name in ("core", "resist"):
            if not (d_rec / name).is_dir():
                continue
            files = [_recon_path(d_rec / name, *k) for k in test.keys]
            missing = [f for f in files if not f.exists()]
            if missing:
                raise StageError("evaluate", f"missing {missing[0]}; run stage 'reconstruct' first")
            rec = np.stack([load_image(f) for f in files]).astype(np.float32)
            t = tp.templates(rec)
            reports[name] = evaluate_attack(t, gallery, test.keys, gallery, test.keys, metric, far, inc)
        for rep in reports.values():
            rep.metadata["pipeline"] = c.pipeline
        emit_report(reports, self.dir("evaluate"))
        return {"rows": {k: v.to_dict() for k, v in reports.items()}}

    def stage_plot_roc(self):
        d = self.require("evaluate", "plot-roc", "metrics.json")
        reports = load_report(d)
        plot_roc_curves({n: r.type2_roc for n, r in reports.items()}, self.dir("plot-roc") / "roc.png",
                        f"Type-2 ROC ({self.cfg.pipeline})")
        return {"rows": sorted(reports)}


def _recon_path(d: Path, cid: int, eye: str, sid: int) -> Path:
    return d / f"{cid:04d}{eye}_{sid:03d}_recon.png"
