"""Staged experiment pipeline: train -> prune + fine-tune -> neurons -> SAE -> circuits -> attribution.

Stages communicate only through files under the output directory. The
manifest records, per stage, the wall-clock time and every output with its
size and sha256 so a resumed run can verify and skip completed work.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np

from impact import attribution as attr
from impact import circuits as circ
from impact import neurons as nm
from impact import pruning
from impact import sae as sae_mod
from impact.data import Dataset, generate_shapes, load_dataset_dir, make_binary_task, save_dataset_dir
from impact.harness.config import ExperimentConfig
from impact.model import TrainSettings, accuracy, load_checkpoint, save_checkpoint, train
from impact.model.checkpoint import atomic_write
from impact.model.vit import HookSite, VitModel

log = logging.getLogger(__name__)

STAGES = ("train", "prune", "neurons", "sae", "circuits", "attribution")
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(seed: int, stage: str, category: int | str = "") -> int:
    """Stable 32-bit seed for (global seed, stage, category)."""
    h = hashlib.sha256(f"{seed}:{stage}:{category}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def variant_tag(sparsity: float, method: str) -> str:
    return "dense" if sparsity == 0 else f"{method}_{sparsity:g}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


class Pipeline:
    def __init__(self, config: ExperimentConfig, out: str | Path | None = None, resume: bool = False):
        self.config = config
        self.out = Path(out if out is not None else config.out)
        self.resume = resume
        # the manifest is always reused for a matching config so single-stage runs
        # accumulate; ``resume`` only decides whether verified stages are skipped
        self.manifest = self._load_manifest()
        if self.manifest is None or self.manifest.get("config") != config.to_dict():
            if self.manifest is not None:
                log.warning("config changed since the previous run; starting over")
            self.manifest = {"config": config.to_dict(), "stages": {}, "complete": False}
        self._data: dict[str, Dataset] = {}

    # -- manifest ------------------------------------------------------------

    def _load_manifest(self):
        p = self.out / MANIFEST
        return json.loads(p.read_text()) if p.exists() else None

    def _write_manifest(self) -> None:
        atomic_write(self.out / MANIFEST, json.dumps(self.manifest, indent=2, sort_keys=True).encode())

    def _stage_done(self, stage: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if not entry or entry.get("status") != "complete":
            return False
        for f in entry["outputs"]:
            p = self.out / f["path"]
            if not p.exists() or p.stat().st_size != f["size"] or sha256_file(p) != f["sha256"]:
                log.warning("checksum mismatch for %s; rerunning %s", f["path"], stage)
                return False
        return True

    def _record(self, stage: str, outputs: list[Path], seconds: float, status: str = "complete") -> None:
        self.manifest["stages"][stage] = {
            "status": status,
            "seconds": round(seconds, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "outputs": [
                {"path": str(p.relative_to(self.out)), "size": p.stat().st_size, "sha256": sha256_file(p)}
                for p in sorted(outputs)
            ],
        }
        self._write_manifest()

    # -- helpers -------------------------------------------------------------

    def _write(self, rel: str, data: str | bytes) -> Path:
        return atomic_write(self.out / rel, data.encode() if isinstance(data, str) else data)

    def dataset(self, split: str) -> Dataset:
        if split not in self._data:
            self._data[split] = load_dataset_dir(self.out / "data", split, self.config.model.num_classes)
        return self._data[split]

    def variants(self) -> list[tuple[str, float]]:
        out = [("dense", 0.0)]
        for s in self.config.prune.sparsities:
            if s > 0:
                out.append((variant_tag(s, self.config.prune.method), float(s)))
        return out

    def load_variant(self, tag: str) -> VitModel:
        return load_checkpoint(self.out / "models" / f"{tag}.ckpt")

    def categories(self, chosen) -> list[int]:
        return list(range(self.config.model.num_classes)) if chosen is None else [int(c) for c in chosen]

    def metric_blocks(self) -> list[int]:
        d = self.config.model.depth
        chosen = self.config.neurons.blocks
        return sorted(set(chosen if chosen is not None else [0, d // 2, d - 1]))

    # -- stages ----------------------------------------------------------------

    def stage_train(self) -> list[Path]:
        c = self.config
        if c.data.source == "shapes":
            tr = generate_shapes(derive_seed(c.data.seed, "data", "train"), c.data.train_per_class, split="train")
            va = generate_shapes(derive_seed(c.data.seed, "data", "val"), c.data.val_per_class, split="val")
        else:
            tr = load_dataset_dir(c.data.idx_dir, "train", c.model.num_classes)
            va = load_dataset_dir(c.data.idx_dir, "val", c.model.num_classes)
        files = save_dataset_dir(self.out / "data", {"train": tr, "val": va})
        self._data = {}
        tr, va = self.dataset("train"), self.dataset("val")
        settings = TrainSettings(c.train.epochs, c.train.batch_size, c.train.lr, c.train.weight_decay,
                                 c.train.warmup_steps, derive_seed(c.seed, "train"))
        model, hist = train(replace(c.model, seed=derive_seed(c.seed, "init")), tr.images, tr.labels, settings,
                            val=(va.images, va.labels))
        model.meta = {"tag": "dense", "sparsity": 0.0}
        files.append(save_checkpoint(model, self.out / "models" / "dense.ckpt"))
        rows = [(e, hist.loss[e], hist.train_acc[e], hist.val_acc[e]) for e in range(len(hist.loss))]
        files.append(self._write("tables/train_history.csv", _csv_text(("epoch", "loss", "train_acc", "val_acc"), rows)))
        return files

    def stage_prune(self) -> list[Path]:
        c = self.config
        tr, va = self.dataset("train"), self.dataset("val")
        rows, files = [self._dense_row()], []
        dense = self.load_variant("dense")
        calib = tr.images[: c.prune.calibration]
        for tag, s in self.variants()[1:]:
            pruned = pruning.prune(dense, s, c.prune.method, calibration=calib)
            settings = TrainSettings(c.prune.finetune_epochs, c.train.batch_size, c.prune.finetune_lr,
                                     c.train.weight_decay, 0, derive_seed(c.seed, "finetune", tag))
            tuned, _ = train(pruned, tr.images, tr.labels, settings, masks=pruned.prune_mask)
            tuned.meta = {"tag": tag, "sparsity": s, "prune_method": c.prune.method}
            files.append(save_checkpoint(tuned, self.out / "models" / f"{tag}.ckpt"))
            measured = float(np.mean(list(pruning.weight_sparsity(tuned).values())))
            rows.append((tag, s, c.prune.method, measured, accuracy(tuned, va.images, va.labels)))
        files.append(self._write("tables/accuracy.csv",
                                 _csv_text(("model", "sparsity", "method", "measured_sparsity", "val_acc"), rows)))
        return files

    def _dense_row(self) -> tuple:
        va = self.dataset("val")
        return ("dense", 0.0, "none", 0.0, accuracy(self.load_variant("dense"), va.images, va.labels))

    def _dense_only_table(self) -> list[Path]:
        # a dense-only grid skips pruning but still reports the dense accuracy
        if not (self.out / "models" / "dense.ckpt").exists():
            return []
        return [self._write("tables/accuracy.csv", _csv_text(
            ("model", "sparsity", "method", "measured_sparsity", "val_acc"), [self._dense_row()]))]

    def _mean_cache(self, model: VitModel) -> nm.MeanCache:
        tr = self.dataset("train")
        return nm.compute_mean_cache(model, tr.images[: self.config.neurons.mean_images])

    def stage_neurons(self) -> list[Path]:
        c = self.config
        va = self.dataset("val")
        report = nm.MetricReport()
        for tag, s in self.variants():
            model = self.load_variant(tag)
            cache = self._mean_cache(model)
            for cat in self.categories(c.neurons.categories):
                task = make_binary_task(va, cat, derive_seed(c.seed, "neurons", cat))
                report.extend(nm.neuron_report(model, va, task, cache, self.metric_blocks(), c.neurons.tags,
                                               c.neurons.k, tag, s))
        return [self._write("tables/neurons.csv", report.sorted().to_csv())]

    def stage_sae(self) -> list[Path]:
        c = self.config
        tr, va = self.dataset("train"), self.dataset("val")
        files, rows = [], []
        report = nm.MetricReport()
        for tag, s in self.variants():
            model = self.load_variant(tag)
            site = sae_mod.default_site(model)
            settings = sae_mod.SaeSettings(c.sae.k, c.sae.expansion, c.sae.epochs, c.sae.batch_size, c.sae.lr,
                                           derive_seed(c.seed, "sae", tag))
            sae, _ = sae_mod.train_sae(sae_mod.collect_activations(model, tr.images, site), settings, site.key)
            path = self.out / "models" / f"sae_{tag}.ckpt"
            sae_mod.save_sae(sae, path)
            files.append(path)
            q = sae_mod.sae_quality(sae, sae_mod.collect_activations(model, va.images, site))
            rows.append((tag, s, q.nmse, q.fve, 100.0 * q.dead_fraction, q.active))
            tasks = [make_binary_task(va, cat, derive_seed(c.seed, "sae", cat))
                     for cat in self.categories(c.neurons.categories)]
            report.extend(sae_mod.sae_feature_metrics(model, sae, va, tasks, tag, s, site))
        files.append(self._write("tables/sae_quality.csv",
                                 _csv_text(("model", "sparsity", "nmse", "fve", "dead_pct", "active"), rows)))
        files.append(self._write("tables/sae_features.csv", report.sorted().to_csv()))
        return files

    def stage_circuits(self) -> list[Path]:
        c = self.config
        cc = c.circuits
        tr, va = self.dataset("train"), self.dataset("val")
        files = []
        for tag, s in self.variants():
            model = self.load_variant(tag)
            cache = self._mean_cache(model)
            results = []
            for cat in self.categories(cc.categories):
                seed = derive_seed(c.seed, "circuits", cat)
                settings = circ.CircuitSettings(
                    lr=cc.lr, k_pen=cc.k_dense if s == 0 else cc.k_sparse, epochs=cc.epochs,
                    batch_size=cc.batch_size, step_size=cc.step_size, gamma=cc.gamma, tau=cc.tau, seed=seed)
                task = make_binary_task(tr, cat, seed, max_positives=cc.max_positives)
                ev = make_binary_task(va, cat, seed)
                results.append(circ.optimize_task(model, tr.images, task, cache, settings, va.images, ev))
            files.append(self._write(f"tables/circuits_{tag}.csv", circ.circuit_csv(results)))
        return files

    def stage_attribution(self) -> list[Path]:
        c = self.config
        va = self.dataset("val")
        n = min(c.attribution.images, len(va))
        files = []
        for tag, _ in self.variants():
            model = self.load_variant(tag)
            rows = attr.evaluate_faithfulness(model, va.images[:n], va.labels[:n], derive_seed(c.seed, "attribution", tag),
                                              c.attribution.steps, c.attribution.random_orders)
            table = [(r.index, r.target, r.insertion, r.deletion, r.random_insertion, r.random_deletion) for r in rows]
            files.append(self._write(f"tables/attribution_{tag}.csv", _csv_text(
                ("index", "target", "insertion", "deletion", "random_insertion", "random_deletion"), table)))
        return files

    # -- driver ------------------------------------------------------------------

    def _enabled(self, stage: str) -> bool:
        c = self.config
        if stage == "prune":
            return any(s > 0 for s in c.prune.sparsities)
        section = getattr(c, stage, None)
        return getattr(section, "enabled", True)

    def run(self, stages: tuple[str, ...] = STAGES) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        self._write_manifest()
        for stage in stages:
            if not self._enabled(stage):
                outputs = self._dense_only_table() if stage == "prune" else []
                self._record(stage, outputs, 0.0, status="skipped")
                continue
            if self.resume and self._stage_done(stage):
                log.info("stage %s already complete; skipping", stage)
                continue
            fn: Callable[[], list[Path]] = getattr(self, f"stage_{stage}")
            t0 = time.process_time()
            try:
                outputs = fn()
            except Exception as e:
                self.manifest["complete"] = False
                self.manifest["stages"][stage] = {"status": "failed", "error": str(e), "outputs": []}
                self._write_manifest()
                raise StageError(stage, e) from e
            self._record(stage, outputs, time.process_time() - t0)
            log.info("stage %s done", stage)
        self.manifest["complete"] = all(
            self.manifest["stages"].get(s, {}).get("status") in ("complete", "skipped") or not self._enabled(s)
            for s in STAGES)
        self._write_manifest()
        return self.manifest


def run_pipeline(config: ExperimentConfig, out=None, resume: bool = False, stages=STAGES) -> dict:
    return Pipeline(config, out, resume).run(tuple(stages))
