"""Summary tables and a JSON digest from a completed pipeline run."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from impact.attribution import bootstrap_advantage
from impact.harness.pipeline import MANIFEST, derive_seed
from impact.model.checkpoint import atomic_write

ACCURACY_COLUMNS = ("model", "sparsity", "method", "measured_sparsity", "val_acc")
SAE_COLUMNS = ("model", "sparsity", "nmse", "fve", "dead_pct", "active")
CIRCUIT_COLUMNS = ("model", "categories", "node_pct", "node_pct_std", "size_pct", "size_pct_std",
                   "acc", "ablated_acc", "ncq")
ATTRIBUTION_COLUMNS = ("model", "images", "insertion", "random_insertion", "deletion", "random_deletion",
                       "insertion_advantage", "deletion_advantage")


class ReportError(RuntimeError):
    pass


def _read_rows(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        return []
    return list(csv.DictReader(io.StringIO(path.read_text())))


def _write_csv(path: Path, header, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return atomic_write(path, buf.getvalue().encode())


def _stats(values) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}


def _model_order(tag: str) -> tuple[float, str]:
    return (0.0, tag) if tag == "dense" else (float(tag.rsplit("_", 1)[-1]), tag)


def circuit_summary(tables: Path) -> tuple[list[tuple], dict]:
    rows, digest = [], {}
    for p in sorted(tables.glob("circuits_*.csv"), key=lambda q: _model_order(q.stem[len("circuits_"):])):
        tag = p.stem[len("circuits_"):]
        data = _read_rows(p)
        col = {c: [float(r[c]) for r in data] for c in ("node_pct", "size_pct", "acc", "ablated_acc", "ncq")}
        st = {c: _stats(v) for c, v in col.items()}
        digest[tag] = st
        rows.append((tag, len(data), st["node_pct"]["mean"], st["node_pct"]["std"], st["size_pct"]["mean"],
                     st["size_pct"]["std"], st["acc"]["mean"], st["ablated_acc"]["mean"], st["ncq"]["mean"]))
    return rows, digest


def attribution_summary(tables: Path, seed: int = 0) -> tuple[list[tuple], dict]:
    rows, digest = [], {}
    for p in sorted(tables.glob("attribution_*.csv"), key=lambda q: _model_order(q.stem[len("attribution_"):])):
        tag = p.stem[len("attribution_"):]
        data = _read_rows(p)
        col = {c: np.array([float(r[c]) for r in data])
               for c in ("insertion", "random_insertion", "deletion", "random_deletion")}
        st = {c: _stats(v) for c, v in col.items()}
        if data:
            bs = derive_seed(seed, "report", tag)
            ins_adv = bootstrap_advantage(col["insertion"] - col["random_insertion"], bs)
            del_adv = bootstrap_advantage(col["random_deletion"] - col["deletion"], bs + 1)
        else:
            ins_adv = del_adv = float("nan")
        st["insertion_advantage"], st["deletion_advantage"] = ins_adv, del_adv
        digest[tag] = st
        rows.append((tag, len(data), st["insertion"]["mean"], st["random_insertion"]["mean"], st["deletion"]["mean"],
                     st["random_deletion"]["mean"], ins_adv, del_adv))
    return rows, digest


def emit_report(out: str | Path) -> dict[str, Path]:
    """Write ``report/*.csv`` and ``report/summary.json`` for the run in ``out``."""
    out = Path(out)
    mpath = out / MANIFEST
    if not mpath.exists():
        raise ReportError(f"no manifest in {out}")
    manifest = json.loads(mpath.read_text())
    if not manifest.get("complete"):
        raise ReportError(f"run in {out} is incomplete")
    seed = int(manifest.get("config", {}).get("seed", 0))
    tables, dest = out / "tables", out / "report"

    acc = [[r[c] for c in ACCURACY_COLUMNS] for r in _read_rows(tables / "accuracy.csv")]
    sae = [[r[c] for c in SAE_COLUMNS] for r in _read_rows(tables / "sae_quality.csv")]
    circ_rows, circ_digest = circuit_summary(tables)
    attr_rows, attr_digest = attribution_summary(tables, seed)

    paths = {
        "accuracy": _write_csv(dest / "accuracy.csv", ACCURACY_COLUMNS, acc),
        "sae": _write_csv(dest / "sae_quality.csv", SAE_COLUMNS, sae),
        "circuits": _write_csv(dest / "circuits.csv", CIRCUIT_COLUMNS, circ_rows),
        "attribution": _write_csv(dest / "attribution.csv", ATTRIBUTION_COLUMNS, attr_rows),
    }
    summary = {
        "accuracy": {r[0]: float(r[4]) for r in acc},
        "sae": {r[0]: {"nmse": float(r[2]), "fve": float(r[3]), "dead_pct": float(r[4])} for r in sae},
        "circuits": circ_digest,
        "attribution": attr_digest,
    }
    text = json.dumps(summary, indent=2, sort_keys=True, default=float)
    paths["summary"] = atomic_write(dest / "summary.json", text.encode())
    return paths
