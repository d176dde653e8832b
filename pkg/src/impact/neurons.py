"""Neuron-level metrics: ablation impact, selectivity, class variance, label entropy.

A unit is one feature of a hook site, or one attention head at q/k/v (its
scalar activation is the L2 norm over the head dimension).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from impact.data import BinaryTask, Dataset
from impact.model.vit import HEAD_TAGS, HookSite, VitModel, all_sites, capture, forward, site_feature_shape, site_units
from impact.numerics import GradTape, Tensor, kernels, ops

UNDEFINED = "undefined"
REPORT_COLUMNS = ("model", "sparsity", "category", "block", "site", "unit", "metric", "value", "flag")


class NeuronId(NamedTuple):
    site: HookSite
    unit: int


# -- mean cache ---------------------------------------------------------------


@dataclass
class MeanCache:
    means: dict[HookSite, np.ndarray]  # per-site feature-shaped mean
    count: int = 0

    def __getitem__(self, site: HookSite) -> np.ndarray:
        return self.means[site]

    def __contains__(self, site) -> bool:
        return site in self.means


def compute_mean_cache(model: VitModel, images: np.ndarray, sites: Iterable[HookSite] | None = None,
                       batch_size: int = 256) -> MeanCache:
    """Mean activation per site over every image and every token."""
    if len(images) == 0:
        raise ValueError("mean cache needs a non-empty dataset")
    sites = list(all_sites(model.config) if sites is None else sites)
    sums = {s: np.zeros(site_feature_shape(model.config, s.tag), np.float64) for s in sites}
    rows = 0
    for i in range(0, len(images), batch_size):
        _, acts = capture(model, images[i : i + batch_size], sites, batch_size)
        for s in sites:
            a = acts[s].astype(np.float64)
            sums[s] += a.reshape(-1, *a.shape[2:]).sum(axis=0)
        rows += acts[sites[0]].shape[0] * acts[sites[0]].shape[1] if sites else 0
    dtype = model.params["patch_embed.weight"].dtype
    return MeanCache({s: (v / rows).astype(dtype) for s, v in sums.items()}, len(images))


def unit_keep_mask(model: VitModel, site: HookSite, units: Iterable[int]) -> np.ndarray:
    """Feature-shaped float mask with 0 at the listed units, 1 elsewhere."""
    cfg = model.config
    keep = np.ones(site_feature_shape(cfg, site.tag), dtype=model.params["patch_embed.weight"].dtype)
    width = site_units(cfg, site.tag)
    for u in units:
        if not 0 <= u < width:
            raise KeyError(f"unit {u} out of range for {site.key} (width {width})")
        keep[u] = 0
    return keep


def mean_ablation(model: VitModel, neurons: Iterable[NeuronId], cache: MeanCache) -> dict:
    """Intervention replacing every listed unit with its cached mean at once."""
    by_site: dict[HookSite, list[int]] = {}
    for n in neurons:
        if n.site not in cache:
            raise KeyError(f"no cached mean for {n.site.key}")
        by_site.setdefault(n.site, []).append(n.unit)
    interventions = {}
    for s, units in by_site.items():
        keep = Tensor(unit_keep_mask(model, s, units))
        mean = Tensor(cache[s])
        interventions[s] = lambda t, keep=keep, mean=mean: ops.blend(t, keep, mean)
    return interventions


# -- unit activations -----------------------------------------------------------


def head_activation(act: np.ndarray, tag: str, head: int | None = None) -> np.ndarray:
    """L2 norm over the head dimension: (B, T, H, dh) -> (B, T, H), or (B, T) for one head."""
    if tag not in HEAD_TAGS:
        raise ValueError(f"site {tag!r} has no head structure")
    norms = np.sqrt(np.square(act.astype(np.float64)).sum(axis=-1))
    return norms if head is None else norms[..., head]


def unit_activations(act: np.ndarray, tag: str) -> np.ndarray:
    """Per-token scalar activation of every unit: (B, T, units)."""
    return head_activation(act, tag) if tag in HEAD_TAGS else act.astype(np.float64)


def cls_activation(act: np.ndarray, tag: str) -> np.ndarray:
    return unit_activations(act, tag)[:, 0]


def max_patch_activation(act: np.ndarray, tag: str) -> np.ndarray:
    """m_n(x): max over patch tokens (CLS excluded)."""
    return unit_activations(act, tag)[:, 1:].max(axis=1)


# -- attribution patching ---------------------------------------------------------


def attribution_scores(model: VitModel, images: np.ndarray, category: int, cache: MeanCache,
                       sites: Sequence[HookSite], batch_size: int = 128) -> dict[HookSite, np.ndarray]:
    """Mean over images of |Σ_tokens (a − ā)·∂f_c/∂a| per unit."""
    if len(images) == 0:
        raise ValueError("no images to score")
    totals = {s: np.zeros(site_units(model.config, s.tag)) for s in sites}
    for i in range(0, len(images), batch_size):
        chunk = images[i : i + batch_size]
        with GradTape() as tape:
            res = forward(model, chunk, hooks=sites)
        seed = np.zeros(res.logits.shape, res.logits.dtype)
        seed[:, category] = 1
        grads = tape.backward(seed, output=res.logits)
        for s in sites:
            a = res.trace[s].data.astype(np.float64)
            g = grads.get(s.key)
            if g is None:
                continue
            prod = (a - cache[s]) * g
            # sum over tokens and, for heads, the head dimension
            per_unit = prod.sum(axis=1)
            if s.tag in HEAD_TAGS:
                per_unit = per_unit.sum(axis=-1)
            totals[s] += np.abs(per_unit).sum(axis=0)
    return {s: v / len(images) for s, v in totals.items()}


def rank_units(scores: Mapping[HookSite, np.ndarray], k: int) -> list[NeuronId]:
    """Top-k units of a site group, by descending score; ties by (site order, unit index)."""
    ids = [NeuronId(s, u) for s, v in scores.items() for u in range(len(v))]
    flat = np.concatenate([np.asarray(v, np.float64) for v in scores.values()]) if ids else np.zeros(0)
    if not 1 <= k <= len(ids):
        raise ValueError(f"K={k} outside [1, {len(ids)}]")
    order = np.lexsort((np.arange(len(flat)), -flat))
    return [ids[i] for i in order[:k]]


def rank_neurons_attribution_patching(model: VitModel, images: np.ndarray, category: int, cache: MeanCache,
                                      k: int, sites: Sequence[HookSite]) -> list[NeuronId]:
    return rank_units(attribution_scores(model, images, category, cache, sites), k)


# -- metrics ---------------------------------------------------------------------


def normalized_impact(f_c, f_c_ablated, logit_norm):
    """(f_c − f_c^abl) / ‖f‖₂, elementwise."""
    return (np.asarray(f_c, np.float64) - np.asarray(f_c_ablated, np.float64)) / np.asarray(logit_norm, np.float64)


def ablation_impact(model: VitModel, images: np.ndarray, category: int, neurons: Iterable[NeuronId],
                    cache: MeanCache, batch_size: int = 256) -> float:
    """Mean of (f_c − f_c^abl) / ‖f‖₂ with all listed units mean-ablated together."""
    neurons = list(neurons)
    if not neurons:
        return 0.0
    intervention = mean_ablation(model, neurons, cache)
    clean, _ = capture(model, images, (), batch_size)
    abl, _ = capture(model, images, (), batch_size, intervention=intervention)
    clean = clean.astype(np.float64)
    norm = np.linalg.norm(clean, axis=1)
    return float(np.mean(normalized_impact(clean[:, category], abl[:, category], norm)))


def selectivity_auroc(activations, labels) -> np.ndarray | float:
    """AUROC of activations as a score for binary labels; ties count 1/2.

    ``activations`` is (n,) or (n, units); returns a scalar or a per-unit array.
    """
    acts = np.asarray(activations, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("AUROC needs both positive and negative labels")
    if len(labels) != len(acts):
        raise ValueError("activation and label counts differ")
    out = kernels.auroc_columns(np.ascontiguousarray(acts.reshape(len(acts), -1)), labels)
    return float(out[0]) if acts.ndim == 1 else out


def auroc_bruteforce(activations, labels) -> float:
    """Pairwise-count AUROC; O(n_pos * n_neg), used as a test oracle."""
    a = np.asarray(activations, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = a[y], a[~y]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg)))


def coefficient_of_variation(m) -> tuple[np.ndarray, np.ndarray]:
    """Population σ / |μ| per column; returns (cv, defined) with cv = nan where μ = 0."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if len(m) < 2:
        raise ValueError("class variance needs at least two images")
    mu = m.mean(axis=0)
    sd = m.std(axis=0)
    defined = mu != 0
    cv = np.full(mu.shape, np.nan)
    np.divide(sd, np.abs(mu), out=cv, where=defined)
    # constant columns give σ = 0 exactly even when the mean has rounding error
    cv[defined & np.all(m == m[:1], axis=0)] = 0.0
    return cv, defined


def label_entropy(m, labels, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Entropy (nats) of P_n(c) ∝ Σ_{x∈D_c} max(m_n(x), 0); returns (H, defined)."""
    m = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    if m.ndim == 1:
        m = m[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    mass = np.zeros((num_classes, m.shape[1]))
    np.add.at(mass, labels, m)
    return entropy_of_mass(mass)


def entropy_of_mass(mass: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise Shannon entropy of non-negative class masses (classes on axis 0)."""
    mass = np.asarray(mass, dtype=np.float64)
    total = mass.sum(axis=0)
    defined = total > 0
    p = np.divide(mass, total, out=np.zeros_like(mass), where=defined)
    logp = np.log(p, out=np.zeros_like(p), where=p > 0)
    h = -(p * logp).sum(axis=0)
    # clamp rounding so the range [0, ln C] holds exactly
    h = np.clip(h, 0.0, math.log(mass.shape[0])) + 0.0
    # uniform over its support: exactly ln(support size), so one-hot gives 0 and uniform ln C
    support = (mass > 0).sum(axis=0)
    peak = mass.max(axis=0)
    flat = defined & np.all((mass == 0) | (mass == peak), axis=0)
    h[flat] = np.log(support[flat])
    h[~defined] = np.nan
    return h, defined


# -- report ----------------------------------------------------------------------


@dataclass
class MetricRow:
    model: str
    sparsity: float
    category: int
    block: int
    site: str
    unit: int
    metric: str
    value: float
    flag: str = ""


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def add(self, **kw) -> None:
        self.rows.append(MetricRow(**kw))

    def extend(self, other: "MetricReport") -> None:
        self.rows.extend(other.rows)

    def sorted(self) -> "MetricReport":
        key = lambda r: (r.model, r.sparsity, r.category, r.block, r.site, r.metric, r.unit)
        return MetricReport(sorted(self.rows, key=key))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r.model, repr(float(r.sparsity)), r.category, r.block, r.site, r.unit, r.metric,
                        repr(float(r.value)), r.flag])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rd = csv.DictReader(io.StringIO(text))
        if tuple(rd.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"unexpected columns {rd.fieldnames}")
        return cls([
            MetricRow(r["model"], float(r["sparsity"]), int(r["category"]), int(r["block"]), r["site"],
                      int(r["unit"]), r["metric"], float(r["value"]), r["flag"])
            for r in rd
        ])


def _emit_metric(report: MetricReport, values, defined, base: dict, neurons: Sequence[NeuronId], metric: str):
    for n, v, ok in zip(neurons, values, defined):
        report.add(**base, block=n.site.block, site=n.site.tag, unit=n.unit, metric=metric,
                   value=float(v) if ok else math.nan, flag="" if ok else UNDEFINED)


def neuron_report(
    model: VitModel,
    dataset: Dataset,
    task: BinaryTask,
    cache: MeanCache,
    blocks: Sequence[int],
    tags: Sequence[str] = ("mlp_act",),
    k: int = 50,
    model_tag: str = "dense",
    sparsity: float = 0.0,
) -> MetricReport:
    """All four metrics for the top-K attribution-patching units of each block.

    The task's images (positives + negatives) drive ranking, ablation impact
    and selectivity; class variance uses the positives (D_c) and label
    entropy the whole dataset.
    """
    report = MetricReport()
    c = task.category
    cfg = model.config
    task_images = dataset.images[task.indices]
    targets = task.targets
    base = dict(model=model_tag, sparsity=float(sparsity), category=int(c))
    for b in blocks:
        sites = [HookSite(b, t) for t in tags]
        width = sum(site_units(cfg, t) for t in tags)
        top = rank_neurons_attribution_patching(model, task_images, c, cache, min(k, width), sites)
        report.add(**base, block=b, site="+".join(tags), unit=-1, metric="ablation_impact",
                   value=ablation_impact(model, task_images, c, top, cache))
        _, task_acts = capture(model, task_images, sites)
        _, all_acts = capture(model, dataset.images, sites)
        pos = targets == 1
        for s in sites:
            chosen = [n for n in top if n.site == s]
            if not chosen:
                continue
            units = [n.unit for n in chosen]
            auc = selectivity_auroc(cls_activation(task_acts[s], s.tag)[:, units], targets)
            _emit_metric(report, auc, np.ones(len(units), bool), base, chosen, "selectivity")
            m_task = max_patch_activation(task_acts[s], s.tag)[:, units]
            cv, ok = coefficient_of_variation(m_task[pos])
            _emit_metric(report, cv, ok, base, chosen, "class_variance")
            m_all = max_patch_activation(all_acts[s], s.tag)[:, units]
            h, ok = label_entropy(m_all, dataset.labels, dataset.num_classes)
            _emit_metric(report, h, ok, base, chosen, "label_entropy")
    return report
