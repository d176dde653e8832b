"""BatchTopK sparse autoencoders on captured activations."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from impact.data import BinaryTask, Dataset
from impact.model.checkpoint import read_archive, write_archive
from impact.model.vit import HookSite, VitModel, capture, forward_from
from impact import neurons as nm
from impact.numerics import OptimizerState, optimizer_step

TOKENS = ("cls", "patch", "all")


@dataclass
class SaeModel:
    W_enc: np.ndarray  # (latents, d)
    b_enc: np.ndarray  # (latents,)
    W_dec: np.ndarray  # (d, latents), unit-norm columns
    b_dec: np.ndarray  # (d,)
    k: int
    expansion: int
    site: str = ""
    tokens: str = "cls"

    @property
    def latents(self) -> int:
        return self.W_enc.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_enc.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"W_enc": self.W_enc, "b_enc": self.b_enc, "W_dec": self.W_dec, "b_dec": self.b_dec}

    def copy(self) -> "SaeModel":
        return replace(self, **{n: a.copy() for n, a in self.params().items()})


@dataclass
class SaeQuality:
    nmse: float
    fve: float
    dead_fraction: float
    active: int


@dataclass
class SaeHistory:
    loss: list[float] = field(default_factory=list)
    quality: list[SaeQuality] = field(default_factory=list)


def init_sae(input_dim: int, expansion: int, k: int, seed: int, data_mean: np.ndarray | None = None,
             site: str = "", tokens: str = "cls") -> SaeModel:
    if expansion < 1:
        raise ValueError("expansion must be >= 1")
    latents = expansion * input_dim
    if not 1 <= k <= latents:
        raise ValueError(f"k={k} outside [1, {latents}]")
    rng = np.random.default_rng(seed)
    W_dec = rng.standard_normal((input_dim, latents)).astype(np.float32)
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    b_dec = np.zeros(input_dim, np.float32) if data_mean is None else np.asarray(data_mean, np.float32).copy()
    return SaeModel(W_dec.T.copy(), np.zeros(latents, np.float32), W_dec, b_dec, k, expansion, site, tokens)


def pre_activations(sae: SaeModel, x: np.ndarray) -> np.ndarray:
    return x @ sae.W_enc.T + sae.b_enc


def batchtopk_select(z: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k*B largest entries of z (B, L) across the whole batch.

    Ties at the threshold go to the lower latent index, then the lower sample index.
    """
    B, L = z.shape
    n = k * B
    if n > z.size:
        raise ValueError(f"k*B = {n} exceeds the {z.size} latent slots")
    if n == z.size:
        return np.ones(z.shape, dtype=bool)
    flat = z.ravel()
    thresh = np.partition(flat, flat.size - n)[flat.size - n]
    keep = z > thresh
    need = n - int(keep.sum())
    if need:
        # entries equal to the threshold, in (latent, sample) order
        ties = np.argwhere((z == thresh).T)  # rows: (latent, sample)
        chosen = ties[:need]
        keep[chosen[:, 1], chosen[:, 0]] = True
    return keep


def batchtopk_encode(sae: SaeModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float32))
    if len(x) < 1:
        raise ValueError("empty batch")
    z = pre_activations(sae, x)
    return np.where(batchtopk_select(z, sae.k), z, 0).astype(np.float32)


def decode(sae: SaeModel, f: np.ndarray) -> np.ndarray:
    return f @ sae.W_dec.T + sae.b_dec


def reconstruct(sae: SaeModel, x: np.ndarray, batch_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Latents and reconstruction; by default the whole input is one BatchTopK batch."""
    if batch_size is None:
        f = batchtopk_encode(sae, x)
    else:
        f = np.concatenate([batchtopk_encode(sae, x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
    return f, decode(sae, f)


def nmse(x: np.ndarray, x_hat: np.ndarray) -> float:
    x = np.asarray(x, np.float64)
    denom = float(np.square(x - x.mean(axis=0)).sum())
    if denom == 0:
        raise ValueError("zero-variance activations")
    return float(np.square(x - np.asarray(x_hat, np.float64)).sum()) / denom


def sae_quality(sae: SaeModel, x: np.ndarray, batch_size: int | None = None) -> SaeQuality:
    if len(x) == 0:
        raise ValueError("empty evaluation set")
    f, x_hat = reconstruct(sae, x, batch_size)
    e = nmse(x, x_hat)
    alive = int((f != 0).any(axis=0).sum())
    return SaeQuality(nmse=e, fve=1.0 - e, dead_fraction=1.0 - alive / sae.latents, active=alive)


@dataclass
class SaeSettings:
    k: int = 8
    expansion: int = 8
    epochs: int = 60
    batch_size: int = 128
    lr: float = 2e-3
    seed: int = 0


def _normalize_decoder(sae: SaeModel) -> None:
    sae.W_dec /= np.maximum(np.linalg.norm(sae.W_dec, axis=0, keepdims=True), 1e-12)


def sae_loss_and_grads(sae: SaeModel, x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean over the batch of ‖x − x̂‖² and its gradients (selection held fixed)."""
    z = pre_activations(sae, x)
    sel = batchtopk_select(z, sae.k)
    f = np.where(sel, z, 0).astype(z.dtype)
    err = decode(sae, f) - x
    B = len(x)
    loss = float(np.square(err.astype(np.float64)).sum() / B)
    g_out = (2.0 / B) * err
    g_f = (g_out @ sae.W_dec) * sel
    return loss, {
        "W_dec": g_out.T @ f,
        "b_dec": g_out.sum(axis=0),
        "W_enc": g_f.T @ x,
        "b_enc": g_f.sum(axis=0),
    }


def train_sae(x: np.ndarray, settings: SaeSettings | None = None, site: str = "",
              tokens: str = "cls") -> tuple[SaeModel, SaeHistory]:
    """Adam on reconstruction MSE; decoder columns renormalized after every step."""
    s = settings or SaeSettings()
    x = np.ascontiguousarray(x, dtype=np.float32)
    if len(x) < s.batch_size:
        raise ValueError(f"need at least batch_size={s.batch_size} activations, got {len(x)}")
    if np.all(x == x[:1]):
        raise ValueError("degenerate activations (all identical)")
    sae = init_sae(x.shape[1], s.expansion, s.k, s.seed, x.mean(axis=0), site, tokens)
    history = SaeHistory()
    if s.epochs == 0:
        return sae, history
    rng = np.random.default_rng(s.seed + 1)
    state = OptimizerState(kind="adamw", lr=s.lr, weight_decay=0.0)
    n_full = len(x) - len(x) % s.batch_size
    for _ in range(s.epochs):
        order = rng.permutation(len(x))[:n_full]
        losses = []
        for i in range(0, n_full, s.batch_size):
            loss, grads = sae_loss_and_grads(sae, x[order[i : i + s.batch_size]])
            new, state = optimizer_step(state, sae.params(), grads)
            sae.W_enc, sae.b_enc, sae.W_dec, sae.b_dec = new["W_enc"], new["b_enc"], new["W_dec"], new["b_dec"]
            _normalize_decoder(sae)
            losses.append(loss)
        history.loss.append(float(np.mean(losses)))
    history.quality.append(sae_quality(sae, x))
    return sae, history


# -- activations and checkpoints -----------------------------------------------------


def select_tokens(act: np.ndarray, tokens: str) -> np.ndarray:
    """(B, T, d) -> rows fed to the SAE."""
    if tokens == "cls":
        return act[:, 0]
    if tokens == "patch":
        return act[:, 1:].reshape(-1, act.shape[-1])
    if tokens == "all":
        return act.reshape(-1, act.shape[-1])
    raise ValueError(f"tokens must be one of {TOKENS}")


def default_site(model: VitModel) -> HookSite:
    return HookSite(model.config.depth - 1, "resid")


def collect_activations(model: VitModel, images: np.ndarray, site: HookSite | None = None,
                        tokens: str = "cls") -> np.ndarray:
    site = site or default_site(model)
    _, acts = capture(model, images, [site])
    return select_tokens(acts[site], tokens)


def save_sae(sae: SaeModel, path) -> None:
    meta = {"kind": "sae", "k": sae.k, "expansion": sae.expansion, "site": sae.site, "tokens": sae.tokens}
    write_archive(path, sae.params(), meta)


def load_sae(path) -> SaeModel:
    t, meta = read_archive(path)
    if meta.get("kind") != "sae":
        raise ValueError("archive does not hold an SAE")
    return SaeModel(t["W_enc"], t["b_enc"], t["W_dec"], t["b_dec"], int(meta["k"]), int(meta["expansion"]),
                    meta["site"], meta["tokens"])


# -- feature metrics ----------------------------------------------------------------


def latent_ablation_logits(model: VitModel, sae: SaeModel, resid: np.ndarray, site: HookSite,
                           latent: int, f: np.ndarray) -> np.ndarray:
    """Logits after zeroing one latent on the CLS token.

    The SAE error term is preserved: x' = x + decode(f_abl) − decode(f), which
    is x − f_j · W_dec[:, j].
    """
    delta = -np.outer(f[:, latent], sae.W_dec[:, latent]).astype(resid.dtype)
    patched = resid.copy()
    patched[:, 0] += delta
    return forward_from(model, patched, site.block + 1).data


def sae_feature_metrics(model: VitModel, sae: SaeModel, dataset: Dataset, tasks: Sequence[BinaryTask],
                        model_tag: str = "dense", sparsity: float = 0.0,
                        site: HookSite | None = None) -> nm.MetricReport:
    """Ablation impact (zero ablation), selectivity, class variance and label entropy per latent."""
    site = site or default_site(model)
    if sae.site and sae.site != site.key:
        raise ValueError(f"SAE trained on {sae.site}, asked to analyze {site.key}")
    if site.tag != "resid" or sae.tokens != "cls":
        raise ValueError("feature metrics support CLS-token SAEs on the residual stream")
    logits, acts = capture(model, dataset.images, [site])
    resid = acts[site]
    f = batchtopk_encode(sae, resid[:, 0])
    f_all = f.astype(np.float64)
    clean = logits.astype(np.float64)
    norm = np.linalg.norm(clean, axis=1)
    report = nm.MetricReport()
    latents = list(range(sae.latents))
    ids = [nm.NeuronId(site, j) for j in latents]
    # entropy is category-independent, computed once over the whole dataset
    h, h_ok = nm.label_entropy(np.maximum(f_all, 0), dataset.labels, dataset.num_classes)
    for task in tasks:
        c = task.category
        base = dict(model=model_tag, sparsity=float(sparsity), category=int(c))
        idx = task.indices
        impact = np.zeros(sae.latents)
        for j in np.flatnonzero((f[idx] != 0).any(axis=0)):
            abl = latent_ablation_logits(model, sae, resid[idx], site, int(j), f[idx])
            impact[j] = np.mean((clean[idx, c] - abl[:, c]) / norm[idx])
        nm._emit_metric(report, impact, np.ones(sae.latents, bool), base, ids, "sae_ablation_impact")
        auc = nm.selectivity_auroc(f_all[idx], task.targets)
        nm._emit_metric(report, auc, np.ones(sae.latents, bool), base, ids, "sae_selectivity")
        cv, ok = nm.coefficient_of_variation(f_all[task.positives])
        nm._emit_metric(report, cv, ok, base, ids, "sae_class_variance")
        nm._emit_metric(report, h, h_ok, base, ids, "sae_label_entropy")
    return report


# -- sweep ----------------------------------------------------------------------------

SWEEP_COLUMNS = ("model", "tokens", "k", "expansion", "fve", "nmse", "active", "dead_pct")


def sweep(train_x: dict[str, np.ndarray], val_x: dict[str, np.ndarray], ks: Sequence[int],
          expansions: Sequence[int], base: SaeSettings, model_tag: str = "dense") -> str:
    """Grid over (tokens, k, expansion); returns CSV text with one row per configuration.

    ``train_x`` / ``val_x`` map a token selection ("cls", "patch", "all") to activations.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for tokens in train_x:
        for k in ks:
            for e in expansions:
                sae, _ = train_sae(train_x[tokens], replace(base, k=k, expansion=e), tokens=tokens)
                q = sae_quality(sae, val_x[tokens])
                w.writerow([model_tag, tokens, k, e, repr(q.fve), repr(q.nmse), q.active,
                            repr(100.0 * q.dead_fraction)])
    return buf.getvalue()
