from __future__ import annotations

import numpy as np
import pytest

from conftest import check_grads
from impact import circuits as C
from impact.data import Dataset, make_binary_task
from impact.model import HookSite, ModelConfig, TrainSettings, all_sites, forward, init_model, train
from impact.neurons import compute_mean_cache
from impact.numerics import Tensor, ops
from impact.pruning import prune

SMALL = ModelConfig(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2, mlp_ratio=2, num_classes=3,
                    layerscale_init=0.5)


def _toy_data(seed: int, per_class: int) -> Dataset:
    """Three classes: bright top half, bright bottom half, bright everywhere."""
    rng = np.random.default_rng(seed)
    y = np.tile(np.arange(3), per_class)
    x = rng.normal(0.1, 0.05, (len(y), 1, 8, 8))
    x[y == 0, :, :4] += 0.8
    x[y == 1, :, 4:] += 0.8
    x[y == 2] += 0.8
    return Dataset(np.clip(x, 0, 1).astype(np.float32), y, 3)


@pytest.fixture(scope="module")
def trained():
    tr = _toy_data(0, 60)
    model, _ = train(SMALL, tr.images, tr.labels, TrainSettings(epochs=4, batch_size=16, lr=5e-3, warmup_steps=5))
    return model, tr, compute_mean_cache(model, tr.images)


@pytest.fixture(scope="module")
def fresh():
    m = init_model(SMALL)
    x = np.random.default_rng(0).random((6, 1, 8, 8), dtype=np.float32)
    return m, x, compute_mean_cache(m, x)


def test_all_ones_mask_is_bit_exact(fresh):
    m, x, cache = fresh
    a = C.masked_forward(m, C.full_mask(m, 1.0), cache, x)
    assert a.tobytes() == forward(m, x).logits.data.tobytes()


def test_all_zeros_mask_equals_mean_substitution(fresh):
    m, x, cache = fresh
    manual = {s: (lambda t, s=s: Tensor(np.broadcast_to(cache[s], t.shape).copy())) for s in all_sites(SMALL)}
    expected = forward(m, x, intervention=manual).logits.data
    np.testing.assert_allclose(C.masked_forward(m, C.full_mask(m, 0.0), cache, x), expected, rtol=0, atol=1e-6)
    # with every site at its mean the output no longer depends on the input
    out = C.masked_forward(m, C.full_mask(m, 0.0), cache, x)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-6)


def test_half_masked_site_matches_manual_blend(fresh):
    m, x, cache = fresh
    site = HookSite(1, "mlp_act")
    binary = C.full_mask(m, 1.0)
    binary[site] = (np.arange(SMALL.mlp_dim) % 2).astype(np.float32)
    keep = binary[site]

    def manual(t):
        return Tensor(keep * t.data + (1 - keep) * cache[site])

    expected = forward(m, x, intervention={site: manual}).logits.data
    np.testing.assert_allclose(C.masked_forward(m, binary, cache, x), expected, rtol=1e-6, atol=1e-6)


def test_head_masks_cover_whole_head(fresh):
    m, x, cache = fresh
    site = HookSite(0, "v")
    binary = C.full_mask(m, 1.0)
    binary[site] = np.array([0.0, 1.0], np.float32)
    res = forward(m, x, hooks=[site], intervention=C.mask_intervention(m, binary, cache))
    v = res.trace[site].data
    np.testing.assert_allclose(v[:, :, 0], np.broadcast_to(cache[site][0], v[:, :, 0].shape), atol=1e-7)


def test_mask_validation(fresh):
    m, x, cache = fresh
    with pytest.raises(ValueError):
        C.mask_intervention(m, {HookSite(0, "q"): np.ones(3)}, cache)
    part = compute_mean_cache(m, x, [HookSite(0, "q")])
    with pytest.raises(KeyError):
        C.mask_intervention(m, {HookSite(1, "q"): np.ones(2)}, part)


def test_readout_and_binary_accuracy():
    logits = np.array([[1.0, 3.0, 2.0], [5.0, 0.0, 1.0]])
    r = C.binary_readout(Tensor(logits), 1).data
    np.testing.assert_array_equal(r, [[2.0, 3.0], [5.0, 0.0]])
    np.testing.assert_array_equal(C.binary_predictions(logits, 1), [1, 0])
    assert C.binary_accuracy(logits, np.array([1, 1]), 1) == 0.5
    check_grads(lambda z: C.binary_readout(z, 2), {"z": np.random.default_rng(0).standard_normal((4, 3))})


def test_ncq_examples():
    assert C.ncq(1.0, 1.0, 10, 10) == 0.0
    assert C.ncq(1.0, 1.0, 5, 10) == 0.5
    assert C.ncq(0.9, 1.0, 2, 10) == pytest.approx(0.72)
    assert C.ncq(0.95, 0.9, 0, 10) == 1.0
    for bad in ((1.0, 0.0, 1, 2), (1.0, 1.0, 3, 2), (1.0, 1.0, 0, 0)):
        with pytest.raises(ValueError):
            C.ncq(*bad)


def _brute_edges(model, binary):
    cfg = model.config
    dh = cfg.head_dim
    active = total = 0
    for b in range(cfg.depth):
        on = lambda t: binary[HookSite(b, t)]
        W = model.params[f"blocks.{b}.attn.qkv.weight"]
        for r in range(W.shape[0]):
            part, head = divmod(r, cfg.embed_dim)
            row_on = on(("q", "k", "v")[part])[head // dh]
            for c in range(W.shape[1]):
                total += 1
                active += bool(W[r, c] != 0 and row_on and on("norm1")[c])
        for name, rows, cols in (("attn.proj.weight", lambda r: on("attn_out")[r], lambda c: on("v")[c // dh]),
                                 ("mlp.fc1.weight", lambda r: on("mlp_act")[r], lambda c: on("norm2")[c]),
                                 ("mlp.fc2.weight", lambda r: on("mlp_out")[r], lambda c: on("mlp_act")[c])):
            W = model.params[f"blocks.{b}.{name}"]
            for r in range(W.shape[0]):
                for c in range(W.shape[1]):
                    total += 1
                    active += bool(W[r, c] != 0 and rows(r) and cols(c))
        for h in range(cfg.heads):
            total += 1
            active += bool(on("q")[h] and on("k")[h])
    return active, total


def test_edge_counts_match_enumeration(fresh):
    m, x, _ = fresh
    sparse = prune(m, 0.5, "magnitude")
    rng = np.random.default_rng(3)
    binary = {s: (rng.random(v.shape) < 0.6).astype(np.float32) for s, v in C.full_mask(m).items()}
    for model in (m, sparse):
        assert C.edge_counts(model, binary) == _brute_edges(model, binary)
    assert C.edge_fraction(m, C.full_mask(m, 1.0)) == 1.0
    assert C.edge_fraction(m, C.full_mask(m, 0.0)) == 0.0
    assert C.edge_fraction(sparse, C.full_mask(m, 1.0)) < 0.55


def test_init_mask_distribution(fresh):
    m, _, _ = fresh
    mask = C.init_mask(m, C.CircuitSettings(seed=1))
    vals = np.concatenate(list(mask.logits.values()))
    assert abs(vals.mean() - 0.5) < 0.01 and 0.005 < vals.std() < 0.015
    assert mask.n_active == mask.n_total


def test_loss_gradient_uses_ste_surrogate(fresh):
    m, x, cache = fresh
    mask = C.init_mask(m, C.CircuitSettings(k_pen=0.0))
    site = HookSite(1, "mlp_act")
    _, grads = C.circuit_loss_and_grads(m, mask, cache, x[:4], np.array([1, 0, 1, 0]), 2)
    # d loss / d m = d loss / d m̂ · σ'(m); check one unit by differencing the blend weight directly
    u = 3
    s = 1 / (1 + np.exp(-mask.logits[site][u]))

    def loss_with(hat_u):
        hats = {k: np.ones_like(v) for k, v in mask.logits.items()}
        hats[site] = hats[site].copy()
        hats[site][u] = hat_u
        logits = forward(m, x[:4], intervention=C.mask_intervention(m, hats, cache)).logits
        return float(ops.cross_entropy(C.binary_readout(logits, 2), np.array([1, 0, 1, 0])).data)

    h = 1e-2
    d_hat = (loss_with(1 + h) - loss_with(1 - h)) / (2 * h)
    assert grads[site][u] == pytest.approx(d_hat * s * (1 - s), rel=2e-2, abs=1e-6)


def test_penalty_only_gradient(fresh):
    m, x, cache = fresh
    mask = C.init_mask(m, C.CircuitSettings())
    z = C.full_mask(m, 0.0)
    targets = np.array([1, 0, 1, 0])
    _, g0 = C.circuit_loss_and_grads(m, C.CircuitMask(dict(mask.logits), 1.0, 0.0), cache, x[:4], targets, 0)
    _, g1 = C.circuit_loss_and_grads(m, C.CircuitMask(dict(mask.logits), 1.0, 0.5), cache, x[:4], targets, 0)
    site = HookSite(0, "norm2")
    s = 1 / (1 + np.exp(-mask.logits[site].astype(np.float64)))
    np.testing.assert_allclose(g1[site] - g0[site], 0.5 * s * (1 - s), rtol=1e-4, atol=1e-7)
    assert z  # all sites present


# -- optimization ---------------------------------------------------------------------


def _task(ds, c, seed=0):
    return make_binary_task(ds, c, seed)


def test_no_penalty_keeps_accuracy(trained):
    model, ds, cache = trained
    task = _task(ds, 0)
    s = C.CircuitSettings(k_pen=0.0, epochs=2, seed=3)
    res = C.optimize_task(model, ds.images, task, cache, s)
    init_bin = C.init_mask(model, s).binary()
    x, y = ds.images[task.indices], task.targets
    init_acc = C.binary_accuracy(C.masked_forward(model, init_bin, cache, x), y, 0)
    assert res.acc_circuit >= init_acc
    assert 0 <= res.ncq <= 1


def test_huge_penalty_collapses_circuit(trained):
    model, ds, cache = trained
    res = C.optimize_task(model, ds.images, _task(ds, 1), cache, C.CircuitSettings(lr=0.1, k_pen=1e3, epochs=3, seed=2))
    assert res.node_fraction < 0.05
    assert abs(res.acc_circuit - 0.5) <= 0.1


def test_optimization_is_reproducible_and_csv(trained):
    model, ds, cache = trained
    s = C.CircuitSettings(epochs=2, seed=7)
    a = C.optimize_task(model, ds.images, _task(ds, 2), cache, s)
    b = C.optimize_task(model, ds.images, _task(ds, 2), cache, s)
    assert a.row() == b.row() and a.loss == b.loss
    assert all(a.mask[k].tobytes() == b.mask[k].tobytes() for k in a.mask)
    text = C.circuit_csv([a])
    assert text.splitlines()[0] == "category,node_pct,size_pct,acc,ablated_acc,ncq,seed"
    assert C.circuit_csv([]).count("\n") == 1


def test_complement_of_full_matches_mean_model(trained):
    model, ds, cache = trained
    task = _task(ds, 0)
    x, y = ds.images[task.indices], task.targets
    acc_c, acc_f, acc_a = C.evaluate_circuit(model, C.full_mask(model, 1.0), cache, x, y, 0)
    assert acc_c == acc_f
    assert acc_a == C.binary_accuracy(C.masked_forward(model, C.full_mask(model, 0.0), cache, x), y, 0)


def test_task_too_small(trained):
    model, ds, cache = trained
    with pytest.raises(ValueError):
        C.optimize_circuit(model, ds.images[:3], np.array([1, 0, 0]), 0, cache)
