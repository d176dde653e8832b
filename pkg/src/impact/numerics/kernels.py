"""Row-wise kernels for layernorm, softmax, GELU and AUROC.

Kernels come as a loop version compiled with numba (suffix ``_nb``) and a
vectorised numpy version (suffix ``_np``). The unsuffixed public names are
bound to one or the other according to :data:`impact._accel.USE_NUMBA`.
Both paths accumulate row statistics in float64 and return arrays in the
input dtype. Softmax forward is numpy-only (exp-bound, see below).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special, stats

from impact._accel import HAVE_NUMBA, USE_NUMBA, njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# numba loop kernels
# --------------------------------------------------------------------------


@njit
def layernorm_fwd_nb(x, w, b, eps):
    n, d = x.shape
    y = np.empty_like(x)
    mean = np.empty(n, dtype=np.float64)
    rstd = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        v = 0.0
        for j in range(d):
            t = x[i, j] - mu
            v += t * t
        r = 1.0 / math.sqrt(v / d + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * w[j] + b[j]
    return y, mean, rstd


@njit
def layernorm_bwd_nb(g, x, mean, rstd, w):
    n, d = x.shape
    gx = np.empty_like(x)
    gw = np.zeros(d, dtype=np.float64)
    gb = np.zeros(d, dtype=np.float64)
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * r
            gxh = g[i, j] * w[j]
            s1 += gxh
            s2 += gxh * xh
            gw[j] += g[i, j] * xh
            gb[j] += g[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            xh = (x[i, j] - mu) * r
            gx[i, j] = r * (g[i, j] * w[j] - s1 - xh * s2)
    return gx, gw, gb


@njit
def softmax_bwd_nb(y, g):
    n, d = y.shape
    gx = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            gx[i, j] = y[i, j] * (g[i, j] - s)
    return gx


# Rational approximation of erf on [-4, 4] (|error| < 7e-8), used for float32
# GELU so the loop has no transcendental calls and vectorises. float64 inputs
# take the scipy erf path instead.
_EA = (-1.60960333262415e-02, -2.95459980854025e-03, -7.34990630326855e-04, -5.69250639462346e-05,
       -2.10102402082508e-06, 2.77068142495902e-08, -2.72614225801306e-10)
_EB = (-1.42647390514189e-02, -7.37332916720468e-03, -1.68282697438203e-03, -2.13374055278905e-04,
       -1.45660718464996e-05)
# float32 copies so the compiled loops stay in single precision
A1, A3, A5, A7, A9, A11, A13 = (np.float32(a) for a in _EA)
B0, B2, B4, B6, B8 = (np.float32(b) for b in _EB)
_F0, _F1, _F2, _F3, _F4, _F5, _F6 = (np.float32(v) for v in range(7))
_HALF = np.float32(0.5)
_C = np.float32(_INV_SQRT2)


@njit(fastmath=True)
def _erf_poly(z):
    z = min(max(z, -_F4), _F4)
    z2 = z * z
    p = ((((((A13 * z2 + A11) * z2 + A9) * z2 + A7) * z2 + A5) * z2 + A3) * z2 + A1) * z
    q = (((B8 * z2 + B6) * z2 + B4) * z2 + B2) * z2 + B0
    return p / q


@njit(fastmath=True)
def _erf_poly_grad(z):
    inside = _F1 if (z > -_F4 and z < _F4) else _F0
    z = min(max(z, -_F4), _F4)
    z2 = z * z
    P = (((((A13 * z2 + A11) * z2 + A9) * z2 + A7) * z2 + A5) * z2 + A3) * z2 + A1
    dP = ((((_F6 * A13 * z2 + _F5 * A11) * z2 + _F4 * A9) * z2 + _F3 * A7) * z2 + _F2 * A5) * z2 + A3
    Q = (((B8 * z2 + B6) * z2 + B4) * z2 + B2) * z2 + B0
    dQ = ((_F4 * B8 * z2 + _F3 * B6) * z2 + _F2 * B4) * z2 + B2
    return inside * ((P + _F2 * z2 * dP) * Q - _F2 * z2 * P * dQ) / (Q * Q)


@njit(fastmath=True)
def gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = _HALF * v * (_F1 + _erf_poly(v * _C))
    return out.reshape(x.shape)


@njit(fastmath=True)
def gelu_bwd_nb(x, g):
    flat = x.ravel()
    gf = g.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        z = v * _C
        out[i] = gf[i] * (_HALF * (_F1 + _erf_poly(z)) + _HALF * v * _C * _erf_poly_grad(z))
    return out.reshape(x.shape)


@njit
def auroc_columns_nb(scores, labels):
    # scores: (n, k); labels: (n,) bool. Mann-Whitney U with midranks.
    n, k = scores.shape
    n_pos = 0
    for i in range(n):
        if labels[i]:
            n_pos += 1
    n_neg = n - n_pos
    out = np.empty(k, dtype=np.float64)
    for c in range(k):
        col = scores[:, c]
        order = np.argsort(col, kind="mergesort")
        rank_sum = 0.0
        i = 0
        while i < n:
            j = i
            while j + 1 < n and col[order[j + 1]] == col[order[i]]:
                j += 1
            mid = 0.5 * (i + j) + 1.0
            for t in range(i, j + 1):
                if labels[order[t]]:
                    rank_sum += mid
            i = j + 1
        u = rank_sum - n_pos * (n_pos + 1) / 2.0
        out[c] = u / (n_pos * n_neg)
    return out


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------


def layernorm_fwd_np(x, w, b, eps):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1)
    xc = x64 - mean[:, None]
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    y = xc * rstd[:, None] * w + b
    return y.astype(x.dtype), mean, rstd


def layernorm_bwd_np(g, x, mean, rstd, w):
    g64 = g.astype(np.float64)
    xh = (x.astype(np.float64) - mean[:, None]) * rstd[:, None]
    gxh = g64 * w
    s1 = gxh.mean(axis=1, keepdims=True)
    s2 = (gxh * xh).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxh - s1 - xh * s2)
    return gx.astype(x.dtype), (g64 * xh).sum(axis=0), g64.sum(axis=0)


def softmax_fwd_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    s = e.sum(axis=1, dtype=np.float64, keepdims=True)
    return e * (1.0 / s).astype(x.dtype)


def softmax_bwd_np(y, g):
    s = (g * y).sum(axis=1, dtype=np.float64, keepdims=True).astype(y.dtype)
    return y * (g - s)


def _erf_poly_np(z):
    z = np.clip(z, -4.0, 4.0)
    z2 = z * z
    p = np.polynomial.polynomial.polyval(z2, _EA) * z
    q = np.polynomial.polynomial.polyval(z2, _EB)
    return p / q


def _erf_poly_grad_np(z):
    inside = np.abs(z) < 4.0
    z = np.clip(z, -4.0, 4.0)
    z2 = z * z
    P = np.polynomial.polynomial.polyval(z2, _EA)
    dP = np.polynomial.polynomial.polyval(z2, [k * a for k, a in enumerate(_EA)][1:])
    Q = np.polynomial.polynomial.polyval(z2, _EB)
    dQ = np.polynomial.polynomial.polyval(z2, [k * b for k, b in enumerate(_EB)][1:])
    return np.where(inside, ((P + 2.0 * z2 * dP) * Q - 2.0 * z2 * P * dQ) / (Q * Q), 0.0)


def gelu_fwd_np(x):
    x64 = x.astype(np.float64)
    erf = special.erf(x64 * _INV_SQRT2) if x.dtype == np.float64 else _erf_poly_np(x64 * _INV_SQRT2)
    return (0.5 * x64 * (1.0 + erf)).astype(x.dtype)


def gelu_bwd_np(x, g):
    x64 = x.astype(np.float64)
    z = x64 * _INV_SQRT2
    if x.dtype == np.float64:
        cdf = 0.5 * (1.0 + special.erf(z))
        pdf = np.exp(-0.5 * x64 * x64) * _INV_SQRT2PI
    else:
        cdf = 0.5 * (1.0 + _erf_poly_np(z))
        pdf = 0.5 * _INV_SQRT2 * _erf_poly_grad_np(z)
    return (g.astype(np.float64) * (cdf + x64 * pdf)).astype(x.dtype)


def auroc_columns_np(scores, labels):
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = stats.rankdata(scores, axis=0, method="average")
    rank_sum = ranks[labels].sum(axis=0)
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


NUMPY_KERNELS = {
    "layernorm_fwd": layernorm_fwd_np,
    "layernorm_bwd": layernorm_bwd_np,
    "softmax_fwd": softmax_fwd_np,
    "softmax_bwd": softmax_bwd_np,
    "gelu_fwd": gelu_fwd_np,
    "gelu_bwd": gelu_bwd_np,
    "auroc_columns": auroc_columns_np,
}

# softmax_fwd has no numba twin: without SVML a scalar exp loop is ~10x slower
# than numpy's vectorised float32 exp (see benchmarks/bench_kernels.py).
NUMBA_KERNELS = {
    "layernorm_fwd": layernorm_fwd_nb,
    "layernorm_bwd": layernorm_bwd_nb,
    "softmax_fwd": softmax_fwd_np,
    "softmax_bwd": softmax_bwd_nb,
    "gelu_fwd": gelu_fwd_nb,
    "gelu_bwd": gelu_bwd_nb,
    "auroc_columns": auroc_columns_nb,
} if HAVE_NUMBA else {}

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def _f32_or_exact(fast, exact):
    def kernel(*args):
        return (exact if args[0].dtype == np.float64 else fast)(*args)

    kernel.__name__ = getattr(fast, "__name__", "kernel")
    return kernel


layernorm_fwd = _ACTIVE["layernorm_fwd"]
layernorm_bwd = _ACTIVE["layernorm_bwd"]
softmax_fwd = _ACTIVE["softmax_fwd"]
softmax_bwd = _ACTIVE["softmax_bwd"]
gelu_fwd = _f32_or_exact(_ACTIVE["gelu_fwd"], gelu_fwd_np)
gelu_bwd = _f32_or_exact(_ACTIVE["gelu_bwd"], gelu_bwd_np)
auroc_columns = _ACTIVE["auroc_columns"]
