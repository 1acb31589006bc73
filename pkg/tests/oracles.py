"""Independent reference computations used as test oracles.

Everything here is written with explicit scalar loops in float64 and shares
no code with the package.
"""

import math

import numpy as np


def conv_naive(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, ci, k, _ = w.shape
    assert ci == c
    hp, wp = h + 2 * pad, wd + 2 * pad
    xp = [[[0.0] * wp for _ in range(hp)] for _ in range(c)]
    for ch in range(c):
        for y in range(h):
            for xx in range(wd):
                xp[ch][y + pad][xx + pad] = float(x[ch, y, xx])
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for y in range(ho):
            for xx in range(wo):
                acc = float(b[oc])
                for ch in range(c):
                    for dy in range(k):
                        for dx in range(k):
                            acc += xp[ch][y * stride + dy][xx * stride + dx] * float(w[oc, ch, dy, dx])
                out[oc, y, xx] = acc
    return out


def maxpool_naive(x, k, stride):
    c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((c, ho, wo), dtype=x.dtype)
    for ch in range(c):
        for y in range(ho):
            for xx in range(wo):
                best = -math.inf
                for dy in range(k):
                    for dx in range(k):
                        best = max(best, x[ch, y * stride + dy, xx * stride + dx])
                out[ch, y, xx] = best
    return out


def lrn_naive(a, k, n, alpha, beta):
    """Direct evaluation with the sum bounds max(0, i - n/2) .. min(N - 1, i + n/2)."""
    N, h, w = a.shape
    out = np.zeros((N, h, w))
    for i in range(N):
        lo, hi = max(0, i - n // 2), min(N - 1, i + n // 2)
        for y in range(h):
            for x in range(w):
                s = 0.0
                for j in range(lo, hi + 1):
                    s += float(a[j, y, x]) ** 2
                out[i, y, x] = float(a[i, y, x]) / (k + alpha * s) ** beta
    return out


def dot_naive(w, x, b):
    return np.array([sum(float(w[r, c]) * float(x[c]) for c in range(w.shape[1])) + float(b[r])
                     for r in range(w.shape[0])])


def central_diff(f, x, h=1e-3):
    """Gradient of scalar ``f`` at float64 array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def softmax_ref(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]
