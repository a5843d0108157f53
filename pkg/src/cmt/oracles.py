"""Slow 64-bit reference implementations written as explicit loops.

None of these share code with the fast kernels; they exist only to be compared
against them.
"""
from __future__ import annotations

import math

import numpy as np


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def _padded_get(x, b, y, xx, c, pad_top, pad_left):
    y -= pad_top
    xx -= pad_left
    if 0 <= y < x.shape[1] and 0 <= xx < x.shape[2]:
        return x[b, y, xx, c]
    return 0.0


def conv2d(x, kernel, bias, stride=1, padding=(0, 0, 0, 0)):
    """Direct cross-correlation; ``kernel`` is ``[kh, kw, cin, cout]``."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    top, bottom, left, right = padding
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    oh = (h + top + bottom - kh) // stride + 1
    ow = (w + left + right - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for co in range(cout):
                    s = float(bias[co])
                    for di in range(kh):
                        for dj in range(kw):
                            for ci in range(cin):
                                s += _padded_get(x, b, i * stride + di, j * stride + dj, ci, top, left) * kernel[di, dj, ci, co]
                    out[b, i, j, co] = s
    return out


def dwconv2d(x, kernel, bias, stride=1, padding=(0, 0, 0, 0)):
    """Direct depthwise cross-correlation; ``kernel`` is ``[kh, kw, c]``."""
    x = np.asarray(x, dtype=np.float64)
    top, bottom, left, right = padding
    n, h, w, c = x.shape
    kh, kw, _ = kernel.shape
    oh = (h + top + bottom - kh) // stride + 1
    ow = (w + left + right - kw) // stride + 1
    out = np.zeros((n, oh, ow, c))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    s = float(bias[ch])
                    for di in range(kh):
                        for dj in range(kw):
                            s += _padded_get(x, b, i * stride + di, j * stride + dj, ch, top, left) * float(kernel[di, dj, ch])
                    out[b, i, j, ch] = s
    return out


def softmax_rows(x):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros_like(flat)
    for r, row in enumerate(flat):
        top = max(row)
        exps = [math.exp(v - top) for v in row]
        total = math.fsum(exps)
        out[r] = [e / total for e in exps]
    return out.reshape(x.shape)


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.vectorize(lambda v: v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))), otypes=[np.float64])(x)


def layer_norm(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros_like(flat)
    d = flat.shape[1]
    for r, row in enumerate(flat):
        mu = math.fsum(row) / d
        var = math.fsum((v - mu) ** 2 for v in row) / d
        for c in range(d):
            out[r, c] = (row[c] - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out.reshape(x.shape)


def batch_norm_infer(x, gamma, beta, mean, var, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        c = idx[-1]
        out[idx] = (x[idx] - mean[c]) / math.sqrt(var[c] + eps) * gamma[c] + beta[c]
    return out


def global_avg_pool(x):
    x = np.asarray(x, dtype=np.float64)
    n, h, w, c = x.shape
    out = np.zeros((n, c))
    for b in range(n):
        for ch in range(c):
            out[b, ch] = math.fsum(x[b, i, j, ch] for i in range(h) for j in range(w)) / (h * w)
    return out


def _catmull_rom(t):
    t = abs(t)
    if t <= 1:
        return 1.5 * t**3 - 2.5 * t**2 + 1
    if t < 2:
        return -0.5 * t**3 + 2.5 * t**2 - 4 * t + 2
    return 0.0


def bicubic_resize(m, h2, w2):
    """Per-output-pixel 4x4 neighbourhood sum, align-corners, clamp-to-edge."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape

    def src(i, size, new):
        return 0.0 if new == 1 else i * (size - 1) / (new - 1)

    out = np.zeros((h2, w2))
    for i in range(h2):
        sy = src(i, h, h2)
        y0 = math.floor(sy)
        for j in range(w2):
            sx = src(j, w, w2)
            x0 = math.floor(sx)
            s = 0.0
            for dy in range(-1, 3):
                wy = _catmull_rom(sy - (y0 + dy))
                yy = min(max(y0 + dy, 0), h - 1)
                for dx in range(-1, 3):
                    xx = min(max(x0 + dx, 0), w - 1)
                    s += wy * _catmull_rom(sx - (x0 + dx)) * m[yy, xx]
            out[i, j] = s
    return out


def permute(x, axes):
    """Transpose by explicit index arithmetic over the flat buffer."""
    x = np.asarray(x)
    shape = x.shape
    new_shape = tuple(shape[a] for a in axes)
    src = x.reshape(-1)
    strides = [1] * len(shape)
    for d in range(len(shape) - 2, -1, -1):
        strides[d] = strides[d + 1] * shape[d + 1]
    out = np.empty(src.size, dtype=x.dtype)
    for flat, idx in enumerate(np.ndindex(new_shape)):
        out[flat] = src[sum(idx[k] * strides[axes[k]] for k in range(len(axes)))]
    return out.reshape(new_shape)


def attention(q, k, v, bias=None):
    """softmax(q k^T / sqrt(d) + bias) v for ``[n, d]`` matrices, one row at a time."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    n, d = q.shape
    m = k.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = [math.fsum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) + (0.0 if bias is None else bias[i, j])
                  for j in range(m)]
        top = max(logits)
        e = [math.exp(z - top) for z in logits]
        total = math.fsum(e)
        for j in range(m):
            out[i] += e[j] / total * v[j]
    return out
