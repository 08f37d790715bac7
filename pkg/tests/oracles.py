"""Independent float64 reference implementations written as plain loops.

Nothing here imports the package's numerics; these are the yardsticks.
"""
import cmath
import math

import numpy as np


def matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    n, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cout_g = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for bi in range(n):
        for co in range(cout):
            g = co // cout_g
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else float(b[co])
                    for ci in range(cin_g):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - pad
                                xx = j * stride + dj - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    s += x[bi, g * cin_g + ci, y, xx] * w[co, ci, di, dj]
                    out[bi, co, i, j] = s
    return out


def batchnorm(x, gamma, beta, mean, var, eps):
    out = np.empty(x.shape)
    for idx in np.ndindex(*x.shape):
        c = idx[1]
        out[idx] = (x[idx] - mean[c]) / math.sqrt(var[c] + eps) * gamma[c] + beta[c]
    return out


def layernorm(x, gamma, beta, eps):
    n, c, h, w = x.shape
    out = np.empty(x.shape)
    for bi in range(n):
        for i in range(h):
            for j in range(w):
                tok = [x[bi, ch, i, j] for ch in range(c)]
                mu = sum(tok) / c
                var = sum((t - mu) ** 2 for t in tok) / c
                for ch in range(c):
                    out[bi, ch, i, j] = (tok[ch] - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def attention(q, k, v, heads):
    """Brute-force multi-head attention over flattened positions, no output projection."""
    n, c, h, w = q.shape
    tk = k.shape[2] * k.shape[3]
    d = c // heads
    out = np.zeros(q.shape)
    for bi in range(n):
        for hd in range(heads):
            chans = range(hd * d, (hd + 1) * d)
            for i in range(h):
                for j in range(w):
                    scores = []
                    for p in range(tk):
                        pi, pj = divmod(p, k.shape[3])
                        scores.append(sum(q[bi, ch, i, j] * k[bi, ch, pi, pj] for ch in chans) / math.sqrt(d))
                    wts = softmax(scores)
                    for ch in chans:
                        s = 0.0
                        for p in range(tk):
                            pi, pj = divmod(p, k.shape[3])
                            s += wts[p] * v[bi, ch, pi, pj]
                        out[bi, ch, i, j] = s
    return out


def avg_pool(x, k):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    for idx in np.ndindex(*out.shape):
        bi, ch, i, j = idx
        s = 0.0
        for di in range(k):
            for dj in range(k):
                s += x[bi, ch, i * k + di, j * k + dj]
        out[idx] = s / (k * k)
    return out


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c))
    for bi in range(n):
        for ch in range(c):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[bi, ch, i, j]
            out[bi, ch] = s / (h * w)
    return out


def dft2(x):
    """Quadruple-loop 2-D DFT."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            s = 0j
            for m in range(h):
                for n in range(w):
                    s += x[m, n] * cmath.exp(-2j * math.pi * (u * m / h + v * n / w))
            out[u, v] = s
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def silu(x):
    return x * sigmoid(x)
