"""Layer primitives: convolutions, norms, projections, pooling, attention.

All feature maps are NCHW. Convolution is cross-correlation with zero
padding. Each op records a single adjoint on the active tape, except
:func:`mhsa_pooled`, which is composed from tensor-core primitives.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _result_dtype,
    matmul,
    permute,
    record,
    reshape,
    scale,
    softmax,
)


def conv_out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _taps(kernel: int, stride: int, ho: int, wo: int):
    for i in range(kernel):
        for j in range(kernel):
            yield i, j, (slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2D cross-correlation.

    ``weight`` is ``[C_out, C_in // groups, k, k]``. Depthwise convolution is
    the ``groups == C_in == C_out`` case and takes a per-tap fast path.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cg, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"only square kernels are supported, got {k}x{k2}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"invalid stride={stride}, padding={padding}, groups={groups}")
    if c % groups or o % groups:
        raise ValueError(f"channels in={c} out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg} input channels per group, input gives {c // groups}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    ho = conv_out_extent(h, k, stride, padding)
    wo = conv_out_extent(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive output extent {ho}x{wo} for input {h}x{w}, k={k}, stride={stride}, pad={padding}")

    dt = _result_dtype(x, weight) if bias is None else _result_dtype(x, weight, bias)
    xd = x.data.astype(dt, copy=False)
    wd = weight.data.astype(dt, copy=False)
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    depthwise = groups == c and o == c and cg == 1
    pointwise = k == 1 and stride == 1 and p == 0 and groups == 1

    if depthwise:
        out = np.zeros((n, c, ho, wo), dtype=dt)
        for i, j, (si, sj) in _taps(k, stride, ho, wo):
            out += xp[:, :, si, sj] * wd[:, 0, i, j][:, None, None]
        cols = None
    elif pointwise:
        out = np.matmul(wd[:, :, 0, 0], xd.reshape(n, c, h * w)).reshape(n, o, ho, wo)
        cols = None
    else:
        cols = np.empty((n, c, k, k, ho, wo), dtype=dt)
        for i, j, (si, sj) in _taps(k, stride, ho, wo):
            cols[:, :, i, j] = xp[:, :, si, sj]
        cols = cols.reshape(n, groups, cg * k * k, ho * wo)
        wg = wd.reshape(groups, o // groups, cg * k * k)
        out = np.matmul(wg[None], cols).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.astype(dt, copy=False)[None, :, None, None]
    result = Tensor._wrap(out)

    def backward(g):
        gw = np.zeros_like(wd)
        if depthwise:
            gxp = np.zeros_like(xp)
            for i, j, (si, sj) in _taps(k, stride, ho, wo):
                gw[:, 0, i, j] = (g * xp[:, :, si, sj]).sum(axis=(0, 2, 3))
                gxp[:, :, si, sj] += g * wd[:, 0, i, j][:, None, None]
        elif pointwise:
            g2 = g.reshape(n, o, h * w)
            gw[:, :, 0, 0] = np.einsum("nop,ncp->oc", g2, xd.reshape(n, c, h * w))
            gxp = np.matmul(wd[:, :, 0, 0].T, g2).reshape(n, c, h, w)
        else:
            g2 = g.reshape(n, groups, o // groups, ho * wo)
            gw = np.einsum("ngop,ngkp->gok", g2, cols).reshape(wd.shape)
            wg = wd.reshape(groups, o // groups, cg * k * k)
            gcols = np.matmul(np.swapaxes(wg, 1, 2)[None], g2).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i, j, (si, sj) in _taps(k, stride, ho, wo):
                gxp[:, :, si, sj] += gcols[:, :, i, j]
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", inputs, result, backward)


def batchnorm_inference(
    x: Tensor, gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: float = 1e-5
) -> Tensor:
    """Per-channel ``(x - mean) / sqrt(var + eps) * gamma + beta``."""
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm {name} shape {t.shape} does not match {c} channels")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    dt = _result_dtype(x, gamma, beta, mean, var)
    view = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data.astype(dt, copy=False)
    gd = gamma.data.astype(dt, copy=False)
    md = mean.data.astype(dt, copy=False).reshape(view)
    vd = var.data.astype(dt, copy=False)
    inv = 1.0 / np.sqrt(vd + dt.type(eps))
    xhat = (xd - md) * inv.reshape(view)
    out = Tensor._wrap(xhat * gd.reshape(view) + beta.data.astype(dt, copy=False).reshape(view))
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gs = g.sum(axis=axes)
        gx = g * (gd * inv).reshape(view)
        ggamma = (g * xhat).sum(axis=axes)
        gmean = -gs * gd * inv
        gvar = -0.5 * ggamma * gd * inv * inv
        return gx, ggamma, gs, gmean, gvar

    return record("batchnorm", (x, gamma, beta, mean, var), out, backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis (axis 1) independently per token."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    dt = _result_dtype(x, gamma, beta)
    view = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data.astype(dt, copy=False)
    gd = gamma.data.astype(dt, copy=False).reshape(view)
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt.type(eps))
    xhat = xc * inv
    out = Tensor._wrap(xhat * gd + beta.data.astype(dt, copy=False).reshape(view))
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("layernorm", (x, gamma, beta), out, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Channel projection ``weight @ x`` for ``[N, C]`` or token-wise for ``[N, C, H, W]``."""
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear weight {weight.shape} does not accept {x.shape[1]} input channels")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    dt = _result_dtype(x, weight) if bias is None else _result_dtype(x, weight, bias)
    xd = x.data.astype(dt, copy=False)
    wd = weight.data.astype(dt, copy=False)
    n, c = x.shape[:2]
    spatial = x.shape[2:]
    x3 = xd.reshape(n, c, -1)
    y = np.matmul(wd, x3)
    if bias is not None:
        y = y + bias.data.astype(dt, copy=False)[None, :, None]
    out = Tensor._wrap(y.reshape((n, wd.shape[0]) + spatial))

    def backward(g):
        g3 = g.reshape(n, wd.shape[0], -1)
        grads = [np.matmul(wd.T, g3).reshape(x.shape), np.einsum("nop,ncp->oc", g3, x3)]
        if bias is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", inputs, out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor._wrap(x.data.mean(axis=(2, 3)))
    return record(
        "global_avg_pool", (x,), out,
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
    )


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling with ``stride == kernel``."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"extent {h}x{w} not divisible by pooling kernel {kernel}")
    ho, wo = h // kernel, w // kernel
    out = Tensor._wrap(x.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5)))

    def backward(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (kernel * kernel), (n, c, ho, kernel, wo, kernel))
        return (gx.reshape(x.shape).copy(),)

    return record("avg_pool2d", (x,), out, backward)


def mhsa_pooled(
    q: Tensor, k: Tensor, v: Tensor, heads: int, return_weights: bool = False
):
    """Multi-head attention of full-resolution queries over pooled keys/values.

    Per head: ``softmax(Q K^T / sqrt(d)) V`` over flattened spatial positions.
    Heads are concatenated back along channels; there is no output projection.
    """
    n, c, h, w = q.shape
    if k.shape != v.shape or k.shape[:2] != (n, c):
        raise ShapeError(f"key/value shapes {k.shape}/{v.shape} do not match query {q.shape}")
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    d = c // heads
    t = h * w
    tk = k.shape[2] * k.shape[3]
    qh = permute(reshape(q, (n, heads, d, t)), (0, 1, 3, 2))  # n, heads, t, d
    kh = reshape(k, (n, heads, d, tk))  # already K^T per head
    vh = permute(reshape(v, (n, heads, d, tk)), (0, 1, 3, 2))  # n, heads, tk, d
    attn = softmax(scale(matmul(qh, kh), 1.0 / math.sqrt(d)), axis=-1)
    out = reshape(permute(matmul(attn, vh), (0, 1, 3, 2)), (n, c, h, w))
    return (out, attn) if return_weights else out
