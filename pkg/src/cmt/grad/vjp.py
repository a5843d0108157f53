"""Vector-Jacobian products for every forward primitive and block.

Each ``*_vjp`` takes the forward inputs plus the upstream cotangent ``g`` and
returns the cotangent of the input followed by a parameter tree of the same
type as the forward parameters (holding gradients in place of values).
Intermediates are recomputed from the inputs.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..blocks import (
    BatchNormParams,
    CMTBlockParams,
    FFNParams,
    HeadParams,
    IRFFNParams,
    LayerNormParams,
    Linear,
    LMHSAParams,
    LPUParams,
    PatchAggParams,
    StemParams,
    bn,
    cmt_block_forward,
    head_forward,
    linear,
    lmhsa_forward,
    ln,
    lpu_forward,
    merge_heads,
    patch_agg_forward,
    reduce_spatial,
    split_heads,
    stem_forward,
)
from ..model import ModelSpec, assemble, rel_bias_name
from ..tensor import (
    ConvWeights,
    bicubic_matrix,
    conv2d,
    dwconv2d,
    gelu,
    global_avg_pool,
    pad_spatial,
    softmax_rows,
    to_spatial,
    to_tokens,
)
from ..tree import named_arrays


def matmul_vjp(a, b, g):
    return g @ b.T, a.T @ g


def add_vjp(g):
    """Residual add: the cotangent reaches both branches unchanged."""
    return g, g


def linear_vjp(x, p: Linear, g):
    dx = g @ p.weight.T
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return dx, Linear(x2.T @ g2, g2.sum(axis=0))


def _tap_slice(i, j, oh, ow, s):
    return (slice(None), slice(i, i + s * (oh - 1) + 1, s), slice(j, j + s * (ow - 1) + 1, s), slice(None))


def _conv_vjp(x, w: ConvWeights, g, depthwise):
    kh, kw = w.kernel.shape[:2]
    oh, ow = g.shape[1], g.shape[2]
    t, _, l, _ = w.padding
    xp = pad_spatial(x, w.padding)
    dxp = np.zeros(xp.shape, dtype=np.result_type(x, g))
    dk = np.zeros(w.kernel.shape, dtype=np.result_type(w.kernel, g))
    for i in range(kh):
        for j in range(kw):
            sl = _tap_slice(i, j, oh, ow, w.stride)
            tap = xp[sl]
            if depthwise:
                dk[i, j] = (tap * g).sum(axis=(0, 1, 2))
                dxp[sl] += g * w.kernel[i, j]
            else:
                dk[i, j] = np.tensordot(tap, g, axes=([0, 1, 2], [0, 1, 2]))
                dxp[sl] += g @ w.kernel[i, j].T
    dx = dxp[:, t : t + x.shape[1], l : l + x.shape[2], :]
    return np.ascontiguousarray(dx), ConvWeights(dk, g.sum(axis=(0, 1, 2)), w.stride, w.padding)


def conv2d_vjp(x, w: ConvWeights, g):
    return _conv_vjp(x, w, g, depthwise=False)


def dwconv2d_vjp(x, w: ConvWeights, g):
    return _conv_vjp(x, w, g, depthwise=True)


def softmax_vjp_from_output(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_rows_vjp(x, g):
    return softmax_vjp_from_output(softmax_rows(x), g)


def gelu_vjp(x, g):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return g * (cdf + x * pdf)


def layer_norm_vjp(x, p: LayerNormParams, g):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + p.eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))
    dxhat = g * p.gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, LayerNormParams((g * xhat).sum(axis=lead), g.sum(axis=lead), p.eps)


def batch_norm_vjp(x, p: BatchNormParams, g):
    """Inference-form BN; statistics also receive their (non-training) derivatives."""
    inv = 1.0 / np.sqrt(p.running_var + p.eps)
    lead = tuple(range(x.ndim - 1))
    xc = x - p.running_mean
    gs = g.sum(axis=lead)
    gxc = (g * xc).sum(axis=lead)
    return g * (p.gamma * inv), BatchNormParams(
        gamma=gxc * inv,
        beta=gs,
        running_mean=-gs * p.gamma * inv,
        running_var=-0.5 * gxc * p.gamma * inv**3,
        eps=p.eps,
    )


def global_avg_pool_vjp(x, g):
    n, h, w, c = x.shape
    return np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy()


def bicubic_resize_vjp(m, h2, w2, g):
    ry = bicubic_matrix(m.shape[0], h2)
    rx = bicubic_matrix(m.shape[1], w2)
    return ry.T @ g @ rx


def reshape_permute_vjp(x, g, axes=None, shape=None):
    permuted = x.shape if axes is None else tuple(x.shape[a] for a in axes)
    g = g.reshape(permuted)
    if axes is not None:
        g = np.transpose(g, np.argsort(axes))
    return np.ascontiguousarray(g)


def lpu_vjp(p: LPUParams, x, g):
    dx, ddw = dwconv2d_vjp(x, p.dw, g)
    return dx + g, LPUParams(ddw)


def attention_baseline_vjp(q, k, v, g):
    scale = 1.0 / math.sqrt(q.shape[-1])
    a = softmax_rows(q @ np.swapaxes(k, -1, -2) * scale)
    dv = np.swapaxes(a, -1, -2) @ g
    ds = softmax_vjp_from_output(a, g @ np.swapaxes(v, -1, -2)) * scale
    return ds @ k, np.swapaxes(ds, -1, -2) @ q, dv


def _reduce_vjp(x, w, k, g):
    if w is None:
        return g, None
    ph, pw = -x.shape[1] % k, -x.shape[2] % k
    xp = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0))) if (ph or pw) else x
    dxp, dw = dwconv2d_vjp(xp, w, g)
    return dxp[:, : x.shape[1], : x.shape[2], :], dw


def lmhsa_vjp(p: LMHSAParams, x, g):
    nb, hh, ww, d = x.shape
    k = p.reduction
    scale = 1.0 / math.sqrt(d // p.heads)
    t = to_tokens(x)
    xk, xv = reduce_spatial(x, p.dw_k, k), reduce_spatial(x, p.dw_v, k)
    tk, tv = to_tokens(xk), to_tokens(xv)
    qh = split_heads(linear(t, p.q), p.heads)
    kh = split_heads(linear(tk, p.k), p.heads)
    vh = split_heads(linear(tv, p.v), p.heads)
    a = softmax_rows(qh @ np.swapaxes(kh, -1, -2) * scale + p.rel_bias)
    om = merge_heads(a @ vh)

    dom, do = linear_vjp(om, p.o, g.reshape(nb, hh * ww, d))
    doh = split_heads(dom, p.heads)
    dvh = np.swapaxes(a, -1, -2) @ doh
    dlogits = softmax_vjp_from_output(a, doh @ np.swapaxes(vh, -1, -2))
    d_bias = dlogits.sum(axis=0)
    dqh = dlogits @ kh * scale
    dkh = np.swapaxes(dlogits, -1, -2) @ qh * scale

    dt, dq = linear_vjp(t, p.q, merge_heads(dqh))
    dtk, dk = linear_vjp(tk, p.k, merge_heads(dkh))
    dtv, dv = linear_vjp(tv, p.v, merge_heads(dvh))
    dxk, ddw_k = _reduce_vjp(x, p.dw_k, k, dtk.reshape(xk.shape))
    dxv, ddw_v = _reduce_vjp(x, p.dw_v, k, dtv.reshape(xv.shape))
    dx = to_spatial(dt, hh, ww) + dxk + dxv
    return dx, LMHSAParams(dq, dk, dv, do, ddw_k, ddw_v, d_bias, p.heads, p.reduction)


def ffn_baseline_vjp(p: FFNParams, x, g):
    h1 = linear(x, p.fc1)
    da, dfc2 = linear_vjp(gelu(h1), p.fc2, g)
    dx, dfc1 = linear_vjp(x, p.fc1, gelu_vjp(h1, da))
    return dx, FFNParams(dfc1, dfc2)


def irffn_vjp(p: IRFFNParams, x, g):
    y1 = linear(x, p.expand)
    a1 = gelu(y1)
    z1 = bn(a1, p.bn1)
    u = dwconv2d(z1, p.dw) + z1
    a2 = gelu(u)
    z2 = bn(a2, p.bn2)
    y3 = linear(z2, p.project)

    dy3, dbn3 = batch_norm_vjp(y3, p.bn3, g)
    dz2, dproject = linear_vjp(z2, p.project, dy3)
    da2, dbn2 = batch_norm_vjp(a2, p.bn2, dz2)
    du = gelu_vjp(u, da2)
    dz1, ddw = dwconv2d_vjp(z1, p.dw, du)
    dz1 = dz1 + du
    da1, dbn1 = batch_norm_vjp(a1, p.bn1, dz1)
    dx, dexpand = linear_vjp(x, p.expand, gelu_vjp(y1, da1))
    return dx, IRFFNParams(dexpand, dbn1, ddw, dbn2, dproject, dbn3)


def cmt_block_vjp(p: CMTBlockParams, x, g):
    x1 = lpu_forward(p.lpu, x)
    l1 = ln(x1, p.ln1)
    x2 = lmhsa_forward(p.lmhsa, l1) + x1
    l2 = ln(x2, p.ln2)

    dl2, dirffn = irffn_vjp(p.irffn, l2, g)
    dx2_ln, dln2 = layer_norm_vjp(x2, p.ln2, dl2)
    dx2 = g + dx2_ln
    dl1, dlmhsa = lmhsa_vjp(p.lmhsa, l1, dx2)
    dx1_ln, dln1 = layer_norm_vjp(x1, p.ln1, dl1)
    dx, dlpu = lpu_vjp(p.lpu, x, dx2 + dx1_ln)
    return dx, CMTBlockParams(dlpu, dln1, dlmhsa, dln2, dirffn)


def stem_vjp(p: StemParams, x, g):
    inputs, convs = [], []
    for conv, norm in zip(p.convs, p.bns):
        inputs.append(x)
        c = conv2d(x, conv)
        convs.append(c)
        x = gelu(bn(c, norm))
    dconvs, dbns = [None] * 3, [None] * 3
    for i in reversed(range(len(p.convs))):
        b = bn(convs[i], p.bns[i])
        dc, dbns[i] = batch_norm_vjp(convs[i], p.bns[i], gelu_vjp(b, g))
        g, dconvs[i] = conv2d_vjp(inputs[i], p.convs[i], dc)
    return g, StemParams(tuple(dconvs), tuple(dbns))


def patch_agg_vjp(p: PatchAggParams, x, g):
    c = conv2d(x, p.conv)
    dc, dln = layer_norm_vjp(c, p.ln, g)
    dx, dconv = conv2d_vjp(x, p.conv, dc)
    return dx, PatchAggParams(dconv, dln)


def head_vjp(p: HeadParams, x, g):
    pooled = global_avg_pool(x)
    h = linear(pooled, p.fc)
    da, dcls = linear_vjp(gelu(h), p.classifier, g)
    dpooled, dfc = linear_vjp(pooled, p.fc, gelu_vjp(h, da))
    return global_avg_pool_vjp(x, dpooled), HeadParams(dfc, dcls)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dz = np.exp(logp)
    dz[np.arange(n), labels] -= 1.0
    return float(loss), dz / n


def network_forward(spec: ModelSpec, weights: dict, x):
    """Forward over a flat weight dict, without Model validation (used inside training loops)."""
    net = assemble(spec, lambda name, shape, kind: weights[name])
    h = stem_forward(net.stem, x)
    for stage in net.stages:
        h = patch_agg_forward(stage.agg, h)
        for block in stage.blocks:
            h = cmt_block_forward(block, h)
    return head_forward(net.head, h)


def model_vjp(spec: ModelSpec, weights: dict, x, dlogits):
    """Gradients of every named weight, plus the input cotangent.

    A stage's shared relative bias accumulates the gradient of all its blocks.
    """
    net = assemble(spec, lambda name, shape, kind: weights[name])
    stem_in = x
    h = stem_forward(net.stem, x)
    agg_inputs, block_inputs = [], []
    for stage in net.stages:
        agg_inputs.append(h)
        h = patch_agg_forward(stage.agg, h)
        ins = []
        for block in stage.blocks:
            ins.append(h)
            h = cmt_block_forward(block, h)
        block_inputs.append(ins)

    grads: dict[str, np.ndarray] = {}

    def collect(tree, prefix, rename=None):
        for name, arr in named_arrays(tree, prefix):
            if rename:
                name = rename.get(name, name)
            grads[name] = grads[name] + arr if name in grads else arr

    g, dhead = head_vjp(net.head, h, dlogits)
    collect(dhead, "head")
    for s in reversed(range(len(net.stages))):
        stage = net.stages[s]
        for b in reversed(range(len(stage.blocks))):
            g, dblock = cmt_block_vjp(stage.blocks[b], block_inputs[s][b], g)
            prefix = f"stages.{s}.blocks.{b}"
            collect(dblock, prefix, {f"{prefix}.lmhsa.rel_bias": rel_bias_name(s)})
        g, dagg = patch_agg_vjp(stage.agg, agg_inputs[s], g)
        collect(dagg, f"stages.{s}.agg")
    g, dstem = stem_vjp(net.stem, stem_in, g)
    collect(dstem, "stem")
    return g, grads
