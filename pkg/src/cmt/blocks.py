"""Forward passes for the architectural units: stem, patch aggregation, LPU,
lightweight attention, IRFFN, the full block and the classification head.

All functions are pure and take channels-last ``[N, H, W, d]`` feature maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ResolutionError, ShapeError
from .tensor import (
    DEFAULT_EPS,
    ConvWeights,
    batch_norm_infer,
    conv2d,
    dwconv2d,
    gelu,
    global_avg_pool,
    layer_norm,
    softmax_rows,
    to_spatial,
    to_tokens,
)


@dataclass(frozen=True)
class Linear:
    weight: np.ndarray  # [d_in, d_out]
    bias: np.ndarray


@dataclass(frozen=True)
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS


@dataclass(frozen=True)
class LPUParams:
    dw: ConvWeights


@dataclass(frozen=True)
class LMHSAParams:
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    dw_k: ConvWeights | None  # None when reduction == 1
    dw_v: ConvWeights | None
    rel_bias: np.ndarray  # [heads, n, n / reduction**2]
    heads: int
    reduction: int


@dataclass(frozen=True)
class FFNParams:
    fc1: Linear
    fc2: Linear


@dataclass(frozen=True)
class IRFFNParams:
    expand: Linear
    bn1: BatchNormParams
    dw: ConvWeights
    bn2: BatchNormParams
    project: Linear
    bn3: BatchNormParams


@dataclass(frozen=True)
class CMTBlockParams:
    lpu: LPUParams
    ln1: LayerNormParams
    lmhsa: LMHSAParams
    ln2: LayerNormParams
    irffn: IRFFNParams


@dataclass(frozen=True)
class StemParams:
    convs: tuple[ConvWeights, ...]
    bns: tuple[BatchNormParams, ...]


@dataclass(frozen=True)
class PatchAggParams:
    conv: ConvWeights
    ln: LayerNormParams


@dataclass(frozen=True)
class HeadParams:
    fc: Linear
    classifier: Linear


def linear(x: np.ndarray, p: Linear) -> np.ndarray:
    if x.shape[-1] != p.weight.shape[0]:
        raise ShapeError(f"linear input width {x.shape} does not match weight {p.weight.shape}")
    return x @ p.weight + p.bias


def ln(x, p: LayerNormParams):
    return layer_norm(x, p.gamma, p.beta, p.eps)


def bn(x, p: BatchNormParams):
    return batch_norm_infer(x, p.gamma, p.beta, p.running_mean, p.running_var, p.eps)


def lpu_forward(p: LPUParams, x: np.ndarray) -> np.ndarray:
    return dwconv2d(x, p.dw) + x


def attention_baseline(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Softmax(Q K^T / sqrt(d_k)) V on ``[n, d]`` token matrices (leading batch axes allowed)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key count {k.shape} does not match value count {v.shape}")
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    return softmax_rows(logits) @ v


def reduce_spatial(x: np.ndarray, w: ConvWeights | None, k: int) -> np.ndarray:
    """k x k stride-k depthwise reduction; trailing edges are zero-padded to a multiple of k."""
    if w is None:
        return x
    ph = -x.shape[1] % k
    pw = -x.shape[2] % k
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
    return dwconv2d(x, w)


def reduced_extent(size: int, k: int) -> int:
    return -(-size // k)


def split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    """``[N, n, d] -> [N, heads, n, d / heads]``."""
    b, n, d = t.shape
    return t.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(t: np.ndarray) -> np.ndarray:
    b, h, n, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def lmhsa_forward(p: LMHSAParams, x: np.ndarray, return_attention: bool = False):
    """Lightweight multi-head self-attention.

    Keys and values are computed from the k x k stride-k depthwise reduction
    of the input, so their projections run on n / k**2 tokens. The per-head
    relative position bias is added to the scaled logits before the softmax.
    With ``return_attention`` the post-softmax weights ``[N, h, n, m]`` are
    returned as a second value.
    """
    nb, hh, ww, d = x.shape
    if d % p.heads:
        raise ConfigError(f"dimension {d} is not divisible by {p.heads} heads")
    k = p.reduction
    n = hh * ww
    m = reduced_extent(hh, k) * reduced_extent(ww, k)
    if p.rel_bias.shape != (p.heads, n, m):
        raise ResolutionError(
            f"relative position bias has shape {p.rel_bias.shape} but a {hh}x{ww} input needs "
            f"{(p.heads, n, m)}; run transfer_resolution for the new input size first"
        )
    q = split_heads(linear(to_tokens(x), p.q), p.heads)
    kk = split_heads(linear(to_tokens(reduce_spatial(x, p.dw_k, k)), p.k), p.heads)
    vv = split_heads(linear(to_tokens(reduce_spatial(x, p.dw_v, k)), p.v), p.heads)
    logits = q @ np.swapaxes(kk, -1, -2) / math.sqrt(d // p.heads) + p.rel_bias
    attn = softmax_rows(logits)
    out = linear(merge_heads(attn @ vv), p.o)
    out = to_spatial(out, hh, ww)
    return (out, attn) if return_attention else out


def ffn_baseline(p: FFNParams, x: np.ndarray) -> np.ndarray:
    return linear(gelu(linear(x, p.fc1)), p.fc2)


def irffn_forward(p: IRFFNParams, x: np.ndarray) -> np.ndarray:
    # expansion -> GELU -> BN -> (DWConv + shortcut) -> GELU -> BN -> projection -> BN
    z1 = bn(gelu(linear(x, p.expand)), p.bn1)
    z2 = bn(gelu(dwconv2d(z1, p.dw) + z1), p.bn2)
    return bn(linear(z2, p.project), p.bn3)


def cmt_block_forward(p: CMTBlockParams, x: np.ndarray, trace: bool = False):
    x1 = lpu_forward(p.lpu, x)
    x2 = lmhsa_forward(p.lmhsa, ln(x1, p.ln1)) + x1
    out = irffn_forward(p.irffn, ln(x2, p.ln2)) + x2
    if trace:
        return out, {"lpu": x1, "attention": x2}
    return out


def _require_even(x, what):
    if x.ndim != 4:
        raise ShapeError(f"{what} expects [N,H,W,C], got {x.shape}")
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ConfigError(f"{what} needs even spatial extents, got {x.shape[1]}x{x.shape[2]}")


def stem_forward(p: StemParams, x: np.ndarray) -> np.ndarray:
    _require_even(x, "stem")
    for conv, norm in zip(p.convs, p.bns):
        x = gelu(bn(conv2d(x, conv), norm))
    return x


def patch_agg_forward(p: PatchAggParams, x: np.ndarray) -> np.ndarray:
    _require_even(x, "patch aggregation")
    return ln(conv2d(x, p.conv), p.ln)


def head_forward(p: HeadParams, x: np.ndarray) -> np.ndarray:
    """GAP -> FC -> GELU -> classifier; returns logits ``[N, classes]``."""
    return linear(gelu(linear(global_avg_pool(x), p.fc)), p.classifier)
