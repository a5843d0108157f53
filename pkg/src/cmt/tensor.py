"""Dense channels-last kernels.

Tensors are plain numpy arrays. Every kernel is a pure function and keeps the
floating dtype of its operands (float32 for models, float64 on oracle and
gradient paths).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ParameterError, ShapeError

DEFAULT_EPS = 1e-5


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Copy ``data`` into a contiguous array, rejecting zero extents and non-finite values."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(e < 1 for e in arr.shape):
        raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class ConvWeights:
    """Convolution parameters.

    ``kernel`` is ``[kh, kw, c_in, c_out]`` for a dense convolution or
    ``[kh, kw, c]`` for a depthwise one. ``padding`` is ``(top, bottom, left, right)``.
    """

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def depthwise(self) -> bool:
        return self.kernel.ndim == 3


def same_padding(size: int, k: int, stride: int = 1) -> tuple[int, int]:
    """Leading/trailing pad giving ``ceil(size / stride)`` outputs."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def same_padding_2d(h: int, w: int, k: int, stride: int = 1) -> tuple[int, int, int, int]:
    return same_padding(h, k, stride) + same_padding(w, k, stride)


def _out_extent(size, k, stride, what):
    span = size - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"{what}: padded extent {size} with kernel {k} and stride {stride} "
            f"gives a non-integral output extent ({span}/{stride} + 1)"
        )
    return span // stride + 1


def pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    t, b, l, r = padding
    if not (t or b or l or r):
        return x
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))


def _conv_geometry(x, w: ConvWeights):
    if x.ndim != 4:
        raise ShapeError(f"expected [N,H,W,C] input, got shape {x.shape}")
    if w.stride < 1:
        raise ConfigError(f"stride must be positive, got {w.stride}")
    kh, kw = w.kernel.shape[:2]
    t, b, l, r = w.padding
    oh = _out_extent(x.shape[1] + t + b, kh, w.stride, "height")
    ow = _out_extent(x.shape[2] + l + r, kw, w.stride, "width")
    return kh, kw, oh, ow


def _tap(xp, i, j, oh, ow, s):
    return xp[:, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s, :]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def conv2d(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """Dense cross-correlation plus bias."""
    if w.kernel.ndim != 4:
        raise ShapeError(f"dense conv kernel must be [kh,kw,cin,cout], got {w.kernel.shape}")
    if x.ndim == 4 and x.shape[3] != w.kernel.shape[2]:
        raise ShapeError(f"input channels {x.shape} do not match kernel {w.kernel.shape}")
    kh, kw, oh, ow = _conv_geometry(x, w)
    xp = pad_spatial(x, w.padding)
    dtype = np.result_type(x, w.kernel)
    out = np.zeros((x.shape[0], oh, ow, w.kernel.shape[3]), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, oh, ow, w.stride) @ w.kernel[i, j]
    out += w.bias
    return out


def dwconv2d(x: np.ndarray, w: ConvWeights) -> np.ndarray:
    """Depthwise cross-correlation: output channel c reads input channel c only."""
    if w.kernel.ndim != 3:
        raise ShapeError(f"depthwise kernel must be [kh,kw,c], got {w.kernel.shape}")
    if x.ndim == 4 and x.shape[3] != w.kernel.shape[2]:
        raise ShapeError(f"input channels {x.shape} do not match depthwise kernel {w.kernel.shape}")
    kh, kw, oh, ow = _conv_geometry(x, w)
    xp = pad_spatial(x, w.padding)
    dtype = np.result_type(x, w.kernel)
    out = np.zeros((x.shape[0], oh, ow, x.shape[3]), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, oh, ow, w.stride) * w.kernel[i, j]
    out += w.bias
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _erf(x: np.ndarray) -> np.ndarray:
    if x.dtype != np.longdouble or np.finfo(np.longdouble).eps >= np.finfo(np.float64).eps:
        return erf(x)
    # scipy has no extended-precision loop: take erf at the nearest double and
    # correct by a second-order Taylor step, which keeps the result smooth in x
    x0 = x.astype(np.float64)
    dx = x - x0
    d1 = 2 / np.sqrt(np.longdouble(np.pi)) * np.exp(-np.square(x0.astype(np.longdouble)))
    return erf(x0).astype(np.longdouble) + d1 * dx - x0 * d1 * dx * dx


def gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + _erf(x / math.sqrt(2.0))).astype(x.dtype, copy=False)


def layer_norm(x, gamma, beta, eps=DEFAULT_EPS):
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"norm affine {gamma.shape}/{beta.shape} does not match input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def batch_norm_infer(x, gamma, beta, running_mean, running_var, eps=DEFAULT_EPS):
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if np.any(running_var < 0):
        raise ParameterError("batch-norm running variance must be non-negative")
    c = x.shape[-1]
    for arr in (gamma, beta, running_mean, running_var):
        if arr.shape != (c,):
            raise ShapeError(f"batch-norm parameter of shape {arr.shape} does not match {c} channels")
    scale = gamma / np.sqrt(running_var + eps)
    return (x - running_mean) * scale + beta


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"expected [N,H,W,C] input, got shape {x.shape}")
    return x.mean(axis=(1, 2))


def cubic_weight(t, a=-0.5):
    """Keys cubic convolution kernel; a=-0.5 is Catmull-Rom."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_matrix(size: int, new_size: int) -> np.ndarray:
    """``[new_size, size]`` interpolation matrix, align-corners, clamp-to-edge."""
    if size < 1 or new_size < 1:
        raise ShapeError(f"resize extents must be >= 1, got {size} -> {new_size}")
    if new_size == 1:
        src = np.zeros(1)
    else:
        src = np.arange(new_size) * ((size - 1) / (new_size - 1))
    base = np.floor(src).astype(np.int64)
    frac = src - base
    mat = np.zeros((new_size, size))
    rows = np.arange(new_size)
    for off in (-1, 0, 1, 2):
        idx = np.clip(base + off, 0, size - 1)
        np.add.at(mat, (rows, idx), cubic_weight(frac - off))
    return mat


def bicubic_resize(m: np.ndarray, h2: int, w2: int) -> np.ndarray:
    if m.ndim != 2:
        raise ShapeError(f"bicubic_resize expects a 2-D matrix, got {m.shape}")
    ry = bicubic_matrix(m.shape[0], h2)
    rx = bicubic_matrix(m.shape[1], w2)
    out = ry @ m.astype(np.float64) @ rx.T
    return out.astype(m.dtype, copy=False)


def reshape_permute(x: np.ndarray, *, axes=None, shape=None) -> np.ndarray:
    """Permute axes (if given), then reshape (if given); always returns a contiguous copy."""
    if axes is not None:
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"axes {tuple(axes)} are not a permutation of {x.ndim} axes")
        x = np.transpose(x, axes)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != x.size:
            raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
        x = x.reshape(shape)
    return np.ascontiguousarray(x)


def to_tokens(x: np.ndarray) -> np.ndarray:
    """``[N,H,W,d] -> [N,H*W,d]``."""
    n, h, w, d = x.shape
    return x.reshape(n, h * w, d)


def to_spatial(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """``[N,H*W,d] -> [N,H,W,d]``."""
    return x.reshape(x.shape[0], h, w, x.shape[-1])


def rel_err(actual, expected) -> float:
    """Max-norm error relative to the max-norm of ``expected``."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.max(np.abs(expected), initial=0.0)), 1e-30)
    return float(np.max(np.abs(actual - expected), initial=0.0)) / scale
