"""Central-difference gradient checking against the analytic VJPs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import blocks, tensor
from ..errors import UnknownOpError
from ..model import StageConfig, _block, assemble, toy_spec
from ..tensor import ConvWeights
from ..tree import named_arrays, tree_map
from . import vjp as V


@dataclass(frozen=True)
class OpCase:
    """A forward op with its VJP and a random 64-bit test-case generator.

    ``make(rng)`` returns ``(inputs, params)``; ``forward(inputs, params)``
    returns an array; ``vjp(inputs, params, g)`` returns
    ``(input_cotangents, param_cotangents)``.
    """

    make: Callable
    forward: Callable
    vjp: Callable


def _rand(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


def _linear(rng, d_in, d_out):
    return blocks.Linear(_rand(rng, d_in, d_out, scale=d_in**-0.5), _rand(rng, d_out, scale=0.1))


def _ln(rng, d):
    return blocks.LayerNormParams(1 + _rand(rng, d, scale=0.1), _rand(rng, d, scale=0.1))


def _bn(rng, d):
    return blocks.BatchNormParams(1 + _rand(rng, d, scale=0.1), _rand(rng, d, scale=0.1),
                                  _rand(rng, d, scale=0.1), rng.uniform(0.5, 1.5, d))


def _conv(rng, shape, stride=1, padding=(0, 0, 0, 0)):
    fan_in = int(np.prod(shape[:-1]))
    return ConvWeights(_rand(rng, *shape, scale=fan_in**-0.5), _rand(rng, shape[-1], scale=0.1), stride, padding)


def random_make(rng):
    """``make`` callback for :func:`assemble` drawing unit-scale random parameters."""
    def make(name, shape, kind):
        if name.endswith("running_var"):
            return rng.uniform(0.5, 1.5, shape)
        if kind == "ones":
            return 1 + _rand(rng, *shape, scale=0.1)
        if kind == "zeros":
            return _rand(rng, *shape, scale=0.1)
        if name.endswith("rel_bias"):
            return _rand(rng, *shape, scale=0.5)
        fan_in = int(np.prod(shape[:-1]))
        return _rand(rng, *shape, scale=fan_in**-0.5)
    return make


def _block_params(rng, d=8, heads=2, k=2, hw=(4, 4), expansion=4):
    make = random_make(rng)
    m = blocks.reduced_extent(hw[0], k) * blocks.reduced_extent(hw[1], k)
    rel = make("rel_bias", (heads, hw[0] * hw[1], m), "weight")
    return _block(make, "block", StageConfig(1, d, heads, k, expansion), rel)


def _unary(fn, fn_vjp, make_x):
    return OpCase(
        make=lambda rng: ({"x": make_x(rng)}, None),
        forward=lambda i, p: fn(i["x"]),
        vjp=lambda i, p, g: ({"x": fn_vjp(i["x"], g)}, None),
    )


def _with_params(fn, fn_vjp, make):
    return OpCase(
        make=make,
        forward=lambda i, p: fn(p, i["x"]),
        vjp=lambda i, p, g: (lambda dx, dp: ({"x": dx}, dp))(*fn_vjp(p, i["x"], g)),
    )


def _toy_model_case():
    spec = toy_spec(num_classes=3, head_width=16)

    def make(rng):
        weights = {}
        maker = random_make(rng)

        def collect(name, shape, kind):
            if name not in weights:
                weights[name] = maker(name, shape, kind)
            return weights[name]

        assemble(spec, collect)
        return {"x": _rand(rng, 2, 32, 32, 3)}, weights

    return OpCase(
        make=make,
        forward=lambda i, p: V.network_forward(spec, p, i["x"]),
        vjp=lambda i, p, g: (lambda dx, dw: ({"x": dx}, dw))(*V.model_vjp(spec, p, i["x"], g)),
    )


def _ce_case():
    def make(rng):
        return {"logits": _rand(rng, 6, 4), "labels": rng.integers(0, 4, 6)}, None

    return OpCase(
        make=make,
        forward=lambda i, p: np.array([V.cross_entropy(i["logits"], i["labels"])[0]]),
        vjp=lambda i, p, g: ({"logits": V.cross_entropy(i["logits"], i["labels"])[1] * g[0]}, None),
    )


_SAME3 = (1, 1, 1, 1)

OPS: dict[str, OpCase] = {
    "matmul": OpCase(
        make=lambda rng: ({"a": _rand(rng, 4, 3), "b": _rand(rng, 3, 5)}, None),
        forward=lambda i, p: tensor.matmul(i["a"], i["b"]),
        vjp=lambda i, p, g: (dict(zip("ab", V.matmul_vjp(i["a"], i["b"], g))), None),
    ),
    "residual_add": OpCase(
        make=lambda rng: ({"a": _rand(rng, 2, 3, 3, 4), "b": _rand(rng, 2, 3, 3, 4)}, None),
        forward=lambda i, p: i["a"] + i["b"],
        vjp=lambda i, p, g: (dict(zip("ab", V.add_vjp(g))), None),
    ),
    "linear": _with_params(lambda p, x: blocks.linear(x, p),
                           lambda p, x, g: V.linear_vjp(x, p, g),
                           lambda rng: ({"x": _rand(rng, 5, 6)}, _linear(rng, 6, 4))),
    "conv2d": _with_params(lambda p, x: tensor.conv2d(x, p), lambda p, x, g: V.conv2d_vjp(x, p, g),
                           lambda rng: ({"x": _rand(rng, 1, 6, 6, 2)}, _conv(rng, (3, 3, 2, 4), 2, (0, 1, 0, 1)))),
    "dwconv2d": _with_params(lambda p, x: tensor.dwconv2d(x, p), lambda p, x, g: V.dwconv2d_vjp(x, p, g),
                             lambda rng: ({"x": _rand(rng, 2, 5, 5, 3)}, _conv(rng, (3, 3, 3), 2, (0, 0, 0, 0)))),
    "softmax_rows": _unary(tensor.softmax_rows, V.softmax_rows_vjp, lambda rng: _rand(rng, 4, 6, scale=2.0)),
    "softmax_rows_flat": _unary(tensor.softmax_rows, V.softmax_rows_vjp, lambda rng: _rand(rng, 4, 6, scale=1e-3)),
    "gelu": _unary(tensor.gelu, V.gelu_vjp, lambda rng: _rand(rng, 3, 7, scale=2.0)),
    "layer_norm": _with_params(lambda p, x: blocks.ln(x, p), lambda p, x, g: V.layer_norm_vjp(x, p, g),
                               lambda rng: ({"x": _rand(rng, 3, 8)}, _ln(rng, 8))),
    "batch_norm_infer": _with_params(lambda p, x: blocks.bn(x, p), lambda p, x, g: V.batch_norm_vjp(x, p, g),
                                     lambda rng: ({"x": _rand(rng, 2, 3, 3, 4)}, _bn(rng, 4))),
    "global_avg_pool": _unary(tensor.global_avg_pool, V.global_avg_pool_vjp, lambda rng: _rand(rng, 2, 3, 4, 5)),
    "bicubic_resize": _unary(lambda m: tensor.bicubic_resize(m, 7, 5),
                             lambda m, g: V.bicubic_resize_vjp(m, 7, 5, g), lambda rng: _rand(rng, 4, 4)),
    "reshape_permute": _unary(lambda x: tensor.reshape_permute(x, axes=(2, 0, 1), shape=(4, 6)),
                              lambda x, g: V.reshape_permute_vjp(x, g, axes=(2, 0, 1), shape=(4, 6)),
                              lambda rng: _rand(rng, 2, 3, 4)),
    "cross_entropy": _ce_case(),
    "lpu": _with_params(blocks.lpu_forward, V.lpu_vjp,
                        lambda rng: ({"x": _rand(rng, 1, 4, 4, 2)},
                                     blocks.LPUParams(_conv(rng, (3, 3, 2), 1, _SAME3)))),
    "attention_baseline": OpCase(
        make=lambda rng: ({"q": _rand(rng, 5, 4), "k": _rand(rng, 5, 4), "v": _rand(rng, 5, 3)}, None),
        forward=lambda i, p: blocks.attention_baseline(i["q"], i["k"], i["v"]),
        vjp=lambda i, p, g: (dict(zip("qkv", V.attention_baseline_vjp(i["q"], i["k"], i["v"], g))), None),
    ),
    "lmhsa": _with_params(blocks.lmhsa_forward, V.lmhsa_vjp,
                          lambda rng: ({"x": _rand(rng, 2, 4, 4, 8)}, _block_params(rng).lmhsa)),
    "lmhsa_padded": _with_params(blocks.lmhsa_forward, V.lmhsa_vjp,
                                 lambda rng: ({"x": _rand(rng, 1, 3, 5, 8)},
                                              _block_params(rng, hw=(3, 5), k=2).lmhsa)),
    "ffn_baseline": _with_params(blocks.ffn_baseline, V.ffn_baseline_vjp,
                                 lambda rng: ({"x": _rand(rng, 5, 4)},
                                              blocks.FFNParams(_linear(rng, 4, 16), _linear(rng, 16, 4)))),
    "irffn": _with_params(blocks.irffn_forward, V.irffn_vjp,
                          lambda rng: ({"x": _rand(rng, 1, 3, 3, 4)}, _block_params(rng, d=4, heads=1).irffn)),
    "cmt_block": _with_params(blocks.cmt_block_forward, V.cmt_block_vjp,
                              lambda rng: ({"x": _rand(rng, 1, 4, 4, 8)}, _block_params(rng))),
    "stem": _with_params(blocks.stem_forward, V.stem_vjp,
                         lambda rng: ({"x": _rand(rng, 1, 6, 6, 3)}, blocks.StemParams(
                             (_conv(rng, (3, 3, 3, 4), 2, (0, 1, 0, 1)), _conv(rng, (3, 3, 4, 4), 1, _SAME3),
                              _conv(rng, (3, 3, 4, 4), 1, _SAME3)),
                             tuple(_bn(rng, 4) for _ in range(3))))),
    "patch_agg": _with_params(blocks.patch_agg_forward, V.patch_agg_vjp,
                              lambda rng: ({"x": _rand(rng, 1, 4, 4, 3)},
                                           blocks.PatchAggParams(_conv(rng, (2, 2, 3, 6), 2), _ln(rng, 6)))),
    "head": _with_params(blocks.head_forward, V.head_vjp,
                         lambda rng: ({"x": _rand(rng, 2, 2, 2, 6)},
                                      blocks.HeadParams(_linear(rng, 6, 10), _linear(rng, 10, 3)))),
    "toy_model": _toy_model_case(),
}

# forward ops of the kernel and block modules; every one must have a passing check
PRIMITIVES = ("matmul", "residual_add", "linear", "conv2d", "dwconv2d", "softmax_rows", "softmax_rows_flat",
              "gelu", "layer_norm", "batch_norm_infer", "global_avg_pool", "bicubic_resize", "reshape_permute",
              "cross_entropy")
BLOCK_OPS = ("lpu", "attention_baseline", "lmhsa", "lmhsa_padded", "ffn_baseline", "irffn", "cmt_block",
             "stem", "patch_agg", "head")


def get_op(op: str) -> OpCase:
    try:
        return OPS[op]
    except KeyError:
        raise UnknownOpError(f"unknown op {op!r}; known ops: {', '.join(OPS)}") from None


def vjp(op: str, inputs: dict, params, cotangent):
    """Cotangents ``(inputs, params)`` of op ``op`` at the given point."""
    return get_op(op).vjp(inputs, params, cotangent)


def sign_flipped(op: str):
    """A deliberately wrong VJP for ``op`` (every cotangent negated); a negative control."""
    inner = get_op(op).vjp

    def wrong(inputs, params, g):
        di, dp = inner(inputs, params, g)
        return tree_map(np.negative, di), tree_map(np.negative, dp)

    return wrong


@dataclass(frozen=True)
class GradEntry:
    name: str
    max_rel: float
    max_abs: float
    probes: int


@dataclass
class GradCheckReport:
    op: str
    seed: int
    eps: float
    threshold: float
    entries: list[GradEntry] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max((e.max_rel for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.entries) and self.max_rel < self.threshold

    def __str__(self):
        head = f"{self.op} seed={self.seed}: {'PASS' if self.passed else 'FAIL'} (max rel {self.max_rel:.2e})"
        rows = [f"  {e.name:<40} rel {e.max_rel:.2e}  abs {e.max_abs:.2e}  probes {e.probes}" for e in self.entries]
        return "\n".join([head] + rows)

    def to_dict(self) -> dict:
        return {"op": self.op, "seed": self.seed, "eps": self.eps, "threshold": self.threshold,
                "passed": self.passed, "max_rel": self.max_rel,
                "entries": [e.__dict__ for e in self.entries]}


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def finite_diff_check(op: str, seed: int = 0, eps: float = 1e-4, probes: int = 32,
                      threshold: float = 1e-4, vjp_fn=None, oracle_dtype=np.longdouble) -> GradCheckReport:
    """Compare the 64-bit VJP of ``op`` with central differences of a random scalar projection.

    Up to ``probes`` scalar entries of every floating input and parameter array
    are perturbed by +-eps. The differenced forward passes run on a copy cast
    to ``oracle_dtype``: with extended precision the round-off floor sits well
    below the 1e-8 denominator floor, so parameters whose gradient is exactly
    zero (a key bias shifts every logit of a row equally) still compare cleanly.
    """
    case = get_op(op)
    rng = np.random.default_rng(seed)
    inputs, params = case.make(rng)
    out = case.forward(inputs, params)
    proj = rng.standard_normal(out.shape)
    d_inputs, d_params = (vjp_fn or case.vjp)(inputs, params, proj)
    grads = dict(named_arrays({"input": d_inputs, "param": d_params}))

    def lift(a):
        return a.astype(oracle_dtype) if np.issubdtype(a.dtype, np.floating) else a

    hi = {"input": tree_map(lift, inputs), "param": _share_lift(params, lift)}
    proj_hi = proj.astype(oracle_dtype)

    def objective():
        return np.sum(proj_hi * case.forward(hi["input"], hi["param"]))

    report = GradCheckReport(op, seed, eps, threshold)
    seen = set()
    for name, arr in named_arrays(hi):
        if id(arr) in seen or not np.issubdtype(arr.dtype, np.floating):
            continue
        seen.add(id(arr))
        flat = arr.reshape(-1)
        analytic = grads[name].reshape(-1)
        idx = rng.choice(arr.size, size=min(probes, arr.size), replace=False)
        worst_rel = worst_abs = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, x_plus = objective(), flat[i]
            flat[i] = orig - eps
            f_minus, x_minus = objective(), flat[i]
            flat[i] = orig
            numeric = float((f_plus - f_minus) / (x_plus - x_minus))
            worst_rel = max(worst_rel, relative_error(float(analytic[i]), numeric))
            worst_abs = max(worst_abs, abs(float(analytic[i]) - numeric))
        report.entries.append(GradEntry(name, worst_rel, worst_abs, len(idx)))
    return report


def _share_lift(tree, lift):
    """``tree_map(lift, tree)`` that keeps shared leaves shared (a stage's bias table)."""
    memo = {}

    def one(a):
        if id(a) not in memo:
            memo[id(a)] = lift(a)
        return memo[id(a)]

    return tree_map(one, tree)
