"""Property suites behind ``cmt verify``.

Each check yields one :class:`CheckResult` with its worst observed error, so
a failing run says by how much it failed.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, replace

import numpy as np

from . import blocks as B
from . import cost, oracles
from . import tensor as T
from .grad import check as gc
from .model import PRESETS, ScalingParams, StageConfig, _block, build, forward, scale
from .tree import tree_map

SUITES = ("kernels", "blocks", "gradients", "costs")
KERNEL_CASES = 100
GRAD_SEEDS = 10


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    passed: bool
    worst: float | None = None
    detail: str = ""

    def line(self) -> str:
        worst = "" if self.worst is None else f"  worst={self.worst:.3g}"
        detail = f"  ({self.detail})" if self.detail else ""
        return f"{'PASS' if self.passed else 'FAIL'}  {self.suite}/{self.name}{worst}{detail}"


def _below(suite, name, worst, tol, detail=""):
    return CheckResult(suite, name, bool(worst < tol), float(worst), detail or f"tol {tol:g}")


# -- kernels ---------------------------------------------------------------

def _kernel_case(op, rng):
    """One random case: returns (fast float32 result, 64-bit oracle result)."""
    def r(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    if op == "matmul":
        m, k, n = rng.integers(1, 17, 3)
        a, b = r(m, k), r(k, n)
        return T.matmul(a, b), oracles.matmul(a, b)
    if op in ("conv2d", "dwconv2d"):
        kk = int(rng.choice([1, 2, 3]))
        stride = int(rng.choice([1, 2]))
        h, w = (int(v) for v in rng.integers(kk, 17, 2))
        pad = T.same_padding_2d(h, w, kk, stride) if rng.random() < 0.5 else (0, 0, 0, 0)
        if (h + pad[0] + pad[1] - kk) % stride or (w + pad[2] + pad[3] - kk) % stride:
            pad = T.same_padding_2d(h, w, kk, stride)
            if (h + pad[0] + pad[1] - kk) % stride or (w + pad[2] + pad[3] - kk) % stride:
                stride = 1
                pad = T.same_padding_2d(h, w, kk, 1)
        n = int(rng.integers(1, 3))
        if op == "conv2d":
            cin, cout = (int(v) for v in rng.integers(1, 5, 2))
            x, kern, bias = r(n, h, w, cin), r(kk, kk, cin, cout), r(cout)
            return T.conv2d(x, T.ConvWeights(kern, bias, stride, pad)), oracles.conv2d(x, kern, bias, stride, pad)
        c = int(rng.integers(1, 6))
        x, kern, bias = r(n, h, w, c), r(kk, kk, c), r(c)
        return T.dwconv2d(x, T.ConvWeights(kern, bias, stride, pad)), oracles.dwconv2d(x, kern, bias, stride, pad)
    if op == "softmax_rows":
        x = r(*rng.integers(1, 17, 2)) * 4
        return T.softmax_rows(x), oracles.softmax_rows(x)
    if op == "gelu":
        x = r(*rng.integers(1, 17, 2)) * 3
        return T.gelu(x), oracles.gelu(x)
    if op == "layer_norm":
        x = r(*rng.integers(1, 17, 2))
        d = x.shape[1]
        g, b = r(d), r(d)
        return T.layer_norm(x, g, b), oracles.layer_norm(x, g, b)
    if op == "batch_norm_infer":
        shape = tuple(int(v) for v in rng.integers(1, 9, 4))
        c = shape[-1]
        x, g, b, mu = r(*shape), r(c), r(c), r(c)
        var = rng.uniform(0.1, 2.0, c).astype(np.float32)
        return T.batch_norm_infer(x, g, b, mu, var), oracles.batch_norm_infer(x, g, b, mu, var)
    if op == "global_avg_pool":
        x = r(*rng.integers(1, 17, 4))
        return T.global_avg_pool(x), oracles.global_avg_pool(x)
    if op == "bicubic_resize":
        h, w, h2, w2 = (int(v) for v in rng.integers(1, 17, 4))
        m = r(h, w)
        return T.bicubic_resize(m, h2, w2), oracles.bicubic_resize(m, h2, w2)
    if op == "reshape_permute":
        ndim = int(rng.integers(1, 5))
        x = r(*rng.integers(1, 6, ndim))
        axes = tuple(int(a) for a in rng.permutation(ndim))
        return T.reshape_permute(x, axes=axes), oracles.permute(x, axes)
    raise KeyError(op)


KERNEL_OPS = ("matmul", "conv2d", "dwconv2d", "softmax_rows", "gelu", "layer_norm", "batch_norm_infer",
              "global_avg_pool", "bicubic_resize", "reshape_permute")


def kernel_checks(seed: int = 0, cases: int = KERNEL_CASES) -> list[CheckResult]:
    out = []
    for op in KERNEL_OPS:
        rng = np.random.default_rng([seed, KERNEL_OPS.index(op)])
        worst = max(T.rel_err(*_kernel_case(op, rng)) for _ in range(cases))
        out.append(_below("kernels", f"{op} vs loop oracle", worst, 1e-5, f"{cases} random shapes, tol 1e-5"))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5))
    x_shift = x + rng.standard_normal((3, 1)) * 10
    sums = np.abs(T.softmax_rows(x).sum(axis=-1) - 1).max()
    out.append(_below("kernels", "softmax rows sum to 1", sums, 1e-6))
    out.append(_below("kernels", "softmax shift invariance", T.rel_err(T.softmax_rows(x_shift), T.softmax_rows(x)), 1e-6))
    x = rng.standard_normal((2, 7, 6, 4)).astype(np.float32)
    delta = np.zeros((3, 3, 4), np.float32)
    delta[1, 1] = 1
    ident = T.dwconv2d(x, T.ConvWeights(delta, np.zeros(4, np.float32), 1, (1, 1, 1, 1)))
    out.append(_below("kernels", "dwconv delta kernel is identity", np.abs(ident - x).max(), 1e-7))
    m = rng.standard_normal((6, 9))
    out.append(_below("kernels", "bicubic same-size identity", np.abs(T.bicubic_resize(m, 6, 9) - m).max(), 1e-6))
    const = T.bicubic_resize(np.full((5, 4), 2.5), 11, 3)
    out.append(_below("kernels", "bicubic preserves constants", np.abs(const - 2.5).max(), 1e-6))
    y = T.layer_norm(rng.standard_normal((5, 16)) * 3 + 1, np.ones(16), np.zeros(16))
    moment = max(np.abs(y.mean(-1)).max(), np.abs(y.var(-1) - 1).max() / 10)
    out.append(_below("kernels", "layer_norm moments", moment, 1e-5, "|mean| < 1e-5, |var-1| < 1e-4"))
    return out


# -- blocks ----------------------------------------------------------------

def _random_block(rng, d, heads, k, hw, expansion=4):
    make = gc.random_make(rng)
    m = B.reduced_extent(hw[0], k) * B.reduced_extent(hw[1], k)
    rel = make("rel_bias", (heads, hw[0] * hw[1], m), "weight")
    return _block(make, "block", StageConfig(1, d, heads, k, expansion), rel)


def lmhsa_oracle(p: B.LMHSAParams, x: np.ndarray) -> np.ndarray:
    """Per-sample, per-head loop evaluation of lightweight attention."""
    nb, hh, ww, d = x.shape
    k, h = p.reduction, p.heads
    dh = d // h
    out = np.zeros((nb, hh * ww, d))

    def reduced(w):
        if w is None:
            return x
        ph, pw = -hh % k, -ww % k
        return oracles.dwconv2d(x, w.kernel, w.bias, k, (0, ph, 0, pw))

    xk, xv = reduced(p.dw_k), reduced(p.dw_v)
    for b in range(nb):
        q = oracles.matmul(x[b].reshape(-1, d), p.q.weight) + p.q.bias
        kk = oracles.matmul(xk[b].reshape(-1, d), p.k.weight) + p.k.bias
        vv = oracles.matmul(xv[b].reshape(-1, d), p.v.weight) + p.v.bias
        heads = [oracles.attention(q[:, i * dh:(i + 1) * dh], kk[:, i * dh:(i + 1) * dh], vv[:, i * dh:(i + 1) * dh],
                                   p.rel_bias[i]) for i in range(h)]
        out[b] = oracles.matmul(np.concatenate(heads, axis=1), p.o.weight) + p.o.bias
    return out.reshape(nb, hh, ww, d)


def block_checks(seed: int = 0, presets=tuple(PRESETS)) -> list[CheckResult]:
    out = []
    rng = np.random.default_rng(seed)

    worst = 0.0
    for _ in range(5):
        p = _random_block(rng, 8, 1, 1, (4, 4)).lmhsa
        p = replace(p, rel_bias=np.zeros_like(p.rel_bias))
        x = rng.standard_normal((2, 4, 4, 8))
        t = T.to_tokens(x)
        base = B.linear(B.attention_baseline(B.linear(t, p.q), B.linear(t, p.k), B.linear(t, p.v)), p.o)
        worst = max(worst, T.rel_err(B.lmhsa_forward(p, x), T.to_spatial(base, 4, 4)))
    out.append(_below("blocks", "LMHSA(k=1, B=0, h=1) equals baseline attention", worst, 1e-6))

    worst = 0.0
    for heads, k, hw in ((2, 2, (4, 4)), (4, 2, (3, 5)), (1, 4, (8, 8)), (2, 1, (2, 3))):
        p = _random_block(rng, 8, heads, k, hw).lmhsa
        x = rng.standard_normal((1, *hw, 8))
        worst = max(worst, T.rel_err(B.lmhsa_forward(p, x), lmhsa_oracle(p, x)))
    out.append(_below("blocks", "LMHSA matches per-head loop oracle", worst, 1e-6))

    worst = 0.0
    for heads, k, hw in ((2, 2, (4, 4)), (1, 8, (7, 7)), (4, 2, (5, 3))):
        p = _random_block(rng, 8, heads, k, hw).lmhsa
        _, attn = B.lmhsa_forward(p, rng.standard_normal((2, *hw, 8)), return_attention=True)
        worst = max(worst, float(np.abs(attn.sum(axis=-1) - 1).max()), float(-min(attn.min(), 0)))
    out.append(_below("blocks", "attention rows are distributions", worst, 1e-6))

    p = tree_map(np.zeros_like, _random_block(rng, 8, 2, 2, (4, 4)))
    x = rng.standard_normal((2, 4, 4, 8))
    out.append(_below("blocks", "zeroed CMT block is the identity", T.rel_err(B.cmt_block_forward(p, x), x), 1e-6))

    p = _random_block(rng, 8, 2, 2, (4, 4))
    y = B.cmt_block_forward(p, x)
    out.append(_below("blocks", "CMT block preserves shape and finiteness",
                      0.0 if y.shape == x.shape and np.all(np.isfinite(y)) else 1.0, 0.5))

    for name in presets:
        spec = PRESETS[name]
        model = build(spec, seed=seed)
        res = spec.input_resolution
        logits, pyramid = forward(model, rng.standard_normal((1, res, res, 3)).astype(np.float32))
        strides = [res // f.shape[1] for f in pyramid]
        ok = strides == [4, 8, 16, 32] and [f.shape[-1] for f in pyramid] == list(spec.dims) \
            and logits.shape == (1, spec.num_classes) and bool(np.all(np.isfinite(logits)))
        out.append(CheckResult("blocks", f"{name} pyramid strides", ok, None, f"strides {strides}"))
    return out


# -- gradients -------------------------------------------------------------

def gradient_checks(seed: int = 0, seeds: int = GRAD_SEEDS, long: bool = False) -> list[CheckResult]:
    out = []
    for op in gc.PRIMITIVES + gc.BLOCK_OPS:
        worst = max(gc.finite_diff_check(op, seed=seed + s).max_rel for s in range(seeds))
        out.append(_below("gradients", f"vjp {op}", worst, 1e-4, f"{seeds} seeds, 64-bit, eps 1e-4"))
    r = gc.finite_diff_check("toy_model", seed=seed, probes=2)
    out.append(_below("gradients", "vjp toy_model (shared stage bias)", r.max_rel, 1e-4, "2 probes per array"))
    for op in ("gelu", "cmt_block"):
        r = gc.finite_diff_check(op, seed=seed, vjp_fn=gc.sign_flipped(op))
        out.append(CheckResult("gradients", f"sign-flipped {op} vjp is rejected", not r.passed, r.max_rel,
                               "negative control"))
    if long:
        from .grad.train import micro_train, synthetic_dataset
        from .model import toy_spec

        spec = toy_spec()
        x, y = synthetic_dataset(seed=seed)
        losses = micro_train(spec, x, y)
        shuffled = micro_train(spec, x, np.random.default_rng(seed + 1).permutation(y))
        out.append(_below("gradients", "micro_train reaches loss < 0.05", min(losses), 0.05, "200 steps"))
        out.append(CheckResult("gradients", "true labels beat shuffled labels", losses[-1] < shuffled[-1],
                               losses[-1], f"shuffled {shuffled[-1]:.3g}"))
    return out


# -- costs -----------------------------------------------------------------

def cost_checks(seed: int = 0, cases: int = 1000) -> list[CheckResult]:
    out = []
    for name, (params, flops) in cost.PUBLISHED.items():
        spec = PRESETS[name]
        got_p = cost.count_params(spec).total_params
        got_f = cost.count_flops(spec).total_flops
        dp, df = got_p / params - 1, got_f / flops - 1
        out.append(CheckResult("costs", f"{name} params", abs(dp) <= cost.PARAM_TOL, abs(dp),
                               f"{got_p / 1e6:.2f}M vs {params / 1e6:.2f}M, {dp:+.2%}, tol 3%"))
        out.append(CheckResult("costs", f"{name} FLOPs", abs(df) <= cost.FLOP_TOL, abs(df),
                               f"{got_f / 1e9:.3f}B vs {flops / 1e9:.2f}B @{spec.input_resolution}, {df:+.2%}, tol 5%"))

    rng = random.Random(seed)
    bad = 0
    for _ in range(cases):
        n, d, k = rng.randint(1, 4096), rng.randint(1, 1024), rng.randint(1, 8)
        parts = cost.analytic_cmt_block(n, d, k)
        bad += parts["total"] != cost.analytic_cmt_block_closed(n, d, k)
        bad += cost.analytic_transformer_block(n, d) != cost.analytic_mhsa(n, d, d, d) + cost.analytic_ffn(n, d, 4)
    out.append(CheckResult("costs", "closed-form block FLOPs equal the sum of their parts", bad == 0, float(bad),
                           f"{cases} random (n, d, k), exact rationals"))

    worst = 0
    for side, d, heads in ((7, 512, 8), (14, 256, 4), (4, 64, 2), (9, 30, 3)):
        rec = cost.reconcile_cmt_block(side, d, heads, 1)
        worst = max(worst, max(abs(v) for v in rec.deviations().values()))
        rec = cost.reconcile_transformer_block(side * side, d)
        worst = max(worst, max(abs(v) for v in rec.deviations().values()))
    out.append(CheckResult("costs", "instrumented counter equals closed forms at k=1", worst == 0, float(worst)))

    s224, s448 = cost.count_flops(PRESETS["CMT-S"], 224), cost.count_flops(PRESETS["CMT-S"], 448)
    conv = [(a.flops, b.flops) for a, b in zip(s224.entries, s448.entries) if a.kind == "conv"]
    exact = all(b == 4 * a for a, b in conv)
    out.append(CheckResult("costs", "conv FLOPs scale exactly 4x from 224 to 448", exact, None,
                           f"attention grows {s448.flops_by_kind()['attention'] / s224.flops_by_kind()['attention']:.1f}x"))

    for name, spec in PRESETS.items():
        same = scale(spec, ScalingParams(phi=0)) == spec
        ratio = cost.flops_ratio(spec, scale(spec, ScalingParams(phi=1)))
        ok = same and cost.in_scaling_band(ratio, 1)
        out.append(CheckResult("costs", f"{name} scaling (phi=0 identity, phi=1 ratio in [2.0, 2.6])", ok, ratio,
                               f"ratio {ratio:.3f}"))
    return out


def run_suite(suite: str, seed: int = 0, long: bool = False) -> list[CheckResult]:
    if suite == "all":
        return [r for s in SUITES for r in run_suite(s, seed, long)]
    if suite == "kernels":
        return kernel_checks(seed)
    if suite == "blocks":
        return block_checks(seed)
    if suite == "gradients":
        return gradient_checks(seed, long=long)
    if suite == "costs":
        return cost_checks(seed)
    raise KeyError(suite)

