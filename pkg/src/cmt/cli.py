"""Command-line entry point: ``cmt <describe|cost|scale|verify|infer|save-init>``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import cost, serialize
from .errors import CMTError, SerializationError, UnknownVariantError
from .model import (
    PRESETS,
    ModelSpec,
    ScalingParams,
    build,
    forward,
    load,
    load_spec,
    preset,
    save,
    save_spec,
    scale,
    transfer_resolution,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(CMTError):
    pass


def default_seed() -> int:
    raw = os.environ.get("CMT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CMT_SEED must be an integer, got {raw!r}") from None


def resolve_spec(ref: str) -> ModelSpec:
    """A preset name (case-insensitive) or the path of a spec or model file."""
    if os.path.exists(ref):
        return load_spec(ref)
    try:
        return preset(ref)
    except UnknownVariantError:
        if os.sep in ref or ref.endswith(".cmtw"):
            raise FileNotFoundError(f"no such spec file: {ref}") from None
        raise


def _write_json(path, payload) -> None:
    serialize.atomic_write(path, (json.dumps(payload, indent=2) + "\n").encode("utf-8"))


def _fmt_m(x):
    return f"{x / 1e6:.2f}M"


def _fmt_b(x):
    return f"{x / 1e9:.2f}B"


def cmd_describe(args) -> int:
    spec = resolve_spec(args.model)
    res = spec.input_resolution
    rows = [("stage", "output", "layer", "dim", "H", "k", "R", "depth")]
    rows.append(("stem", f"{res // 2}x{res // 2}", "3x3 conv x3, first stride 2", str(spec.stem_channels),
                 "-", "-", "-", "3"))
    for s, (st, side) in enumerate(zip(spec.stages, spec.stage_sides())):
        rows.append((f"stage {s + 1}", f"{side}x{side}", "2x2 patch agg, stride 2 + CMT blocks", str(st.dim),
                     str(st.heads), str(st.reduction), f"{st.expansion:g}", str(st.depth)))
    rows.append(("head", "1x1", f"GAP, FC {spec.head_width}, FC {spec.num_classes}", "-", "-", "-", "-", "-"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    print(f"{spec.name}: {res}x{res} input")
    for r in rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    params = cost.count_params(spec).total_params
    flops = cost.count_flops(spec).total_flops
    line = f"# Params {_fmt_m(params)}, # FLOPs {_fmt_b(flops)} @{res}²"
    ref = cost.PUBLISHED.get(spec.name)
    if ref is not None and res == PRESETS[spec.name].input_resolution:
        line += (f"  (published: {_fmt_m(ref[0])} {params / ref[0] - 1:+.2%} [tol 3%], "
                 f"{_fmt_b(ref[1])} {flops / ref[1] - 1:+.2%} [tol 5%])")
    print(line)
    return EXIT_OK


def cmd_cost(args) -> int:
    spec = resolve_spec(args.model)
    report = cost.count_flops(spec, args.resolution, args.batch)
    print(report.table())
    kinds = ", ".join(f"{k} {_fmt_b(v)}" for k, v in report.flops_by_kind().items())
    print(f"\n{spec.name} @{report.resolution}: {_fmt_m(report.total_params)} params, "
          f"{_fmt_b(report.total_flops)} FLOPs ({report.convention}); by kind: {kinds}")
    payload = report.to_dict()
    if args.analytic:
        payload["analytic"] = []
        res = report.resolution
        for s, st in enumerate(spec.stages):
            side = res // (4 * 2**s)
            n = side * side
            rec = cost.reconcile_cmt_block(side, st.dim, st.heads, st.reduction, st.expansion)
            closed = cost.analytic_cmt_block_closed(n, st.dim, st.reduction)
            print(f"\nstage {s + 1} block: n={n}, d={st.dim}, k={st.reduction}; closed form {float(closed):,.0f}")
            print(rec.table())
            payload["analytic"].append({"stage": s + 1, "n": n, "d": st.dim, "k": st.reduction,
                                        "closed_form": float(closed), "reconcile": rec.to_dict()})
    if args.json:
        _write_json(args.json, payload)
    return EXIT_OK


def cmd_scale(args) -> int:
    spec = resolve_spec(args.model)
    params = ScalingParams(args.alpha, args.beta, args.gamma, args.phi)
    new = scale(spec, params)
    ratio = cost.flops_ratio(spec, new)
    out = args.output or f"{spec.name}_phi{args.phi:g}.cmtw"
    save_spec(new, out)
    print(f"{spec.name} -> {new.name}")
    print(f"  depths {list(spec.depths)} -> {list(new.depths)}")
    print(f"  dims   {list(spec.dims)} -> {list(new.dims)}")
    print(f"  stem   {spec.stem_channels} -> {new.stem_channels}")
    print(f"  resolution {spec.input_resolution} -> {new.input_resolution}")
    old_f, new_f = cost.count_flops(spec).total_flops, cost.count_flops(new).total_flops
    lo, hi = sorted((cost.SCALING_BAND[0] ** args.phi, cost.SCALING_BAND[1] ** args.phi))
    flag = "in band" if cost.in_scaling_band(ratio, args.phi) else "OUTSIDE band"
    print(f"  FLOPs {_fmt_b(old_f)} -> {_fmt_b(new_f)}, ratio {ratio:.3f} "
          f"({flag} [{lo:.3f}, {hi:.3f}]; alpha*beta^1.5*gamma^2 = {params.flops_factor:.3f})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite(args.suite, seed=args.seed, long=args.long)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"\n{len(results) - len(failed)}/{len(results)} checks passed")
    if args.json:
        _write_json(args.json, [r.__dict__ for r in results])
    return EXIT_FAIL if failed else EXIT_OK


def cmd_infer(args) -> int:
    model = load(args.model)
    tensors = serialize.load_tensors(args.input)
    if len(tensors) != 1:
        raise UsageError(f"{args.input}: expected exactly one tensor, found {len(tensors)}")
    x = next(iter(tensors.values()))
    if args.transfer_resolution and x.ndim == 4 and x.shape[1] != model.spec.input_resolution:
        if x.shape[1] != x.shape[2]:
            raise UsageError(f"resolution transfer needs a square input, got {x.shape[1]}x{x.shape[2]}")
        model = transfer_resolution(model, x.shape[1])
    logits, _ = forward(model, x)
    if args.output:
        serialize.save_tensors(args.output, {"logits": logits})
    k = min(args.top_k, logits.shape[1])
    for i, row in enumerate(logits):
        top = np.argsort(-row, kind="stable")[:k]
        print(f"sample {i}: " + ", ".join(f"{int(c)}:{float(row[c]):.6g}" for c in top))
    if args.output:
        print(f"wrote {args.output}")
    return EXIT_OK


def cmd_save_init(args) -> int:
    spec = resolve_spec(args.model)
    model = build(spec, seed=args.seed, dtype=np.dtype(args.dtype))
    save(model, args.output)
    print(f"{spec.name}: {model.num_parameters():,} params, seed {args.seed}, wrote {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default: $CMT_SEED or 0)")

    p = argparse.ArgumentParser(prog="cmt", description="CMT hybrid CNN-transformer toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("describe", parents=[common], help="stage-by-stage architecture table")
    d.add_argument("model", help="preset name or spec file")
    d.set_defaults(fn=cmd_describe)

    c = sub.add_parser("cost", parents=[common], help="per-layer parameter and FLOP report")
    c.add_argument("model")
    c.add_argument("--resolution", type=int, default=None)
    c.add_argument("--batch", type=int, default=1)
    c.add_argument("--json", metavar="PATH", help="also write the report as JSON")
    c.add_argument("--analytic", action="store_true", help="compare closed-form block costs with the counter")
    c.set_defaults(fn=cmd_cost)

    s = sub.add_parser("scale", parents=[common], help="compound-scale a spec and write the result")
    s.add_argument("model")
    s.add_argument("--phi", type=float, required=True)
    s.add_argument("--alpha", type=float, default=1.2)
    s.add_argument("--beta", type=float, default=1.3)
    s.add_argument("--gamma", type=float, default=1.15)
    s.add_argument("-o", "--output", help="spec file to write (default: <name>_phi<phi>.cmtw)")
    s.set_defaults(fn=cmd_scale)

    v = sub.add_parser("verify", parents=[common], help="run property suites")
    v.add_argument("--suite", choices=["kernels", "blocks", "gradients", "costs", "all"], default="all")
    v.add_argument("--long", action="store_true", help="include the micro-training check")
    v.add_argument("--json", metavar="PATH")
    v.set_defaults(fn=cmd_verify)

    i = sub.add_parser("infer", parents=[common], help="run a model file on a tensor file")
    i.add_argument("model")
    i.add_argument("input")
    i.add_argument("--transfer-resolution", action="store_true")
    i.add_argument("-o", "--output", help="logits tensor file to write")
    i.add_argument("--top-k", type=int, default=5)
    i.set_defaults(fn=cmd_infer)

    w = sub.add_parser("save-init", parents=[common], help="write a freshly initialized model file")
    w.add_argument("model")
    w.add_argument("output")
    w.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    w.set_defaults(fn=cmd_save_init)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is None:
            args.seed = default_seed()
        return args.fn(args)
    except (SerializationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CMTError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
