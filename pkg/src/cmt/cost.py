"""Parameter and FLOP accounting.

Two independent routes: a symbolic walk over the architecture that counts
every layer from shapes alone, and the closed-form complexity formulas for
transformer and CMT blocks. One multiply-accumulate counts as one FLOP;
softmax, activations, normalization, residual adds, pooling and bias adds
are tallied separately in ``nonmac`` and left out of the headline number.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .blocks import reduced_extent
from .errors import ConfigError
from .model import ModelSpec, expanded_width

CONVENTION = "MAC=1 FLOP"

# published (params, FLOPs) per preset at its native resolution
PUBLISHED = {
    "CMT-Ti": (9.49e6, 0.64e9),
    "CMT-XS": (15.24e6, 1.54e9),
    "CMT-S": (25.14e6, 4.04e9),
    "CMT-B": (45.72e6, 9.33e9),
}
PARAM_TOL = 0.03
FLOP_TOL = 0.05
SCALING_BAND = (2.0, 2.6)


@dataclass(frozen=True)
class CostEntry:
    name: str
    kind: str  # conv | attention | norm | head
    params: int = 0
    flops: int = 0
    nonmac: int = 0


@dataclass
class CostReport:
    entries: list[CostEntry]
    resolution: int
    batch: int = 1
    convention: str = CONVENTION
    model: str = ""

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def total_nonmac(self) -> int:
        return sum(e.nonmac for e in self.entries)

    def flops_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.kind] = out.get(e.kind, 0) + e.flops
        return out

    def select(self, prefix: str) -> "CostReport":
        return CostReport([e for e in self.entries if e.name.startswith(prefix)], self.resolution,
                          self.batch, self.convention, self.model)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "resolution": self.resolution,
            "batch": self.batch,
            "convention": self.convention,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "total_nonmac": self.total_nonmac,
            "flops_by_kind": self.flops_by_kind(),
            "entries": [asdict(e) for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [5])
        lines = [f"{'layer':<{width}}  {'kind':<9} {'params':>12} {'flops':>15} {'non-MAC':>13}"]
        for e in self.entries:
            lines.append(f"{e.name:<{width}}  {e.kind:<9} {e.params:>12,} {e.flops:>15,} {e.nonmac:>13,}")
        lines.append(f"{'total':<{width}}  {'':<9} {self.total_params:>12,} {self.total_flops:>15,} "
                     f"{self.total_nonmac:>13,}")
        return "\n".join(lines)


class _Counter:
    def __init__(self, batch):
        self.batch = batch
        self.entries: list[CostEntry] = []

    def add(self, name, kind, params=0, flops=0, nonmac=0):
        self.entries.append(CostEntry(name, kind, int(params), int(flops) * self.batch, int(nonmac) * self.batch))


def _bn_params(c):
    return 2 * c  # gamma, beta; running statistics are not learnable


def cmt_block_entries(counter: _Counter, prefix: str, side: int, d: int, heads: int, k: int, expansion: float,
                      rel_bias_inline: bool = False):
    """Count one CMT block on a ``side x side`` map."""
    n = side * side
    m = reduced_extent(side, k) ** 2
    e = expanded_width(d, expansion)
    counter.add(f"{prefix}.lpu", "conv", params=9 * d + d, flops=9 * n * d, nonmac=2 * n * d)
    counter.add(f"{prefix}.ln1", "norm", params=2 * d, nonmac=n * d)
    counter.add(f"{prefix}.lmhsa.proj", "conv", params=4 * (d * d + d),
                flops=2 * n * d * d + 2 * m * d * d, nonmac=2 * n * d + 2 * m * d)
    if k > 1:
        counter.add(f"{prefix}.lmhsa.reduce", "conv", params=2 * (k * k * d + d),
                    flops=2 * m * k * k * d, nonmac=2 * m * d)
    counter.add(f"{prefix}.lmhsa.attention", "attention",
                params=heads * n * m if rel_bias_inline else 0,
                flops=2 * n * m * d, nonmac=3 * heads * n * m + n * d)
    counter.add(f"{prefix}.ln2", "norm", params=2 * d, nonmac=n * d)
    counter.add(f"{prefix}.irffn", "conv",
                params=(d * e + e) + _bn_params(e) + (9 * e + e) + _bn_params(e) + (e * d + d) + _bn_params(d),
                flops=2 * n * d * e + 9 * n * e,
                nonmac=7 * n * e + 3 * n * d)


def _walk(spec: ModelSpec, resolution: int, batch: int) -> CostReport:
    counter = _Counter(batch)
    side = resolution // 2
    c_in, c = 3, spec.stem_channels
    for i in range(3):
        counter.add(f"stem.{i}", "conv", params=9 * c_in * c + c + _bn_params(c),
                    flops=side * side * 9 * c_in * c, nonmac=4 * side * side * c)
        c_in = c
    for s, st in enumerate(spec.stages):
        side //= 2
        n = side * side
        d = st.dim
        counter.add(f"stages.{s}.agg", "conv", params=4 * c_in * d + d + 2 * d,
                    flops=n * 4 * c_in * d, nonmac=2 * n * d)
        m = reduced_extent(side, st.reduction) ** 2
        counter.add(f"stages.{s}.rel_bias", "attention", params=st.heads * n * m)
        for b in range(st.depth):
            cmt_block_entries(counter, f"stages.{s}.blocks.{b}", side, d, st.heads, st.reduction, st.expansion)
        c_in = d
    counter.add("head.pool", "head", nonmac=side * side * c_in)
    counter.add("head.fc", "head", params=c_in * spec.head_width + spec.head_width,
                flops=c_in * spec.head_width, nonmac=2 * spec.head_width)
    counter.add("head.classifier", "head", params=spec.head_width * spec.num_classes + spec.num_classes,
                flops=spec.head_width * spec.num_classes, nonmac=spec.num_classes)
    return CostReport(counter.entries, resolution, batch, model=spec.name)


def count_params(spec: ModelSpec) -> CostReport:
    """Learnable scalars per layer at the spec's native resolution."""
    return _walk(spec, spec.input_resolution, 1)


def count_flops(spec: ModelSpec, resolution: int | None = None, batch: int = 1) -> CostReport:
    res = spec.input_resolution if resolution is None else resolution
    if res < 32 or res % 32:
        raise ConfigError(f"resolution {res} is not a positive multiple of 32")
    return _walk(spec, res, batch)


def flops_ratio(spec: ModelSpec, scaled: ModelSpec) -> float:
    """FLOPs of ``scaled`` at its own resolution over FLOPs of ``spec``."""
    return count_flops(scaled).total_flops / count_flops(spec).total_flops


def in_scaling_band(ratio: float, phi: float) -> bool:
    lo, hi = sorted((SCALING_BAND[0] ** phi, SCALING_BAND[1] ** phi))
    return lo <= ratio <= hi


def block_cost(side: int, d: int, heads: int, k: int, expansion: float = 4) -> dict[str, int]:
    """Instrumented MACs of one CMT block split as lpu / lmhsa / irffn."""
    counter = _Counter(1)
    cmt_block_entries(counter, "b", side, d, heads, k, expansion)
    parts = {"lpu": 0, "lmhsa": 0, "irffn": 0}
    for e in counter.entries:
        part = e.name.split(".")[1]
        if part in parts:
            parts[part] += e.flops
    parts["total"] = sum(parts.values())
    return parts


def transformer_block_cost(n: int, d: int, r: int = 4, d_k: int | None = None, d_v: int | None = None) -> dict[str, int]:
    """Instrumented MACs of a standard MHSA + two-linear FFN block on ``n`` tokens."""
    d_k = d if d_k is None else d_k
    d_v = d if d_v is None else d_v
    proj = n * d * d_k * 2 + n * d * d_v + n * d_v * d  # Q, K, V, output
    attn = n * n * d_k + n * n * d_v  # Q K^T and A V
    ffn = n * d * (r * d) + n * (r * d) * d
    return {"mhsa": proj + attn, "ffn": ffn, "total": proj + attn + ffn}


def _num(x):
    x = Fraction(x)
    return int(x) if x.denominator == 1 else x


def analytic_mhsa(n, d, d_k, d_v):
    return _num(2 * n * d * (d_k + d_v) + n * n * (d_k + d_v))


def analytic_ffn(n, d, r):
    return _num(2 * n * d * d * Fraction(r))


def analytic_transformer_block(n, d):
    return _num(12 * n * d * d + 2 * n * n * d)


def analytic_cmt_block(n, d, k) -> dict:
    """Per-part closed forms (LPU, LMHSA, IRFFN) and their sum; exact rationals."""
    k2 = Fraction(k * k)
    lpu = 9 * n * d
    lmhsa = 2 * n * d * d * (1 + 1 / k2) + 2 * n * n * d / k2
    irffn = 8 * n * d * d + 36 * n * d
    return {"lpu": _num(lpu), "lmhsa": _num(lmhsa), "irffn": _num(irffn), "total": _num(lpu + lmhsa + irffn)}


def analytic_cmt_block_closed(n, d, k):
    k2 = Fraction(k * k)
    return _num(10 * n * d * d * (1 + Fraction(1, 5) / k2) + 2 * n * n * d / k2 + 45 * n * d)


@dataclass
class Reconciliation:
    parts: dict[str, dict] = field(default_factory=dict)

    def deviations(self) -> dict:
        return {k: v["abs_dev"] for k, v in self.parts.items()}

    def table(self) -> str:
        lines = [f"{'part':<8} {'reference':>16} {'compared':>16} {'abs dev':>14} {'rel dev':>9}  note"]
        for name, p in self.parts.items():
            lines.append(f"{name:<8} {float(p['reference']):>16,.0f} {float(p['compared']):>16,.0f} "
                         f"{float(p['abs_dev']):>14,.0f} {float(p['rel_dev']):>9.2%}  {p['note']}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {k: {f: (float(v) if isinstance(v, Fraction) else v) for f, v in p.items()}
                for k, p in self.parts.items()}


def reconcile(reference: dict, compared: dict, notes: dict | None = None) -> Reconciliation:
    """Per-part deviation ``compared - reference``.

    The relative deviation divides by ``max(|reference|, |compared|)`` so that
    swapping the arguments exactly negates every deviation.
    """
    notes = notes or {}
    out = Reconciliation()
    for part in reference:
        if part not in compared:
            continue
        a, b = Fraction(reference[part]), Fraction(compared[part])
        denom = max(abs(a), abs(b))
        out.parts[part] = {
            "reference": _num(a),
            "compared": _num(b),
            "abs_dev": _num(b - a),
            "rel_dev": float((b - a) / denom) if denom else 0.0,
            "note": notes.get(part, ""),
        }
    return out


def reconcile_cmt_block(side: int, d: int, heads: int, k: int, expansion: float = 4) -> Reconciliation:
    """Closed-form block FLOPs against the instrumented counter, with known gaps explained."""
    n = side * side
    analytic = analytic_cmt_block(n, d, k)
    measured = block_cost(side, d, heads, k, expansion)
    notes = {}
    if k > 1:
        m = reduced_extent(side, k) ** 2
        notes["lmhsa"] = f"formula omits the two k x k reduction convs ({2 * m * k * k * d:,} MACs)"
    e = expanded_width(d, expansion)
    if e != 4 * d:
        notes["irffn"] = f"formula assumes r=4; this block expands {d} -> {e}"
    if notes:
        notes["total"] = "sum of the part gaps"
    return reconcile(analytic, measured, notes)


def reconcile_transformer_block(n: int, d: int) -> Reconciliation:
    analytic = {"mhsa": analytic_mhsa(n, d, d, d), "ffn": analytic_ffn(n, d, 4),
                "total": analytic_transformer_block(n, d)}
    return reconcile(analytic, transformer_block_cost(n, d))
