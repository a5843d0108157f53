"""Model family: the four published presets, compound scaling, initialization, inference,
relative-bias resolution transfer and model files."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from functools import cached_property

import numpy as np

from . import serialize
from .blocks import (
    BatchNormParams,
    CMTBlockParams,
    HeadParams,
    IRFFNParams,
    LayerNormParams,
    Linear,
    LMHSAParams,
    LPUParams,
    PatchAggParams,
    StemParams,
    cmt_block_forward,
    head_forward,
    patch_agg_forward,
    reduced_extent,
    stem_forward,
)
from .errors import ConfigError, ParameterError, ResolutionError, SerializationError, ShapeError, UnknownVariantError
from .tensor import ConvWeights, bicubic_resize, same_padding_2d

HEADS = (1, 2, 4, 8)
REDUCTIONS = (8, 4, 2, 1)
INIT_STD = 0.02


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def expanded_width(dim: int, expansion: float) -> int:
    return round_half_up(dim * expansion)


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    heads: int
    reduction: int
    expansion: float


@dataclass(frozen=True)
class ModelSpec:
    name: str
    stem_channels: int
    stages: tuple[StageConfig, ...]
    input_resolution: int
    head_width: int = 1280
    num_classes: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        self.validate()

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ConfigError(f"{self.name}: expected exactly 4 stages, got {len(self.stages)}")
        for i, st in enumerate(self.stages, 1):
            if st.depth < 1:
                raise ConfigError(f"{self.name}: stage {i} depth must be >= 1, got {st.depth}")
            if st.heads < 1 or st.dim % st.heads:
                raise ConfigError(f"{self.name}: stage {i} dim {st.dim} is not divisible by {st.heads} heads")
            if st.reduction not in (1, 2, 4, 8):
                raise ConfigError(f"{self.name}: stage {i} reduction {st.reduction} not in {{1, 2, 4, 8}}")
            if expanded_width(st.dim, st.expansion) < st.dim:
                raise ConfigError(f"{self.name}: stage {i} expansion {st.expansion} shrinks the width")
        dims = [st.dim for st in self.stages]
        if any(b <= a for a, b in zip(dims, dims[1:])):
            raise ConfigError(f"{self.name}: stage dims must be strictly increasing, got {dims}")
        if self.input_resolution < 32 or self.input_resolution % 32:
            raise ConfigError(f"{self.name}: resolution {self.input_resolution} is not a positive multiple of 32")
        for label, value in (("stem_channels", self.stem_channels), ("head_width", self.head_width),
                             ("num_classes", self.num_classes)):
            if value < 1:
                raise ConfigError(f"{self.name}: {label} must be >= 1, got {value}")

    @property
    def depths(self):
        return [s.depth for s in self.stages]

    @property
    def dims(self):
        return [s.dim for s in self.stages]

    def stage_sides(self, resolution: int | None = None) -> list[int]:
        """Feature-map side of each stage (strides 4, 8, 16, 32)."""
        res = resolution or self.input_resolution
        return [res // 4, res // 8, res // 16, res // 32]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            stages = tuple(StageConfig(**s) for s in d["stages"])
            return cls(
                name=d["name"],
                stem_channels=d["stem_channels"],
                stages=stages,
                input_resolution=d["input_resolution"],
                head_width=d.get("head_width", 1280),
                num_classes=d.get("num_classes", 1000),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed spec record: {exc}") from exc


def _preset(name, stem, depths, dims, expansion, res):
    stages = tuple(StageConfig(d, c, h, k, expansion) for d, c, h, k in zip(depths, dims, HEADS, REDUCTIONS))
    return ModelSpec(name, stem, stages, res)


PRESETS = {
    "CMT-Ti": _preset("CMT-Ti", 16, (2, 2, 10, 2), (46, 92, 184, 368), 3.6, 160),
    "CMT-XS": _preset("CMT-XS", 16, (3, 3, 12, 3), (52, 104, 208, 416), 3.8, 192),
    "CMT-S": _preset("CMT-S", 32, (3, 3, 16, 3), (64, 128, 256, 512), 4, 224),
    "CMT-B": _preset("CMT-B", 38, (4, 4, 20, 4), (76, 152, 304, 608), 4, 256),
}


def preset(name: str) -> ModelSpec:
    for key, spec in PRESETS.items():
        if key.lower() == name.lower():
            return spec
    raise UnknownVariantError(name, PRESETS)


def toy_spec(num_classes: int = 2, head_width: int = 1280) -> ModelSpec:
    """Desk-scale spec: dims [8, 16, 32, 64], one block per stage, 32x32 inputs."""
    stages = tuple(StageConfig(1, c, h, k, 4) for c, h, k in zip((8, 16, 32, 64), HEADS, REDUCTIONS))
    return ModelSpec("toy", 8, stages, 32, head_width=head_width, num_classes=num_classes)


@dataclass(frozen=True)
class ScalingParams:
    alpha: float = 1.2
    beta: float = 1.3
    gamma: float = 1.15
    phi: float = 1.0

    def __post_init__(self):
        for label in ("alpha", "beta", "gamma"):
            if getattr(self, label) < 1:
                raise ParameterError(f"{label} must be >= 1, got {getattr(self, label)}")

    @property
    def flops_factor(self) -> float:
        return self.alpha * self.beta**1.5 * self.gamma**2


def scale(spec: ModelSpec, s: ScalingParams) -> ModelSpec:
    """Compound scaling: depth x alpha^phi, width x beta^phi, resolution x gamma^phi.

    Depths round half-up (min 1), stage dims snap to the nearest multiple of the
    head count, the stem width scales with the dims, and the resolution snaps to
    the nearest multiple of 32.
    """
    if s.phi == 0:
        return spec
    fd, fw, fr = s.alpha**s.phi, s.beta**s.phi, s.gamma**s.phi
    res = 32 * round_half_up(spec.input_resolution * fr / 32)
    if res < 32:
        raise ConfigError(
            f"scaling {spec.name} by phi={s.phi} underflows the resolution "
            f"({spec.input_resolution} x {fr:.4g} rounds to {res})"
        )
    stages = tuple(
        replace(
            st,
            depth=max(1, round_half_up(st.depth * fd)),
            dim=st.heads * max(1, round_half_up(st.dim * fw / st.heads)),
        )
        for st in spec.stages
    )
    return replace(
        spec,
        name=f"{spec.name}(phi={s.phi:g})",
        stem_channels=max(1, round_half_up(spec.stem_channels * fw)),
        stages=stages,
        input_resolution=res,
    )


@dataclass(frozen=True)
class StageParams:
    agg: PatchAggParams
    blocks: tuple[CMTBlockParams, ...]


@dataclass(frozen=True)
class Network:
    stem: StemParams
    stages: tuple[StageParams, ...]
    head: HeadParams


def rel_bias_name(stage: int) -> str:
    return f"stages.{stage}.rel_bias"


def _linear(make, prefix, d_in, d_out):
    return Linear(make(f"{prefix}.weight", (d_in, d_out), "weight"), make(f"{prefix}.bias", (d_out,), "zeros"))


def _ln(make, prefix, d):
    return LayerNormParams(make(f"{prefix}.gamma", (d,), "ones"), make(f"{prefix}.beta", (d,), "zeros"))


def _bn(make, prefix, d):
    return BatchNormParams(
        make(f"{prefix}.gamma", (d,), "ones"),
        make(f"{prefix}.beta", (d,), "zeros"),
        make(f"{prefix}.running_mean", (d,), "zeros"),
        make(f"{prefix}.running_var", (d,), "ones"),
    )


def _conv(make, prefix, kernel_shape, stride=1, padding=(0, 0, 0, 0)):
    return ConvWeights(
        make(f"{prefix}.kernel", kernel_shape, "weight"),
        make(f"{prefix}.bias", (kernel_shape[-1],), "zeros"),
        stride,
        padding,
    )


def _block(make, prefix, st: StageConfig, rel_bias):
    d, k = st.dim, st.reduction
    e = expanded_width(d, st.expansion)
    same3 = same_padding_2d(2, 2, 3, 1)  # padding for even extents; all feature maps here are even
    lm = f"{prefix}.lmhsa"
    reduce = (lambda nm: _conv(make, f"{lm}.{nm}", (k, k, d), stride=k)) if k > 1 else (lambda nm: None)
    return CMTBlockParams(
        lpu=LPUParams(_conv(make, f"{prefix}.lpu.dw", (3, 3, d), padding=same3)),
        ln1=_ln(make, f"{prefix}.ln1", d),
        lmhsa=LMHSAParams(
            q=_linear(make, f"{lm}.q", d, d),
            k=_linear(make, f"{lm}.k", d, d),
            v=_linear(make, f"{lm}.v", d, d),
            o=_linear(make, f"{lm}.o", d, d),
            dw_k=reduce("dw_k"),
            dw_v=reduce("dw_v"),
            rel_bias=rel_bias,
            heads=st.heads,
            reduction=k,
        ),
        ln2=_ln(make, f"{prefix}.ln2", d),
        irffn=IRFFNParams(
            expand=_linear(make, f"{prefix}.irffn.expand", d, e),
            bn1=_bn(make, f"{prefix}.irffn.bn1", e),
            dw=_conv(make, f"{prefix}.irffn.dw", (3, 3, e), padding=same3),
            bn2=_bn(make, f"{prefix}.irffn.bn2", e),
            project=_linear(make, f"{prefix}.irffn.project", e, d),
            bn3=_bn(make, f"{prefix}.irffn.bn3", d),
        ),
    )


def assemble(spec: ModelSpec, make) -> Network:
    """Build the parameter tree; every array comes from ``make(name, shape, kind)``.

    ``kind`` is one of ``weight`` (trunc-normal), ``zeros`` or ``ones``. Call
    order is fixed, which makes seeded initialization reproducible.
    """
    c = spec.stem_channels
    stem = StemParams(
        convs=(
            _conv(make, "stem.convs.0", (3, 3, 3, c), stride=2, padding=same_padding_2d(2, 2, 3, 2)),
            _conv(make, "stem.convs.1", (3, 3, c, c), padding=same_padding_2d(2, 2, 3, 1)),
            _conv(make, "stem.convs.2", (3, 3, c, c), padding=same_padding_2d(2, 2, 3, 1)),
        ),
        bns=tuple(_bn(make, f"stem.bns.{i}", c) for i in range(3)),
    )
    stages = []
    c_in = c
    for s, (st, side) in enumerate(zip(spec.stages, spec.stage_sides())):
        agg = PatchAggParams(
            _conv(make, f"stages.{s}.agg.conv", (2, 2, c_in, st.dim), stride=2),
            _ln(make, f"stages.{s}.agg.ln", st.dim),
        )
        m_side = reduced_extent(side, st.reduction)
        rel = make(rel_bias_name(s), (st.heads, side * side, m_side * m_side), "weight")
        blocks = tuple(_block(make, f"stages.{s}.blocks.{b}", st, rel) for b in range(st.depth))
        stages.append(StageParams(agg, blocks))
        c_in = st.dim
    head = HeadParams(
        _linear(make, "head.fc", c_in, spec.head_width),
        _linear(make, "head.classifier", spec.head_width, spec.num_classes),
    )
    return Network(stem, tuple(stages), head)


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[tuple[int, ...], str]]:
    shapes = {}

    def make(name, shape, kind):
        shapes.setdefault(name, (tuple(shape), kind))
        return np.broadcast_to(np.float32(0), shape)

    assemble(spec, make)
    return shapes


def is_learnable(name: str) -> bool:
    return not name.endswith((".running_mean", ".running_var"))


def trunc_normal(rng: np.random.Generator, shape, std=INIT_STD, bound=2.0) -> np.ndarray:
    """Normal(0, std) truncated to +-bound*std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


@dataclass(frozen=True, eq=False)
class Model:
    spec: ModelSpec
    weights: dict[str, np.ndarray]
    build_seed: int = 0

    def __post_init__(self):
        expected = parameter_shapes(self.spec)
        missing = expected.keys() - self.weights.keys()
        unknown = self.weights.keys() - expected.keys()
        if missing or unknown:
            raise ShapeError(f"weights do not match spec {self.spec.name}: missing {sorted(missing)[:5]}, "
                             f"unexpected {sorted(unknown)[:5]}")
        for name, (shape, _) in expected.items():
            arr = self.weights[name]
            if arr.shape != shape:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, spec requires {shape}")
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"parameter {name} contains non-finite values")
            arr.flags.writeable = False

    @cached_property
    def network(self) -> Network:
        return assemble(self.spec, lambda name, shape, kind: self.weights[name])

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def num_parameters(self, learnable_only: bool = True) -> int:
        return sum(a.size for n, a in self.weights.items() if is_learnable(n) or not learnable_only)

    def astype(self, dtype) -> "Model":
        return Model(self.spec, {n: a.astype(dtype) for n, a in self.weights.items()}, self.build_seed)


INITS = ("trunc_normal", "fan_in")


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32, init: str = "trunc_normal") -> Model:
    """Deterministically initialize ``spec``: trunc-normal(0.02) weights and
    relative biases, zero biases, unit norm scales, neutral BN statistics.

    ``init="fan_in"`` instead gives conv and linear weights std 1/sqrt(fan_in),
    which keeps activations at unit scale through the stem while the BN
    statistics are frozen (used for desk-scale training).
    """
    if init not in INITS:
        raise ConfigError(f"unknown init {init!r}; choose from {', '.join(INITS)}")
    spec.validate()
    rng = np.random.default_rng(seed)
    weights = {}

    def make(name, shape, kind):
        if name not in weights:
            if kind == "weight":
                std = INIT_STD
                if init == "fan_in" and not name.endswith("rel_bias"):
                    std = float(np.prod(shape[:-1])) ** -0.5
                weights[name] = trunc_normal(rng, shape, std=std).astype(dtype)
            elif kind == "ones":
                weights[name] = np.ones(shape, dtype=dtype)
            else:
                weights[name] = np.zeros(shape, dtype=dtype)
        return weights[name]

    assemble(spec, make)
    return Model(spec, weights, seed)


def _check_input(spec: ModelSpec, x: np.ndarray):
    if x.ndim != 4 or x.shape[3] != 3:
        raise ShapeError(f"expected input [N,res,res,3], got {x.shape}")
    res = spec.input_resolution
    if x.shape[1] != res or x.shape[2] != res:
        raise ResolutionError(
            f"{spec.name} was built for {res}x{res} inputs, got {x.shape[1]}x{x.shape[2]}; "
            f"call transfer_resolution(model, {x.shape[1]}) first"
        )


def forward(model: Model, x: np.ndarray):
    """Run inference; returns ``(logits [N, classes], [stage outputs at strides 4, 8, 16, 32])``."""
    _check_input(model.spec, x)
    net = model.network
    x = stem_forward(net.stem, x.astype(model.dtype, copy=False))
    pyramid = []
    for stage in net.stages:
        x = patch_agg_forward(stage.agg, x)
        for block in stage.blocks:
            x = cmt_block_forward(block, x)
        pyramid.append(x)
    return head_forward(net.head, x), pyramid


def transfer_resolution(model: Model, new_res: int) -> Model:
    """Resize every relative position bias to the stage geometry of ``new_res``
    by bicubic interpolation; all other weights are shared unchanged."""
    new_spec = replace(model.spec, input_resolution=int(new_res))
    weights = dict(model.weights)
    for s, (st, side) in enumerate(zip(new_spec.stages, new_spec.stage_sides())):
        m_side = reduced_extent(side, st.reduction)
        name = rel_bias_name(s)
        old = model.weights[name]
        n2, m2 = side * side, m_side * m_side
        if old.shape[1:] == (n2, m2):
            continue
        weights[name] = np.stack([bicubic_resize(old[h], n2, m2) for h in range(old.shape[0])])
    return Model(new_spec, weights, model.build_seed)


def save(model: Model, path) -> None:
    record = {"spec": model.spec.to_dict(), "build_seed": model.build_seed}
    serialize.save_record(path, record, model.weights)


def load(path) -> Model:
    record, tensors = serialize.load_record(path)
    if not isinstance(record, dict) or "spec" not in record:
        raise SerializationError(f"{path}: spec record lacks a 'spec' entry")
    spec = ModelSpec.from_dict(record["spec"])
    try:
        return Model(spec, tensors, record.get("build_seed", 0))
    except ShapeError as exc:
        raise SerializationError(f"{path}: {exc}") from exc


def save_spec(spec: ModelSpec, path) -> None:
    serialize.save_record(path, {"spec": spec.to_dict()}, {})


def load_spec(path) -> ModelSpec:
    record, _ = serialize.load_record(path)
    if not isinstance(record, dict) or "spec" not in record:
        raise SerializationError(f"{path}: spec record lacks a 'spec' entry")
    return ModelSpec.from_dict(record["spec"])
