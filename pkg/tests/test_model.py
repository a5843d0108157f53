import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmt import oracles
from cmt import tensor as T
from cmt.cost import count_params
from cmt.errors import ConfigError, MagicError, ParameterError, ResolutionError, TruncatedError, UnknownVariantError
from cmt.model import (
    PRESETS,
    Model,
    ModelSpec,
    ScalingParams,
    build,
    expanded_width,
    forward,
    load,
    load_spec,
    preset,
    rel_bias_name,
    round_half_up,
    save,
    save_spec,
    scale,
    toy_spec,
    transfer_resolution,
)
from cmt.serialize import load_record
from cmt.verify import lmhsa_oracle


@pytest.fixture(scope="module")
def cmt_s():
    return build(PRESETS["CMT-S"], seed=0)


# -- presets -------------------------------------------------------------------

def test_cmt_s_preset():
    s = preset("CMT-S")
    assert s.depths == [3, 3, 16, 3] and s.dims == [64, 128, 256, 512]
    assert {st.expansion for st in s.stages} == {4} and s.input_resolution == 224
    assert [st.heads for st in s.stages] == [1, 2, 4, 8]
    assert [st.reduction for st in s.stages] == [8, 4, 2, 1]


def test_cmt_ti_and_b_presets():
    ti, b = preset("cmt-ti"), preset("CMT-B")
    assert ti.dims == [46, 92, 184, 368] and ti.stages[0].expansion == 3.6
    assert (ti.input_resolution, ti.stem_channels) == (160, 16)
    assert b.depths == [4, 4, 20, 4] and b.dims == [76, 152, 304, 608]
    assert (b.stem_channels, b.input_resolution) == (38, 256)


def test_unknown_preset_lists_names():
    with pytest.raises(UnknownVariantError) as info:
        preset("CMT-L")
    for name in PRESETS:
        assert name in str(info.value)


def test_fractional_expansion_rounds_half_up():
    assert expanded_width(46, 3.6) == 166  # 165.6
    assert expanded_width(5, 3.5) == 18  # 17.5 ties up
    assert round_half_up(2.5) == 3 and round_half_up(-0.5) == 0


@pytest.mark.parametrize("mutate,match", [
    (lambda s: replace(s, stages=s.stages[:3]), "4 stages"),
    (lambda s: replace(s, input_resolution=100), "multiple of 32"),
    (lambda s: replace(s, stages=s.stages[:1] + (replace(s.stages[1], dim=127),) + s.stages[2:]), "divisible"),
    (lambda s: replace(s, stages=(replace(s.stages[0], reduction=3),) + s.stages[1:]), "reduction"),
    (lambda s: replace(s, stages=(replace(s.stages[0], depth=0),) + s.stages[1:]), "depth"),
    (lambda s: replace(s, stages=(replace(s.stages[0], dim=256),) + s.stages[1:]), "increasing"),
])
def test_spec_violations_are_named(mutate, match):
    with pytest.raises(ConfigError, match=match):
        mutate(PRESETS["CMT-S"])


def test_spec_dict_round_trip():
    for spec in PRESETS.values():
        assert ModelSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError, match="malformed"):
        ModelSpec.from_dict({"name": "x"})


# -- build ---------------------------------------------------------------------

def test_build_is_deterministic():
    a, b = build(toy_spec(), seed=3), build(toy_spec(), seed=3)
    assert a.weights.keys() == b.weights.keys()
    assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)
    c = build(toy_spec(), seed=4)
    assert any(a.weights[k].tobytes() != c.weights[k].tobytes() for k in a.weights)


def test_build_init_values():
    m = build(toy_spec(), seed=0)
    w = m.weights
    assert not w["head.fc.bias"].any() and np.all(w["stem.bns.0.gamma"] == 1)
    assert np.all(w["stem.bns.0.running_var"] == 1) and not w["stem.bns.0.running_mean"].any()
    q = w["stages.3.blocks.0.lmhsa.q.weight"]
    assert np.abs(q).max() <= 0.04 + 1e-7
    assert w[rel_bias_name(0)].shape == (1, 64, 1)


def test_fan_in_init_scale():
    w = build(PRESETS["CMT-Ti"], seed=0, init="fan_in").weights
    assert 0.8 < w["stages.3.blocks.0.lmhsa.q.weight"].std() * math.sqrt(368) < 1.2
    assert abs(w[rel_bias_name(0)].std() - 0.02 * 0.88) < 0.003
    with pytest.raises(ConfigError, match="init"):
        build(toy_spec(), init="xavier")


def test_name_set_survives_save_load(tmp_path, cmt_s):
    save(cmt_s, tmp_path / "s.cmtw")
    assert set(load_record(tmp_path / "s.cmtw")[1]) == set(cmt_s.weights)


def test_count_params_matches_built_model(cmt_s):
    assert count_params(PRESETS["CMT-S"]).total_params == cmt_s.num_parameters()
    assert cmt_s.num_parameters(learnable_only=False) > cmt_s.num_parameters()


def test_preset_param_counts_increase():
    counts = [count_params(PRESETS[n]).total_params for n in ("CMT-Ti", "CMT-XS", "CMT-S", "CMT-B")]
    assert counts == sorted(counts) and len(set(counts)) == 4


def test_model_rejects_bad_weights():
    m = build(toy_spec())
    w = dict(m.weights)
    w["head.fc.bias"] = np.full_like(w["head.fc.bias"], np.nan)
    with pytest.raises(ParameterError, match="non-finite"):
        Model(m.spec, w)
    w.pop("head.fc.bias")
    with pytest.raises(Exception, match="missing"):
        Model(m.spec, w)


def test_weights_are_read_only():
    m = build(toy_spec())
    with pytest.raises(ValueError):
        m.weights["head.fc.bias"][0] = 1


# -- forward -------------------------------------------------------------------

def test_cmt_s_forward_shapes(cmt_s):
    logits, pyr = forward(cmt_s, np.random.default_rng(0).standard_normal((1, 224, 224, 3)).astype(np.float32))
    assert logits.shape == (1, 1000)
    assert [p.shape for p in pyr] == [(1, 56, 56, 64), (1, 28, 28, 128), (1, 14, 14, 256), (1, 7, 7, 512)]


def test_identical_batch_rows_give_identical_logits():
    m = build(toy_spec(num_classes=5), seed=1)
    x = np.random.default_rng(0).standard_normal((1, 32, 32, 3)).astype(np.float32)
    logits, _ = forward(m, np.concatenate([x, x, x]))
    assert logits[0].tobytes() == logits[1].tobytes() == logits[2].tobytes()


def test_forward_is_bitwise_deterministic():
    m = build(toy_spec(), seed=2)
    x = np.random.default_rng(1).standard_normal((2, 32, 32, 3)).astype(np.float32)
    assert forward(m, x)[0].tobytes() == forward(m, x)[0].tobytes()


def test_wrong_resolution_directs_to_transfer():
    m = build(toy_spec())
    with pytest.raises(ResolutionError, match="transfer_resolution"):
        forward(m, np.zeros((1, 64, 64, 3), np.float32))


def _oracle_forward(model, x):
    """Straight-line composition of the loop oracles, in float64."""
    net = model.network
    w = {k: v.astype(np.float64) for k, v in model.weights.items()}

    def bn(a, pre):
        return oracles.batch_norm_infer(a, w[pre + ".gamma"], w[pre + ".beta"], w[pre + ".running_mean"],
                                        w[pre + ".running_var"])

    def lin(a, pre):
        flat = a.reshape(-1, a.shape[-1])
        return (oracles.matmul(flat, w[pre + ".weight"]) + w[pre + ".bias"]).reshape(*a.shape[:-1], -1)

    def ln(a, pre):
        return oracles.layer_norm(a, w[pre + ".gamma"], w[pre + ".beta"])

    for i, c in enumerate(net.stem.convs):
        x = oracles.gelu(bn(oracles.conv2d(x, w[f"stem.convs.{i}.kernel"], w[f"stem.convs.{i}.bias"], c.stride,
                                           c.padding), f"stem.bns.{i}"))
    m64 = model.astype(np.float64).network
    for s, stage in enumerate(net.stages):
        pre = f"stages.{s}"
        x = ln(oracles.conv2d(x, w[pre + ".agg.conv.kernel"], w[pre + ".agg.conv.bias"], 2), pre + ".agg.ln")
        for b in range(len(stage.blocks)):
            bp = f"{pre}.blocks.{b}"
            x1 = oracles.dwconv2d(x, w[bp + ".lpu.dw.kernel"], w[bp + ".lpu.dw.bias"], 1, (1, 1, 1, 1)) + x
            x2 = lmhsa_oracle(m64.stages[s].blocks[b].lmhsa, ln(x1, bp + ".ln1")) + x1
            z = bn(oracles.gelu(lin(ln(x2, bp + ".ln2"), bp + ".irffn.expand")), bp + ".irffn.bn1")
            z = oracles.dwconv2d(z, w[bp + ".irffn.dw.kernel"], w[bp + ".irffn.dw.bias"], 1, (1, 1, 1, 1)) + z
            z = bn(oracles.gelu(z), bp + ".irffn.bn2")
            x = bn(lin(z, bp + ".irffn.project"), bp + ".irffn.bn3") + x2
    h = oracles.gelu(lin(oracles.global_avg_pool(x), "head.fc"))
    return lin(h, "head.classifier")


def test_toy_forward_matches_oracle_composition():
    m = build(toy_spec(num_classes=3, head_width=16), seed=0, dtype=np.float64, init="fan_in")
    x = np.random.default_rng(5).standard_normal((1, 32, 32, 3))
    logits, _ = forward(m, x)
    assert T.rel_err(logits, _oracle_forward(m, x)) < 1e-6


# -- scaling -------------------------------------------------------------------

def test_scale_phi_zero_is_identity():
    for spec in PRESETS.values():
        assert scale(spec, ScalingParams(phi=0)) == spec


def test_scale_cmt_s_phi_one():
    s = scale(PRESETS["CMT-S"], ScalingParams(phi=1))
    assert s.depths == [4, 4, 19, 4] and s.input_resolution == 256
    assert s.dims == [83, 166, 332, 664] and s.stem_channels == 42
    assert [st.heads for st in s.stages] == [1, 2, 4, 8]


def test_default_flops_factor():
    assert ScalingParams().flops_factor == pytest.approx(2.352, abs=5e-4)
    assert 2.0 <= ScalingParams().flops_factor <= 2.6


def test_scale_underflow_raises():
    with pytest.raises(ConfigError, match="underflow"):
        scale(PRESETS["CMT-S"], ScalingParams(phi=-20))


def test_scaling_params_reject_shrinking_factors():
    with pytest.raises(ParameterError, match="beta"):
        ScalingParams(beta=0.9)


@pytest.mark.parametrize("name", list(PRESETS))
def test_scale_round_trip_drift(name):
    # Measured drift for the default constants: zero for every preset.
    spec = PRESETS[name]
    back = scale(scale(spec, ScalingParams(phi=1)), ScalingParams(phi=-1))
    assert back.depths == spec.depths and back.input_resolution == spec.input_resolution
    assert back.dims == spec.dims and back.stem_channels == spec.stem_channels


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(list(PRESETS)), st.floats(-1.5, 2.5))
def test_scaled_specs_keep_invariants(name, phi):
    s = scale(PRESETS[name], ScalingParams(phi=phi))
    assert s.input_resolution % 32 == 0
    assert all(st.dim % st.heads == 0 and st.depth >= 1 for st in s.stages)
    back = scale(scale(PRESETS[name], ScalingParams(phi=1)), ScalingParams(phi=-1))
    assert all(abs(a - b) <= 1 for a, b in zip(back.depths, PRESETS[name].depths))


# -- resolution transfer ---------------------------------------------------------

def test_transfer_same_resolution_is_identity():
    m = build(toy_spec())
    t = transfer_resolution(m, 32)
    assert all(np.array_equal(t.weights[k], m.weights[k]) for k in m.weights)


def test_transfer_cmt_s_224_to_256(cmt_s):
    t = transfer_resolution(cmt_s, 256)
    assert cmt_s.weights[rel_bias_name(0)].shape == (1, 3136, 49)
    assert t.weights[rel_bias_name(0)].shape == (1, 4096, 64)
    assert t.weights["head.fc.weight"] is cmt_s.weights["head.fc.weight"]


def test_forward_after_transfer():
    m = transfer_resolution(build(toy_spec()), 64)
    logits, pyr = forward(m, np.zeros((1, 64, 64, 3), np.float32))
    assert logits.shape == (1, 2) and pyr[-1].shape == (1, 2, 2, 64)


def test_transfer_rejects_bad_resolution():
    with pytest.raises(ConfigError):
        transfer_resolution(build(toy_spec()), 48)


def test_transfer_of_constant_bias_stays_constant():
    m = build(toy_spec())
    w = dict(m.weights)
    w[rel_bias_name(1)] = np.full_like(w[rel_bias_name(1)], 0.3)
    t = transfer_resolution(Model(m.spec, w), 96)
    np.testing.assert_allclose(t.weights[rel_bias_name(1)], 0.3, rtol=1e-6)


# -- save / load -----------------------------------------------------------------

def test_save_load_forward_bitwise(tmp_path):
    m = build(toy_spec(), seed=7)
    save(m, tmp_path / "m.cmtw")
    back = load(tmp_path / "m.cmtw")
    assert back.spec == m.spec and back.build_seed == 7
    x = np.random.default_rng(0).standard_normal((2, 32, 32, 3)).astype(np.float32)
    assert forward(back, x)[0].tobytes() == forward(m, x)[0].tobytes()


def test_truncated_and_bad_magic(tmp_path):
    path = tmp_path / "m.cmtw"
    save(build(toy_spec()), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(TruncatedError):
        load(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(MagicError, match="CMTW"):
        load(path)


def test_spec_file_round_trip(tmp_path):
    s = scale(PRESETS["CMT-XS"], ScalingParams(phi=0.5))
    save_spec(s, tmp_path / "s.cmtw")
    assert load_spec(tmp_path / "s.cmtw") == s
