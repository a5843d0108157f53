import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmt import cost
from cmt.errors import ConfigError
from cmt.model import PRESETS, ModelSpec, StageConfig, build, toy_spec


def _spec(dims=(8, 16, 32, 64), head_width=128, expansion=4.0):
    stages = tuple(StageConfig(1, d, h, k, expansion) for d, h, k in zip(dims, (1, 2, 4, 8), (8, 4, 2, 1)))
    return ModelSpec("t", 8, stages, 32, head_width=head_width)


def test_single_linear_param_count():
    assert cost.count_params(_spec()).select("head.fc").total_params == 8_320


def test_one_by_one_conv_macs():
    # the expansion of a stage-4 block at R=2.5 is a 1x1 conv [1,7,7,512] -> 1280
    e = cost.block_cost(7, 512, 8, 1, expansion=2.5)
    assert 7 * 7 * 512 * 1280 == 32_112_640
    assert e["irffn"] == 2 * 32_112_640 + 9 * 49 * 1280


def test_report_totals_are_entry_sums():
    r = cost.count_flops(PRESETS["CMT-XS"])
    assert r.total_flops == sum(e.flops for e in r.entries)
    assert all(e.flops >= 0 and e.params >= 0 and isinstance(e.flops, int) for e in r.entries)
    assert sum(r.flops_by_kind().values()) == r.total_flops
    d = json.loads(r.to_json())
    assert d["convention"] == "MAC=1 FLOP" and d["total_params"] == r.total_params
    assert "total" in r.table().splitlines()[-1]


def test_params_match_built_model():
    spec = toy_spec()
    assert cost.count_params(spec).total_params == build(spec).num_parameters()


def test_bad_resolution():
    with pytest.raises(ConfigError, match="multiple of 32"):
        cost.count_flops(PRESETS["CMT-S"], 200)


@pytest.mark.parametrize("name", list(PRESETS))
def test_flops_linear_in_batch(name):
    one = cost.count_flops(PRESETS[name]).total_flops
    assert cost.count_flops(PRESETS[name], batch=3).total_flops == 3 * one


@pytest.mark.parametrize("name", list(PRESETS))
def test_conv_terms_quadratic_in_resolution(name):
    spec = PRESETS[name]
    a = cost.count_flops(spec, 224).flops_by_kind()
    b = cost.count_flops(spec, 448).flops_by_kind()
    assert b["conv"] == 4 * a["conv"]
    assert b["attention"] == 16 * a["attention"]
    assert b["head"] == a["head"]


def test_params_independent_of_resolution_except_bias_tables():
    spec = PRESETS["CMT-S"]
    a = {e.name: e.params for e in cost.count_flops(spec, 224).entries}
    b = {e.name: e.params for e in cost.count_flops(spec, 256).entries}
    assert {k for k in a if a[k] != b[k]} == {f"stages.{s}.rel_bias" for s in range(4)}


# -- closed forms ----------------------------------------------------------------

def test_transformer_block_values():
    assert cost.analytic_transformer_block(196, 384) == 376_320_000
    assert cost.analytic_transformer_block(1, 1) == 14


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 1024))
def test_transformer_block_is_mhsa_plus_ffn(n, d):
    assert cost.analytic_transformer_block(n, d) == cost.analytic_mhsa(n, d, d, d) + cost.analytic_ffn(n, d, 4)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 1024), st.sampled_from([1, 2, 4, 8]))
def test_cmt_block_sum_identity(n, d, k):
    parts = cost.analytic_cmt_block(n, d, k)
    assert parts["total"] == parts["lpu"] + parts["lmhsa"] + parts["irffn"]
    assert parts["total"] == cost.analytic_cmt_block_closed(n, d, k)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4096), st.integers(1, 1024))
def test_unreduced_lmhsa_term(n, d):
    assert cost.analytic_cmt_block(n, d, 1)["lmhsa"] == 4 * n * d * d + 2 * n * n * d


def test_rational_results_stay_exact():
    v = cost.analytic_cmt_block(3, 5, 2)["lmhsa"]
    assert v == Fraction(2 * 3 * 25 * 5, 4) + Fraction(2 * 9 * 5, 4)


def test_stage4_block_reconciles_exactly():
    analytic = cost.analytic_cmt_block(49, 512, 1)
    counted = cost.block_cost(7, 512, 8, 1)
    assert analytic == counted
    assert counted == {"lpu": 225_792, "lmhsa": 53_838_848, "irffn": 103_663_616, "total": 157_728_256}
    rec = cost.reconcile_cmt_block(7, 512, 8, 1)
    assert all(v == 0 for v in rec.deviations().values())


def test_stage4_block_matches_full_counter():
    r = cost.count_flops(PRESETS["CMT-S"]).select("stages.3.blocks.0.")
    assert r.total_flops == 157_728_256


def test_reduced_block_gap_is_explained():
    rec = cost.reconcile_cmt_block(56, 64, 1, 8)
    gap = 2 * 49 * 64 * 64
    assert rec.deviations()["lmhsa"] == gap
    assert rec.deviations()["lpu"] == 0 and rec.deviations()["irffn"] == 0
    assert "reduction" in rec.parts["lmhsa"]["note"]


def test_fractional_expansion_note():
    rec = cost.reconcile_cmt_block(5, 46, 1, 1, expansion=3.6)
    assert "r=4" in rec.parts["irffn"]["note"]


def test_transformer_block_reconciles_exactly():
    rec = cost.reconcile_transformer_block(196, 384)
    assert rec.deviations() == {"mhsa": 0, "ffn": 0, "total": 0}
    assert cost.transformer_block_cost(196, 384)["total"] == 376_320_000


@pytest.mark.parametrize("d", [16, 64, 100])
def test_irffn_matmul_terms(d):
    # depthwise taps removed, the two 1x1 convs give 8 n d^2 exactly
    n = 49
    assert cost.block_cost(7, d, 1, 1)["irffn"] - 9 * n * 4 * d == 8 * n * d * d


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.sampled_from("abcde"), st.integers(-10**9, 10**9), min_size=1),
       st.dictionaries(st.sampled_from("abcde"), st.integers(-10**9, 10**9), min_size=1))
def test_reconcile_is_antisymmetric(a, b):
    ab, ba = cost.reconcile(a, b), cost.reconcile(b, a)
    for part in ab.parts:
        assert ab.parts[part]["abs_dev"] == -ba.parts[part]["abs_dev"]
        assert ab.parts[part]["rel_dev"] == -ba.parts[part]["rel_dev"]


# -- published figures -------------------------------------------------------------

def test_published_table_matches_presets():
    assert set(cost.PUBLISHED) == set(PRESETS)


@pytest.mark.parametrize("name", ["CMT-Ti", "CMT-XS", "CMT-B"])
def test_params_within_tolerance(name):
    got = cost.count_params(PRESETS[name]).total_params
    assert abs(got / cost.PUBLISHED[name][0] - 1) <= cost.PARAM_TOL


@pytest.mark.parametrize("name", list(PRESETS))
def test_flops_within_tolerance(name):
    got = cost.count_flops(PRESETS[name]).total_flops
    assert abs(got / cost.PUBLISHED[name][1] - 1) <= cost.FLOP_TOL


def test_scaling_band_orientation():
    assert cost.in_scaling_band(2.3, 1) and not cost.in_scaling_band(2.7, 1)
    assert cost.in_scaling_band(1 / 2.3, -1) and cost.in_scaling_band(1.0, 0)
