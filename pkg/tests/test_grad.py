import numpy as np
import pytest

from cmt import tensor as T
from cmt.errors import ConfigError, DivergenceError, UnknownOpError
from cmt.grad import OPS, finite_diff_check, sign_flipped, vjp
from cmt.grad.vjp import add_vjp, cross_entropy, dwconv2d_vjp
from cmt.grad.check import BLOCK_OPS, PRIMITIVES, relative_error
from cmt.grad.train import MAX_SAMPLES, PINNED_LR, PINNED_SEED, micro_train, synthetic_dataset
from cmt.model import PRESETS, toy_spec
from cmt.tensor import ConvWeights


def test_every_op_is_registered():
    assert set(PRIMITIVES) | set(BLOCK_OPS) | {"toy_model"} == set(OPS)


def test_matmul_vjp_identity():
    r = np.random.default_rng(0)
    a, b, g = r.standard_normal((4, 3)), r.standard_normal((3, 5)), r.standard_normal((4, 5))
    di, _ = vjp("matmul", {"a": a, "b": b}, None, g)
    np.testing.assert_allclose(di["a"], g @ b.T)
    np.testing.assert_allclose(di["b"], a.T @ g)


def test_residual_add_passes_cotangent():
    g = np.random.default_rng(0).standard_normal((2, 3))
    da, db = add_vjp(g)
    assert np.array_equal(da, g) and np.array_equal(db, g)
    di, _ = vjp("residual_add", {"a": g, "b": g}, None, g)
    assert np.array_equal(di["a"], g) and np.array_equal(di["b"], g)


def test_unknown_op():
    with pytest.raises(UnknownOpError, match="known ops"):
        finite_diff_check("conv3d")


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(0.1)
    assert relative_error(2.0, 1.0) == 0.5


def test_linear_is_near_exact():
    assert finite_diff_check("linear", seed=0).max_rel < 1e-6


def test_flat_softmax_passes():
    report = finite_diff_check("softmax_rows_flat", seed=0)
    assert report.passed, str(report)


@pytest.mark.parametrize("op", PRIMITIVES + BLOCK_OPS)
@pytest.mark.parametrize("seed", [0, 1])
def test_vjp_matches_central_differences(op, seed):
    report = finite_diff_check(op, seed=seed)
    assert report.passed, str(report)


def test_full_toy_network_gradient():
    report = finite_diff_check("toy_model", seed=0, probes=2)
    assert report.passed, str(report)
    assert any("rel_bias" in e.name for e in report.entries)


def test_relative_bias_receives_gradient():
    report = finite_diff_check("lmhsa", seed=3)
    names = [e.name for e in report.entries]
    assert "param.rel_bias" in names and report.passed


@pytest.mark.parametrize("op", ["linear", "conv2d", "layer_norm", "cmt_block"])
def test_sign_flip_negative_control_fails(op):
    report = finite_diff_check(op, seed=0, vjp_fn=sign_flipped(op))
    assert not report.passed
    assert report.max_rel > 1.0


def test_report_rendering():
    report = finite_diff_check("gelu", seed=0)
    assert str(report).startswith("gelu seed=0: PASS")
    d = report.to_dict()
    assert d["passed"] and 0 < d["entries"][0]["probes"] <= 32


def test_masked_channel_gets_exactly_zero_gradient():
    r = np.random.default_rng(0)
    x = r.standard_normal((1, 5, 5, 3))
    w = ConvWeights(r.standard_normal((3, 3, 3)), r.standard_normal(3), 1, (1, 1, 1, 1))
    g = r.standard_normal((1, 5, 5, 3))
    g[..., 1] = 0  # loss ignores output channel 1
    dx, dw = dwconv2d_vjp(x, w, g)
    assert np.all(dx[..., 1] == 0) and np.all(dw.kernel[..., 1] == 0) and dw.bias[1] == 0


def test_cross_entropy_matches_definition():
    logits = np.array([[2.0, 0.0], [0.0, 0.0]])
    loss, d = cross_entropy(logits, np.array([0, 1]))
    p = T.softmax_rows(logits)
    assert loss == pytest.approx(-(np.log(p[0, 0]) + np.log(p[1, 1])) / 2)
    np.testing.assert_allclose(d, (p - np.eye(2)) / 2)


# -- micro-training --------------------------------------------------------------

@pytest.fixture(scope="module")
def data():
    return synthetic_dataset()


def test_dataset_is_balanced_and_reproducible(data):
    x, y = data
    assert x.shape == (16, 32, 32, 3) and np.bincount(y).tolist() == [8, 8]
    x2, y2 = synthetic_dataset()
    assert x.tobytes() == x2.tobytes() and np.array_equal(y, y2)


def test_zero_lr_keeps_loss_constant(data):
    losses = micro_train(toy_spec(), *data, steps=3, lr=0.0)
    assert len(losses) == 4 and len(set(losses)) == 1


def test_micro_train_is_bitwise_reproducible(data):
    a = micro_train(toy_spec(), *data, steps=4)
    b = micro_train(toy_spec(), *data, steps=4)
    assert np.array(a).tobytes() == np.array(b).tobytes()


def test_micro_train_pinned_run_converges(data):
    losses = micro_train(toy_spec(), *data, steps=200, lr=PINNED_LR, seed=PINNED_SEED)
    assert losses[-1] < 0.05
    assert losses[-1] < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step(data):
    with pytest.raises(DivergenceError) as info:
        micro_train(toy_spec(), *data, steps=50, lr=1e6)
    assert info.value.step >= 1


def test_micro_train_rejects_large_inputs(data):
    x, y = data
    with pytest.raises(ConfigError, match="toy"):
        micro_train(PRESETS["CMT-Ti"], x, y, steps=1)
    big = np.zeros((MAX_SAMPLES + 1, 32, 32, 3))
    with pytest.raises(ConfigError, match="at most"):
        micro_train(toy_spec(), big, np.zeros(MAX_SAMPLES + 1, int), steps=1)
    with pytest.raises(ConfigError, match="labels"):
        micro_train(toy_spec(), x, y[:3], steps=1)
