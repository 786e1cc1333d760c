import numpy as np
import pytest

from channelkit import gradcheck as gc
from channelkit import modules as nn
from channelkit import ops
from channelkit.errors import NumericalError, ParameterError
from channelkit.rng import seeded_normal


class TestFiniteDiff:
    def test_quadratic(self):
        g = gc.finite_diff_grad(lambda v: float(np.sum(v ** 2)), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_linear(self):
        g = gc.finite_diff_grad(lambda v: float(np.sum(v)), np.arange(5.0))
        np.testing.assert_allclose(g, np.ones(5), atol=1e-10)

    def test_input_untouched(self):
        x = np.array([0.5, -1.0])
        gc.finite_diff_grad(lambda v: float(v @ v), x)
        assert x.tolist() == [0.5, -1.0]

    def test_errors(self):
        with pytest.raises(NumericalError):
            gc.finite_diff_grad(lambda v: float("nan") if v[0] < 0 else 1.0, np.array([0.0]))
        with pytest.raises(ParameterError):
            gc.finite_diff_grad(lambda v: 0.0, np.ones(1), h=0.0)


def test_compare_abs_floor():
    rep = gc.compare("t", "b", np.array([1e-12, 1.0]), np.array([3e-12, 1.0 + 1e-9]))
    assert rep.passed and rep.max_rel_error < 1e-8


@pytest.mark.parametrize("name", sorted(gc.OP_CASES))
def test_every_operator_passes(name):
    reports = gc.check_op(name, seed=1)
    assert reports and gc.all_passed(reports), gc.format_table(reports)
    assert all(r.max_rel_error < 1e-6 for r in reports)


def test_unknown_op():
    with pytest.raises(ParameterError, match="nosuchop"):
        gc.check_op("nosuchop")


def test_single_pointwise_layer():
    layer = nn.Pointwise("pw", 3, 4, seed=0)
    reports = gc.check_module(layer, seeded_normal((2, 3, 2, 2), 0))
    weights = [r for r in reports if r.block_name != "input"]
    assert len(weights) == 1 and weights[0].block_name == "pw.weight" and weights[0].passed


def test_two_layer_toy_net():
    net = nn.Sequential("toy", [nn.Pointwise("a", 3, 6, 0), nn.ReLU("r"), nn.Pointwise("b", 6, 2, 1)])
    assert gc.all_passed(gc.check_module(net, seeded_normal((3, 3, 2, 2), 4)))


@pytest.mark.parametrize("kind", ["gm", "gcwm"])
def test_blocks_pass(kind):
    reports = gc.check_block(kind, channels=8, spatial=4)
    assert gc.all_passed(reports), gc.format_table(reports)
    assert sum(r.num_skipped for r in reports) == 0


def test_corrupted_backward_is_caught(monkeypatch):
    real = ops.group_channelwise_conv_backward

    def wrong(g, x, ws):
        dx, dw = real(g, x, ws)
        return dx, dw * 1.01

    monkeypatch.setattr(ops, "group_channelwise_conv_backward", wrong)
    reports = gc.check_block("gcwm")
    fuse = [r for r in reports if r.block_name.endswith("fuse.weight")]
    assert fuse and not any(r.passed for r in fuse)
    assert not gc.all_passed(reports)


def test_corrupted_op_case_is_caught(monkeypatch):
    real = ops.channelwise_conv_backward
    monkeypatch.setattr(ops, "channelwise_conv_backward",
                        lambda g, x, w, stride=1, padding="same": tuple(
                            a * 0.5 for a in real(g, x, w, stride, padding)))
    assert not gc.all_passed(gc.check_op("channelwise_conv"))


def test_model_checks_restore_dropout():
    from channelkit import zoo
    spec = zoo.build_model_spec("v1", 0.125, 10, 32)
    net = zoo.build_network(spec)
    x = seeded_normal((1, 3, 32, 32), 0)
    gc.check_module(net, x, max_elements=1)
    assert {m.p for m in net.modules() if isinstance(m, nn.Dropout)} == {spec.dropout_p}
