import pytest

from channelkit import cost, zoo
from channelkit.errors import BuildError
from channelkit.ops import ConvSpec


def test_regular_conv_example():
    c = cost.cost_conv2d(ConvSpec(3, 32, 3, spatial_stride=2), 224)
    assert (c.params, c.flops) == (864, 10_838_016)


@pytest.mark.parametrize("m,n,k,d_f,params,flops", [
    (32, 64, 3, 1, 2336, None),
    (512, 512, 3, 14, 266_752, 52_283_392),
    (1, 1, 1, 1, 2, None),
])
def test_dws_examples(m, n, k, d_f, params, flops):
    c = cost.cost_dws_conv(ConvSpec(m, n, k), d_f)
    assert c.params == params
    if flops is not None:
        assert c.flops == flops


def test_group_cw_example():
    c = cost.cost_group_cw(ConvSpec(512, 512, channel_kernel=8, groups=2), 14)
    assert c.params == 131_088


def test_group_cw_degenerate():
    c = cost.cost_group_cw(ConvSpec(64, 32, groups=1), 5, fusion=False)
    assert (c.params, c.flops) == (64 * 32, 64 * 32 * 25)


def test_group_cw_ratio():
    ratio = cost.cost_group_cw(ConvSpec(512, 512, channel_kernel=8, groups=2), 14).params / 512**2
    assert ratio == pytest.approx(0.5 + 16 / 512**2, abs=1e-12)
    assert ratio == pytest.approx(0.5, rel=1e-3)


def test_dws_cw_example():
    c = cost.cost_dws_cw(ConvSpec(1024, 1024, 3, channel_kernel=16), 7)
    assert c.params == 9232
    # depthwise part 3*3*1024*49 plus fusion part 16*1024*49
    assert c.flops == 451_584 + 802_816


def test_dws_cw_unit_kernel():
    assert cost.cost_dws_cw(ConvSpec(20, 20, 3, channel_kernel=1), 4).params == 9 * 20 + 1


def test_classifiers():
    assert cost.cost_classifier("fc", 1024, 1000, 7).params == 1_024_000
    assert cost.cost_classifier("fc", 1024, 1000, 7).flops == 1024 * 49 + 1_024_000
    assert cost.cost_classifier("ccl", 1024, 1000, 7).params == 1225
    assert cost.cost_classifier("ccl", 1024, 1000, 7).flops == 1225 * 1000
    with pytest.raises(BuildError):
        cost.cost_classifier("ccl", 10, 20, 1)


@pytest.mark.parametrize("version", zoo.VERSIONS)
def test_per_layer_shapes_follow_strides(version):
    report = cost.cost_model_total(zoo.build_model_spec(version))
    sizes = [l.output_shape[2] for l in report.per_layer[:-1]]
    assert sizes[0] == 112 and sizes[-1] == 7
    assert sorted(set(sizes), reverse=True) == [112, 56, 28, 14, 7]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_csv_has_total_row():
    text = cost.cost_model_total(zoo.build_model_spec("v1")).to_csv().strip().splitlines()
    assert text[0].startswith("layer,params,flops") and text[-1].startswith("TOTAL,")


def test_v3_classifier_kernel():
    spec = zoo.build_model_spec("v3")
    last = cost.cost_model_total(spec).per_layer[-1]
    assert last.params == 7 * 7 * 25
