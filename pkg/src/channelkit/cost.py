"""Learnable-parameter and FLOP accounting.

One multiply-accumulate counts as one FLOP.  Batch-norm scale and shift are
counted as parameters (2 per channel) but not as FLOPs; pooling, relu,
dropout and residual additions contribute nothing.  Spatial terms use the
layer's output extent.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import BuildError
from .ops import ConvSpec
from .zoo import ModelSpec, layer_names


@dataclass(frozen=True)
class Cost:
    params: int
    flops: int

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.params + other.params, self.flops + other.flops)


@dataclass(frozen=True)
class LayerCost:
    layer_name: str
    params: int
    flops: int
    output_shape: tuple[int, int, int, int]


@dataclass
class CostReport:
    model_name: str
    per_layer: list[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.per_layer)

    @property
    def total_flops(self) -> int:
        return sum(l.flops for l in self.per_layer)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "flops", "out_n", "out_c", "out_h", "out_w"])
        for l in self.per_layer:
            w.writerow([l.layer_name, l.params, l.flops, *l.output_shape])
        last = self.per_layer[-1].output_shape if self.per_layer else (0, 0, 0, 0)
        w.writerow(["TOTAL", self.total_params, self.total_flops, *last])
        return buf.getvalue()


def _out(d_f: int, stride: int) -> int:
    return -(-d_f // stride)


def cost_conv2d(spec: ConvSpec, d_f: int) -> Cost:
    """Dense ``d_k x d_k`` convolution on a ``d_f x d_f`` input."""
    k, m, n = spec.spatial_kernel, spec.in_channels, spec.out_channels
    d_out = _out(d_f, spec.spatial_stride)
    return Cost(k * k * m * n, k * k * m * n * d_out * d_out)


def cost_depthwise(spec: ConvSpec, d_f: int) -> Cost:
    k, m = spec.spatial_kernel, spec.in_channels
    d_out = _out(d_f, spec.spatial_stride)
    return Cost(k * k * m, k * k * m * d_out * d_out)


def cost_dws_conv(spec: ConvSpec, d_f: int) -> Cost:
    """Depthwise conv plus a dense 1x1."""
    m, n = spec.in_channels, spec.out_channels
    d_out = _out(d_f, spec.spatial_stride)
    return cost_depthwise(spec, d_f) + Cost(m * n, m * n * d_out * d_out)


def cost_group_cw(spec: ConvSpec, d_f: int, fusion: bool = True) -> Cost:
    """Grouped 1x1 over ``d_f x d_f`` plus, optionally, a group channel-wise fusion."""
    m, n, g, d_c = spec.in_channels, spec.out_channels, spec.groups, spec.channel_kernel
    area = d_f * d_f
    cost = Cost((m // g) * (n // g) * g, (m // g) * (n // g) * area * g)
    if fusion:
        cost = cost + Cost(d_c * g, d_c * (n // g) * area * g)
    return cost


def cost_dws_cw(spec: ConvSpec, d_f: int) -> Cost:
    """Depthwise conv plus channel-wise fusion; ``n / m`` kernels of length ``d_c``."""
    m, n, d_c = spec.in_channels, spec.out_channels, spec.channel_kernel
    d_out = _out(d_f, spec.spatial_stride)
    copies = n // m
    return cost_depthwise(spec, d_f) + Cost(d_c * copies, d_c * n * d_out * d_out)


def cost_classifier(kind: str, m: int, n_classes: int, d_f: int) -> Cost:
    if kind == "fc":
        return Cost(m * n_classes, m * d_f * d_f + m * n_classes)
    if kind == "ccl":
        d_c = m - n_classes + 1
        if d_c < 1:
            raise BuildError(f"ccl needs m >= n_classes, got m={m}, n_classes={n_classes}")
        return Cost(d_f * d_f * d_c, d_f * d_f * d_c * n_classes)
    raise BuildError(f"classifier kind must be 'fc' or 'ccl', got {kind!r}")


def _bn(channels: int) -> Cost:
    return Cost(2 * channels, 0)


def cost_model_total(model: ModelSpec, input_size: int | None = None) -> CostReport:
    """Walk ``model`` layer by layer, threading channels and spatial size."""
    d_f = model.input_size if input_size is None else input_size
    m = 3
    report = CostReport(model.name)
    for name, layer in zip(layer_names(model), model.layers):
        n, s = layer.out_channels, layer.stride
        d_out = _out(d_f, s)
        try:
            if layer.kind == "conv":
                c = cost_conv2d(ConvSpec(m, n, 3, spatial_stride=s), d_f) + _bn(n)
            elif layer.kind == "dws_conv":
                c = cost_dws_conv(ConvSpec(m, n, 3, spatial_stride=s), d_f) + _bn(n)
            elif layer.kind == "group_dws_conv":
                spec = ConvSpec(m, n, 3, groups=layer.groups, spatial_stride=s)
                c = cost_depthwise(spec, d_f) + cost_group_cw(spec, d_out, fusion=False) + _bn(n)
            elif layer.kind in ("gm", "gcwm"):
                spec = ConvSpec(m, n, 3, channel_kernel=max(layer.d_c, 1), groups=layer.groups)
                half = cost_depthwise(spec, d_f) + cost_group_cw(spec, d_f, fusion=False) + _bn(n)
                c = half + half
                if layer.kind == "gcwm":
                    g = layer.groups
                    c = c + Cost(layer.d_c * g, layer.d_c * (n // g) * d_f * d_f * g)
            elif layer.kind == "dws_cw_conv":
                if n % m:
                    raise BuildError(f"out channels {n} must be a multiple of in channels {m}")
                c = cost_dws_cw(ConvSpec(m, n, 3, channel_kernel=layer.d_c, spatial_stride=s),
                                d_f) + _bn(n)
            elif layer.kind == "avgpool_fc":
                c = cost_classifier("fc", m, model.n_classes, d_f)
            elif layer.kind == "ccl":
                c = cost_classifier("ccl", m, model.n_classes, d_f)
            else:
                raise BuildError(f"unknown layer kind {layer.kind!r}")
        except (BuildError, ValueError) as exc:
            raise BuildError(f"layer {name}: {exc}") from exc
        if layer.kind in ("avgpool_fc", "ccl"):
            shape = (1, model.n_classes, 1, 1)
            d_out = 1
        else:
            shape = (1, n, d_out, d_out)
        report.per_layer.append(LayerCost(name, c.params, c.flops, shape))
        m, d_f = shape[1], d_out
    return report


# Reported totals: (version, alpha) -> (params, flops or None, relative tolerance)
REPORTED_TOTALS = {
    ("v1", 1.0): (3.7e6, 407e6, 0.03),
    ("mobilenet", 1.0): (4.2e6, 569e6, 0.03),
    ("v2", 1.0): (2.7e6, None, 0.03),
    ("v3", 1.0): (1.7e6, None, 0.03),
    ("v1_minus", 1.0): (3.7e6, None, 0.03),
    ("mobilenet", 0.75): (2.6e6, None, 0.04),
    ("mobilenet", 0.5): (1.3e6, None, 0.04),
    ("v1", 0.75): (2.3e6, None, 0.04),
    ("v1", 0.5): (1.2e6, None, 0.04),
}
