"""Declarative architectures and their instantiation.

A :class:`ModelSpec` is a list of :class:`LayerSpec` rows in the
``Type / Stride / # Output channels`` style; :func:`build_network` turns it
into a trainable :class:`Network`.

Block layouts (BN = batch norm with scale and shift, D = dropout):

* ``conv``          conv3x3 -> BN -> relu
* ``dws_conv``      dw3x3 -> 1x1 -> D -> BN -> relu
* ``group_dws_conv``dw3x3 -> grouped 1x1 -> D -> BN -> relu
* ``gm``            x + [dw -> g1x1 -> D -> BN -> relu -> dw -> g1x1 -> D -> BN], then relu
* ``gcwm``          as ``gm`` with a group channel-wise fusion right before the last BN
* ``dws_cw_conv``   dw3x3 -> channel-wise fusion (d_c) -> BN -> relu
* ``avgpool_fc``    global average pool -> fully connected (no bias)
* ``ccl``           convolutional classification layer

There is no BN or activation between a depthwise conv and the 1x1 that follows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import modules as nn
from .errors import BuildError, FormatError, ParameterError, ShapeError

KINDS = ("conv", "dws_conv", "group_dws_conv", "gm", "gcwm", "dws_cw_conv", "avgpool_fc", "ccl")
CLASSIFIERS = ("avgpool_fc", "ccl")
VERSIONS = ("v1", "v2", "v3", "v1_minus", "mobilenet")

GROUPS = 2
FUSION_KERNEL = 8
DWSCW_KERNEL = 16
DROPOUT_P = 1e-4
DESK_MAX_INPUT = 64


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    stride: int = 1
    groups: int = 1
    d_c: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BuildError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.stride not in (1, 2):
            raise BuildError(f"{self.kind}: stride must be 1 or 2, got {self.stride}")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    width_multiplier: float = 1.0
    n_classes: int = 1000
    input_size: int = 224
    version: str = ""
    dropout_p: float = DROPOUT_P

    def __post_init__(self):
        if not 0.0 < self.width_multiplier <= 1.0:
            raise BuildError(f"width multiplier must be in (0, 1], got {self.width_multiplier}")
        if not self.layers or self.layers[0].kind != "conv":
            raise BuildError(f"{self.name}: the first layer must be a regular conv")
        heads = [i for i, l in enumerate(self.layers) if l.kind in CLASSIFIERS]
        if heads != [len(self.layers) - 1]:
            raise BuildError(f"{self.name}: exactly one classifier layer is required, and it must be last")
        if self.n_classes < 1:
            raise BuildError(f"n_classes must be >= 1, got {self.n_classes}")


def scale_channels(channels: int, alpha: float, groups: int = GROUPS) -> int:
    """Nearest even integer to ``channels * alpha``, at least ``2 * groups``."""
    return max(2 * groups, 2 * int(round(channels * alpha / 2.0)))


def layer_names(spec: ModelSpec) -> list[str]:
    return [f"{i:02d}_{l.kind}" for i, l in enumerate(spec.layers)]


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

_STEM = [("conv", 32, 2), ("dws_conv", 64, 1), ("dws_conv", 128, 2), ("dws_conv", 128, 1),
         ("dws_conv", 256, 2), ("dws_conv", 256, 1), ("dws_conv", 512, 2)]


def _finish(name, version, rows, alpha, n_classes, input_size, head):
    if input_size < 32:
        raise BuildError(f"input_size must be >= 32, got {input_size}")
    desk = input_size <= DESK_MAX_INPUT
    layers = []
    relaxed = 0
    for kind, channels, stride, extra in rows:
        if stride == 2 and desk and relaxed < 3:
            stride, relaxed = 1, relaxed + 1
        layers.append(LayerSpec(kind, scale_channels(channels, alpha), stride, **extra))
    reduction = 2 ** sum(l.stride == 2 for l in layers)
    if input_size % reduction:
        raise BuildError(
            f"input_size {input_size} is not divisible by the total stride {reduction}"
        )
    if head == "ccl" and layers[-1].out_channels < n_classes:
        raise BuildError(f"ccl needs at least n_classes={n_classes} input channels, "
                         f"got {layers[-1].out_channels} at alpha={alpha:g}")
    layers.append(LayerSpec(head, n_classes))
    return ModelSpec(name, tuple(layers), alpha, n_classes, input_size, version)


def build_channelnet(version: str = "v1", alpha: float = 1.0, n_classes: int = 1000,
                     input_size: int = 224) -> ModelSpec:
    """ChannelNet-v1/v2/v3 or the ablation ``v1_minus`` (GCWMs swapped for GMs).

    For inputs of at most 64 pixels the first three stride-2 layers run at
    stride 1, leaving ``input_size / 4`` as the final feature-map size.
    """
    if version not in ("v1", "v2", "v3", "v1_minus"):
        raise BuildError(f"unknown ChannelNet version {version!r}")
    if not 0.0 < alpha <= 1.0:
        raise BuildError(f"width multiplier must be in (0, 1], got {alpha}")
    rows = [(k, c, s, {}) for k, c, s in _STEM]
    fusion = "gm" if version == "v1_minus" else "gcwm"
    gcwm_extra = {"groups": GROUPS} if fusion == "gm" else {"groups": GROUPS, "d_c": FUSION_KERNEL}
    rows += [(fusion, 512, 1, gcwm_extra), (fusion, 512, 1, gcwm_extra),
             ("gm", 512, 1, {"groups": GROUPS})]
    rows.append(("dws_conv", 1024, 2, {}))
    if version in ("v2", "v3"):
        rows.append(("dws_cw_conv", 1024, 1, {"d_c": DWSCW_KERNEL}))
    else:
        rows.append(("dws_conv", 1024, 1, {}))
    head = "ccl" if version == "v3" else "avgpool_fc"
    name = {"v1_minus": "ChannelNet-v1(-)"}.get(version, f"ChannelNet-{version}")
    if alpha != 1.0:
        name = f"{alpha:g} {name}"
    return _finish(name, version, rows, alpha, n_classes, input_size, head)


def build_mobilenet(alpha: float = 1.0, n_classes: int = 1000, input_size: int = 224) -> ModelSpec:
    """MobileNet(v1) baseline: the v1 stem, five DWS/1/512 layers, DWS/2/1024, DWS/1/1024."""
    if not 0.0 < alpha <= 1.0:
        raise BuildError(f"width multiplier must be in (0, 1], got {alpha}")
    rows = [(k, c, s, {}) for k, c, s in _STEM]
    rows += [("dws_conv", 512, 1, {})] * 5
    rows += [("dws_conv", 1024, 2, {}), ("dws_conv", 1024, 1, {})]
    return _finish(f"{alpha:g} MobileNet", "mobilenet", rows, alpha, n_classes, input_size,
                   "avgpool_fc")


def build_model_spec(version: str, alpha: float = 1.0, n_classes: int = 1000,
                     input_size: int = 224) -> ModelSpec:
    version = version.replace("-", "_")
    if version == "mobilenet":
        return build_mobilenet(alpha, n_classes, input_size)
    return build_channelnet(version, alpha, n_classes, input_size)


# ---------------------------------------------------------------------------
# composite blocks
# ---------------------------------------------------------------------------


def _half(prefix, channels, groups, seed, dropout_p):
    return [nn.DepthwiseConv(f"{prefix}.dw", channels, 3, 1, seed),
            nn.GroupPointwise(f"{prefix}.pw", channels, channels, groups, seed),
            nn.Dropout(f"{prefix}.drop", dropout_p)]


def build_gm(channels: int, g: int = GROUPS, name: str = "gm", seed: int = 0,
             dropout_p: float = DROPOUT_P) -> nn.Residual:
    """Group module: two depthwise + grouped-1x1 layers around a residual path."""
    if channels % g:
        raise ParameterError(f"{name}: channels={channels} not divisible by g={g}")
    body = (_half(f"{name}.a", channels, g, seed, dropout_p)
            + [nn.BatchNorm(f"{name}.a.bn", channels), nn.ReLU(f"{name}.a.relu")]
            + _half(f"{name}.b", channels, g, seed, dropout_p)
            + [nn.BatchNorm(f"{name}.b.bn", channels)])
    return nn.Residual(name, nn.Sequential(f"{name}.body", body))


def build_gcwm(channels: int, g: int = GROUPS, d_c: int = FUSION_KERNEL, name: str = "gcwm",
               seed: int = 0, dropout_p: float = DROPOUT_P) -> nn.Residual:
    """Group module with a group channel-wise fusion after the second grouped 1x1."""
    if channels % g:
        raise ParameterError(f"{name}: channels={channels} not divisible by g={g}")
    if d_c < g:
        raise ParameterError(f"{name}: fusion kernel d_c={d_c} must be >= g={g}")
    body = (_half(f"{name}.a", channels, g, seed, dropout_p)
            + [nn.BatchNorm(f"{name}.a.bn", channels), nn.ReLU(f"{name}.a.relu")]
            + _half(f"{name}.b", channels, g, seed, dropout_p)
            + [nn.GroupChannelwise(f"{name}.b.fuse", channels, g, d_c, seed),
               nn.BatchNorm(f"{name}.b.bn", channels)])
    return nn.Residual(name, nn.Sequential(f"{name}.body", body))


def _build_block(name, layer, m, spatial, spec, seed):
    n = layer.out_channels
    p = spec.dropout_p
    if layer.kind == "conv":
        return nn.Sequential(name, [nn.Conv2d(f"{name}.conv", m, n, 3, layer.stride, seed),
                                    nn.BatchNorm(f"{name}.bn", n), nn.ReLU(f"{name}.relu")])
    if layer.kind in ("dws_conv", "group_dws_conv"):
        if layer.kind == "dws_conv":
            pw = nn.Pointwise(f"{name}.pw", m, n, seed)
        else:
            pw = nn.GroupPointwise(f"{name}.pw", m, n, layer.groups, seed)
        return nn.Sequential(name, [nn.DepthwiseConv(f"{name}.dw", m, 3, layer.stride, seed), pw,
                                    nn.Dropout(f"{name}.drop", p),
                                    nn.BatchNorm(f"{name}.bn", n), nn.ReLU(f"{name}.relu")])
    if layer.kind in ("gm", "gcwm"):
        if n != m or layer.stride != 1:
            raise BuildError(f"{name}: residual blocks need in == out channels and stride 1 "
                             f"(got {m} -> {n}, stride {layer.stride})")
        if layer.kind == "gm":
            return build_gm(m, layer.groups, name, seed, p)
        return build_gcwm(m, layer.groups, layer.d_c, name, seed, p)
    if layer.kind == "dws_cw_conv":
        if n % m:
            raise BuildError(f"{name}: out channels {n} must be a multiple of in channels {m}")
        return nn.Sequential(name, [nn.DepthwiseConv(f"{name}.dw", m, 3, layer.stride, seed),
                                    nn.ChannelwiseFusion(f"{name}.cw", m, layer.d_c, n // m, seed),
                                    nn.BatchNorm(f"{name}.bn", n), nn.ReLU(f"{name}.relu")])
    if layer.kind == "avgpool_fc":
        return nn.AvgPoolFC(name, m, spec.n_classes, seed)
    if layer.kind == "ccl":
        if m < spec.n_classes:
            raise BuildError(f"{name}: ccl needs at least n_classes={spec.n_classes} "
                             f"input channels, got {m}")
        return nn.ConvClassifier(name, m, spec.n_classes, spatial, seed)
    raise BuildError(f"unknown layer kind {layer.kind!r}")


class Network(nn.Module):
    """An instantiated :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__(spec.name)
        self.spec = spec
        self.seed = seed
        blocks = []
        m, spatial = 3, spec.input_size
        for name, layer in zip(layer_names(spec), spec.layers):
            try:
                blocks.append(_build_block(name, layer, m, spatial, spec, seed))
            except (ParameterError, ShapeError) as exc:
                raise BuildError(f"layer {name}: {exc}") from exc
            spatial = -(-spatial // layer.stride)
            m = layer.out_channels
        self.blocks = blocks

    def children(self):
        return self.blocks

    @property
    def classifier(self) -> nn.Module:
        return self.blocks[-1]

    def forward(self, x, mode="infer", seed=0):
        if mode not in ("train", "infer"):
            raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
        s = self.spec.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"{self.name} expects input (N, 3, {s}, {s}), got {tuple(x.shape)}")
        train = mode == "train"
        for block in self.blocks:
            x = block.forward(x, train, seed)
        return x

    def backward(self, g):
        for block in reversed(self.blocks):
            g = block.backward(g)
        return g

    def block_param_counts(self) -> list[int]:
        return [b.num_params() for b in self.blocks]

    def set_dropout(self, p: float) -> None:
        for m in self.modules():
            if isinstance(m, nn.Dropout):
                if not 0.0 <= p < 1.0:
                    raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
                m.p = p

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.value) for p in self.params()] + self.buffers()

    def load_state(self, blocks: dict[str, np.ndarray]) -> None:
        own = {name: arr for name, arr in self.state()}
        missing = sorted(set(own) - set(blocks))
        extra = sorted(set(blocks) - set(own))
        if missing or extra:
            raise FormatError(f"checkpoint does not match {self.name}: "
                              f"missing {missing[:3]}, unexpected {extra[:3]}")
        for name, arr in own.items():
            if blocks[name].shape != arr.shape:
                raise FormatError(f"{name}: checkpoint shape {blocks[name].shape} != {arr.shape}")
            arr[...] = blocks[name]


def build_network(spec: ModelSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


# ---------------------------------------------------------------------------
# model config files
# ---------------------------------------------------------------------------


def save_model_config(path, spec: ModelSpec) -> None:
    doc = {"name": spec.name, "version": spec.version, "alpha": spec.width_multiplier,
           "classes": spec.n_classes, "input_size": spec.input_size}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model_config(path) -> ModelSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    required = ("version", "alpha", "classes", "input_size")
    missing = [k for k in required if k not in doc]
    if missing:
        raise FormatError(f"{path}: model config lacks field(s) {missing}")
    spec = build_model_spec(doc["version"], float(doc["alpha"]), int(doc["classes"]),
                            int(doc["input_size"]))
    if "name" in doc:
        spec = replace(spec, name=str(doc["name"]))
    return spec
