"""Layer objects that own parameters and cache what their backward pass needs.

A module's ``forward(x, train, seed)`` stores activations, ``backward(g)``
accumulates into each :class:`ParamBlock` ``grad`` and returns the input
gradient.  Batch-norm running statistics change only through an explicit
:meth:`Module.update_running_stats` call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .errors import ParameterError
from .rng import derive_seed, seeded_uniform


@dataclass
class ParamBlock:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"{self.name}: grad shape {self.grad.shape} != {self.value.shape}")


def _uniform_param(name: str, shape, fan_in: int, seed: int) -> ParamBlock:
    bound = ops.fan_in_bound(fan_in)
    return ParamBlock(name, seeded_uniform(shape, -bound, bound, derive_seed(seed, name)))


class Module:
    """Base class; leaf modules override ``forward``/``backward``/``params``."""

    def __init__(self, name: str):
        self.name = name

    def children(self) -> list["Module"]:
        return []

    def own_params(self) -> list[ParamBlock]:
        return []

    def params(self) -> list[ParamBlock]:
        out = list(self.own_params())
        for child in self.children():
            out.extend(child.params())
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for child in self.children():
            out.extend(child.buffers())
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self.children():
            yield from child.modules()

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad[...] = 0.0

    def update_running_stats(self) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m.commit_batch_stats()

    def discard_batch_stats(self) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm):
                m._pending = None

    def relu_masks(self) -> list[np.ndarray]:
        return [m.mask for m in self.modules() if isinstance(m, ReLU) and m.mask is not None]

    def forward(self, x: np.ndarray, train: bool = False, seed: int = 0) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, train=False, seed=0):
        return self.forward(x, train, seed)


class Sequential(Module):
    def __init__(self, name: str, layers: list[Module]):
        super().__init__(name)
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, train=False, seed=0):
        for layer in self.layers:
            x = layer.forward(x, train, seed)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class Residual(Module):
    """``relu(body(x) + x)``."""

    def __init__(self, name: str, body: Module):
        super().__init__(name)
        self.body = body
        self.act = ReLU(f"{name}.relu")

    def children(self):
        return [self.body, self.act]

    def forward(self, x, train=False, seed=0):
        y = self.body.forward(x, train, seed)
        return self.act.forward(ops.residual_add(y, x), train, seed)

    def backward(self, g):
        gz = self.act.backward(g)
        return self.body.backward(gz) + gz


# ---------------------------------------------------------------------------
# convolution leaves
# ---------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, name, in_channels, out_channels, kernel=3, stride=1, seed=0):
        super().__init__(name)
        self.stride = stride
        self.weight = _uniform_param(f"{name}.weight", (out_channels, in_channels, kernel, kernel),
                                     kernel * kernel * in_channels, seed)

    def own_params(self):
        return [self.weight]

    def forward(self, x, train=False, seed=0):
        self.x = x
        return ops.conv2d(x, self.weight.value, self.stride)

    def backward(self, g):
        dx, dw = ops.conv2d_backward(g, self.x, self.weight.value, self.stride)
        self.weight.grad += dw
        return dx


class DepthwiseConv(Module):
    def __init__(self, name, channels, kernel=3, stride=1, seed=0):
        super().__init__(name)
        self.stride = stride
        self.weight = _uniform_param(f"{name}.weight", (channels, kernel, kernel),
                                     kernel * kernel, seed)

    def own_params(self):
        return [self.weight]

    def forward(self, x, train=False, seed=0):
        self.x = x
        return ops.depthwise_conv2d(x, self.weight.value, self.stride)

    def backward(self, g):
        dx, dw = ops.depthwise_conv2d_backward(g, self.x, self.weight.value, self.stride)
        self.weight.grad += dw
        return dx


class Pointwise(Module):
    def __init__(self, name, in_channels, out_channels, seed=0):
        super().__init__(name)
        self.weight = _uniform_param(f"{name}.weight", (out_channels, in_channels), in_channels, seed)

    def own_params(self):
        return [self.weight]

    def forward(self, x, train=False, seed=0):
        self.x = x
        return ops.pointwise_conv(x, self.weight.value)

    def backward(self, g):
        dx, dw = ops.pointwise_conv_backward(g, self.x, self.weight.value)
        self.weight.grad += dw
        return dx


class GroupPointwise(Module):
    def __init__(self, name, in_channels, out_channels, groups, seed=0):
        super().__init__(name)
        if in_channels % groups or out_channels % groups:
            raise ParameterError(
                f"{name}: groups={groups} must divide m={in_channels} and n={out_channels}"
            )
        self.weight = _uniform_param(
            f"{name}.weight", (groups, out_channels // groups, in_channels // groups),
            in_channels // groups, seed)

    def own_params(self):
        return [self.weight]

    def forward(self, x, train=False, seed=0):
        self.x = x
        return ops.group_pointwise_conv(x, self.weight.value)

    def backward(self, g):
        dx, dw = ops.group_pointwise_conv_backward(g, self.x, self.weight.value)
        self.weight.grad += dw
        return dx


class ChannelwiseFusion(Module):
    """``copies`` same-mode stride-1 channel-wise kernels, outputs concatenated.

    With ``copies == 1`` the weight is a plain length-``d_c`` vector.
    """

    def __init__(self, name, channels, d_c, copies=1, seed=0):
        super().__init__(name)
        shape = (d_c,) if copies == 1 else (copies, d_c)
        self.copies = copies
        self.weight = _uniform_param(f"{name}.weight", shape, d_c, seed)

    def own_params(self):
        return [self.weight]

    def forward(self, x, train=False, seed=0):
        self.x = x
        w = np.atleast_2d(self.weight.value)
        parts = [ops.channelwise_conv(x, w[k], 1, "same") for k in range(self.copies)]
        return parts[0] if self.copies == 1 else np.concatenate(parts, axis=1)

    def backward(self, g):
        w = np.atleast_2d(self.weight.value)
        m = self.x.shape[1]
        dx = np.zeros_like(self.x)
        dw = np.empty_like(w)
        for k in range(self.copies):
            dxk, dw[k] = ops.channelwise_conv_backward(g[:, k * m:(k + 1) * m], self.x, w[k])
            dx += dxk
        self.weight.grad += dw.reshape(self.weight.value.shape)
        return dx


class GroupChannelwise(Module):
    def __init__(self, name, channels, groups, d_c, seed=0):
        super().__init__(name)
        ops._check_group_cw(channels, groups, d_c)
        self.weight = _uniform_param(f"{name}.weight", (groups, d_c), d_c, seed)

    def own_params(self):
        return [self.weight]

    def forward(self, x, train=False, seed=0):
        self.x = x
        return ops.group_channelwise_conv(x, self.weight.value)

    def backward(self, g):
        dx, dw = ops.group_channelwise_conv_backward(g, self.x, self.weight.value)
        self.weight.grad += dw
        return dx


# ---------------------------------------------------------------------------
# normalisation, activation, regularisation
# ---------------------------------------------------------------------------


class BatchNorm(Module):
    def __init__(self, name, channels, momentum=ops.BN_MOMENTUM):
        super().__init__(name)
        self.momentum = momentum
        self.gamma = ParamBlock(f"{name}.gamma", np.ones(channels))
        self.beta = ParamBlock(f"{name}.beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self._pending = None

    def own_params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean),
                (f"{self.name}.running_var", self.running_var)]

    def forward(self, x, train=False, seed=0):
        y, self.cache = ops.batchnorm_lite(x, self.gamma.value, self.beta.value,
                                           self.running_mean, self.running_var, train)
        self._pending = (self.cache["mean"], self.cache["var"]) if train else None
        return y

    def backward(self, g):
        dx, dgamma, dbeta = ops.batchnorm_lite_backward(g, self.cache, self.gamma.value)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx

    def commit_batch_stats(self) -> None:
        """Fold the last training batch's statistics into the running ones."""
        if self._pending is None:
            return
        mean, var = self._pending
        self.running_mean *= self.momentum
        self.running_mean += (1.0 - self.momentum) * mean
        self.running_var *= self.momentum
        self.running_var += (1.0 - self.momentum) * var
        self._pending = None

    def calibrate(self) -> None:
        """Set running statistics to the last training batch's exactly."""
        if self._pending is not None:
            self.running_mean[...] = self._pending[0]
            self.running_var[...] = self._pending[1]
            self._pending = None


class ReLU(Module):
    mask = None

    def forward(self, x, train=False, seed=0):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return g * self.mask


class Dropout(Module):
    def __init__(self, name, p):
        super().__init__(name)
        if not 0.0 <= p < 1.0:
            raise ParameterError(f"{name}: dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, train=False, seed=0):
        y, self.scale = ops.dropout(x, self.p, derive_seed(seed, self.name), train)
        return y

    def backward(self, g):
        return g if self.scale is None else g * self.scale


# ---------------------------------------------------------------------------
# classifier heads
# ---------------------------------------------------------------------------


class AvgPoolFC(Module):
    def __init__(self, name, in_channels, n_classes, seed=0):
        super().__init__(name)
        self.weight = _uniform_param(f"{name}.fc.weight", (n_classes, in_channels), in_channels, seed)

    def own_params(self):
        return [self.weight]

    def forward(self, x, train=False, seed=0):
        self.x_shape = x.shape
        self.pooled = ops.global_avg_pool(x).reshape(x.shape[0], x.shape[1])
        return ops.fully_connected(self.pooled, self.weight.value)

    def backward(self, g):
        dp, dw = ops.fully_connected_backward(g, self.pooled, self.weight.value)
        self.weight.grad += dw
        return ops.global_avg_pool_backward(dp[:, :, None, None], self.x_shape)


class ConvClassifier(Module):
    def __init__(self, name, in_channels, n_classes, spatial, seed=0):
        super().__init__(name)
        if in_channels < n_classes:
            raise ParameterError(
                f"{name}: ccl needs in_channels >= n_classes, got {in_channels} < {n_classes}"
            )
        d_c = in_channels - n_classes + 1
        self.n_classes = n_classes
        self.weight = _uniform_param(f"{name}.ccl.weight", (spatial, spatial, d_c),
                                     spatial * spatial * d_c, seed)

    def own_params(self):
        return [self.weight]

    def forward(self, x, train=False, seed=0):
        self.x = x
        return ops.conv_classification_layer(x, self.weight.value, self.n_classes)

    def backward(self, g):
        dx, dw = ops.conv_classification_layer_backward(g, self.x, self.weight.value)
        self.weight.grad += dw
        return dx
