"""Forward and backward passes of the channel-mixing operator family.

Every operator is a pure function of its inputs.  Backward functions take the
upstream gradient ``g`` (same shape as the forward output) and return the
input gradient followed by the weight gradient(s).  No convolution carries a
bias; shifts live in :func:`batchnorm_lite`.

Spatial "same" padding follows the usual convention: the output extent is
``ceil(d_f / stride)`` and the odd leftover of the total padding goes to the
bottom/right.  Channel-axis "same" padding pads ``floor((d_c - s) / 2)`` zeros
in front and the remainder behind, so that ``m`` channels map to ``m / s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ParameterError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class ConvSpec:
    """Hyperparameters of one convolution-like layer."""

    in_channels: int
    out_channels: int
    spatial_kernel: int = 1
    channel_kernel: int = 1
    groups: int = 1
    spatial_stride: int = 1
    channel_stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        m, n, g = self.in_channels, self.out_channels, self.groups
        if m < 1 or n < 1:
            raise ParameterError(f"channel counts must be >= 1, got m={m}, n={n}")
        if g < 1 or m % g or n % g:
            raise ParameterError(f"groups={g} must divide both m={m} and n={n}")
        if self.spatial_kernel < 1 or self.channel_kernel < 1:
            raise ParameterError("kernel sizes must be >= 1")
        if self.spatial_stride < 1 or self.channel_stride < 1:
            raise ParameterError("strides must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ParameterError(f"padding must be 'same' or 'valid', got {self.padding!r}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require_nchw(x: np.ndarray, op: str) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected an NCHW tensor, got shape {tuple(x.shape)}")
    return np.ascontiguousarray(x, dtype=np.float64)


def _require_channels(x: np.ndarray, m: int, op: str) -> None:
    if x.shape[1] != m:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels (axis 1), weights expect {m}")


def _check_stride(stride: int, op: str) -> None:
    if stride not in (1, 2):
        raise ParameterError(f"{op}: stride must be 1 or 2, got {stride}")


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Leading pad and output extent for spatial same padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, out


def channel_padding(d_c: int, stride: int) -> tuple[int, int]:
    """(front, back) zero padding on the channel axis in same mode."""
    if d_c < stride:
        raise ParameterError(
            f"same channel padding needs d_c >= stride, got d_c={d_c}, stride={stride}"
        )
    total = d_c - stride
    return total // 2, total - total // 2


# ---------------------------------------------------------------------------
# regular 2-D convolution
# ---------------------------------------------------------------------------


def _im2col(x, k, stride, pad_top, pad_left, out_h, out_w):
    n, m, h, w = x.shape
    total_h = max(stride * (out_h - 1) + k, pad_top + h)
    total_w = max(stride * (out_w - 1) + k, pad_left + w)
    xp = kernels._pad_spatial(x, pad_top, pad_left, total_h, total_w)
    cols = np.empty((n, m, k, k, out_h, out_w))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (out_h - 1) + 1:stride,
                                  j:j + stride * (out_w - 1) + 1:stride]
    return cols


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Dense convolution, weights ``(n, m, d_k, d_k)``, same padding."""
    x = _require_nchw(x, "conv2d")
    _require_channels(x, w.shape[1], "conv2d")
    _check_stride(stride, "conv2d")
    k = w.shape[2]
    pt, oh = same_padding(x.shape[2], k, stride)
    pl, ow = same_padding(x.shape[3], k, stride)
    cols = _im2col(x, k, stride, pt, pl, oh, ow)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (n, N, oh, ow)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_backward(g, x, w, stride=1):
    x = _require_nchw(x, "conv2d")
    k = w.shape[2]
    h, wd = x.shape[2], x.shape[3]
    pt, oh = same_padding(h, k, stride)
    pl, ow = same_padding(wd, k, stride)
    cols = _im2col(x, k, stride, pt, pl, oh, ow)
    dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
    dcols = np.tensordot(w, g, axes=([0], [1]))  # (m, k, k, N, oh, ow)
    total_h = max(stride * (oh - 1) + k, pt + h)
    total_w = max(stride * (ow - 1) + k, pl + wd)
    dxp = np.zeros((x.shape[0], x.shape[1], total_h, total_w))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                j:j + stride * (ow - 1) + 1:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp[:, :, pt:pt + h, pl:pl + wd].copy(), dw


# ---------------------------------------------------------------------------
# depthwise 2-D convolution
# ---------------------------------------------------------------------------


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1,
                     padding: str = "same") -> np.ndarray:
    """One ``d_k x d_k`` kernel per channel; weights ``(m, d_k, d_k)``."""
    x = _require_nchw(x, "depthwise_conv2d")
    _require_channels(x, w.shape[0], "depthwise_conv2d")
    k = w.shape[1]
    if padding == "valid":
        if x.shape[2] < k or x.shape[3] < k:
            raise ShapeError(f"depthwise_conv2d: valid padding needs d_f >= {k}")
        return kernels.depthwise_forward(x, np.ascontiguousarray(w), stride, 0, 0,
                                         (x.shape[2] - k) // stride + 1,
                                         (x.shape[3] - k) // stride + 1)
    _check_stride(stride, "depthwise_conv2d")
    pt, oh = same_padding(x.shape[2], k, stride)
    pl, ow = same_padding(x.shape[3], k, stride)
    return kernels.depthwise_forward(x, np.ascontiguousarray(w), stride, pt, pl, oh, ow)


def depthwise_conv2d_backward(g, x, w, stride=1):
    k = w.shape[1]
    h, wd = x.shape[2], x.shape[3]
    pt, _ = same_padding(h, k, stride)
    pl, _ = same_padding(wd, k, stride)
    g = np.ascontiguousarray(g)
    dx = kernels.depthwise_backward_input(g, np.ascontiguousarray(w), stride, pt, pl, h, wd)
    dw = kernels.depthwise_backward_weight(g, np.ascontiguousarray(x), stride, pt, pl, k)
    return dx, dw


# ---------------------------------------------------------------------------
# 1x1 convolutions
# ---------------------------------------------------------------------------


def pointwise_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``out[b, j] = sum_i w[j, i] * x[b, i]`` at every pixel."""
    x = _require_nchw(x, "pointwise_conv")
    _require_channels(x, w.shape[1], "pointwise_conv")
    n_, m, h, wd = x.shape
    out = np.matmul(w, x.reshape(n_, m, h * wd))
    return out.reshape(n_, w.shape[0], h, wd)


def pointwise_conv_backward(g, x, w):
    n_, m, h, wd = x.shape
    g3 = g.reshape(n_, w.shape[0], h * wd)
    x3 = x.reshape(n_, m, h * wd)
    dx = np.matmul(w.T, g3).reshape(x.shape)
    dw = np.tensordot(g3, x3, axes=([0, 2], [0, 2]))
    return dx, dw


def group_pointwise_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Grouped 1x1 convolution, weights ``(g, n/g, m/g)``."""
    x = _require_nchw(x, "group_pointwise_conv")
    g, ng, mg = w.shape
    m = x.shape[1]
    if m % g or m // g != mg:
        raise ParameterError(
            f"group_pointwise_conv: {m} input channels do not split into {g} groups of {mg}"
        )
    n_, _, h, wd = x.shape
    xg = x.reshape(n_, g, mg, h * wd)
    out = np.matmul(w[None], xg)  # (N, g, n/g, P)
    return out.reshape(n_, g * ng, h, wd)


def group_pointwise_conv_backward(gout, x, w):
    g, ng, mg = w.shape
    n_, _, h, wd = x.shape
    g4 = gout.reshape(n_, g, ng, h * wd)
    x4 = x.reshape(n_, g, mg, h * wd)
    dx = np.matmul(w.transpose(0, 2, 1)[None], g4).reshape(x.shape)
    dw = np.empty_like(w)
    for k in range(g):
        dw[k] = np.tensordot(g4[:, k], x4[:, k], axes=([0, 2], [0, 2]))
    return dx, dw


def block_diagonal(w: np.ndarray) -> np.ndarray:
    """Dense ``(n, m)`` matrix equivalent to grouped weights ``(g, n/g, m/g)``."""
    g, ng, mg = w.shape
    dense = np.zeros((g * ng, g * mg))
    for k in range(g):
        dense[k * ng:(k + 1) * ng, k * mg:(k + 1) * mg] = w[k]
    return dense


# ---------------------------------------------------------------------------
# channel-wise convolutions
# ---------------------------------------------------------------------------


def _channelwise_geometry(m, d_c, stride, padding, out_channels):
    if padding == "same":
        pad_lo, _ = channel_padding(d_c, stride)
        if out_channels is None:
            out_channels = m // stride
        if out_channels * stride != m:
            raise ParameterError(
                f"channelwise_conv same mode needs out_channels * stride == in_channels, "
                f"got {out_channels} * {stride} != {m}"
            )
        return pad_lo, out_channels
    if padding == "valid":
        if stride != 1:
            raise ParameterError(f"channelwise_conv valid mode needs stride 1, got {stride}")
        if m < d_c:
            raise ParameterError(f"channelwise_conv valid mode needs m >= d_c, got m={m}, d_c={d_c}")
        expect = m - d_c + 1
        if out_channels is not None and out_channels != expect:
            raise ParameterError(
                f"channelwise_conv valid mode produces {expect} channels, asked for {out_channels}"
            )
        return 0, expect
    raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")


def channelwise_conv(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: str = "same",
                     out_channels: int | None = None) -> np.ndarray:
    """1-D convolution along the channel axis, one kernel shared by every pixel.

    ``out[b, k] = sum_j w[j] * x_pad[b, k * stride + j]``.
    """
    x = _require_nchw(x, "channelwise_conv")
    w = np.ascontiguousarray(w, dtype=np.float64).reshape(-1)
    n_, m, h, wd = x.shape
    pad_lo, out_c = _channelwise_geometry(m, w.shape[0], stride, padding, out_channels)
    out = kernels.channel_forward(x.reshape(n_, m, h * wd), w, stride, pad_lo, out_c)
    return out.reshape(n_, out_c, h, wd)


def channelwise_conv_backward(g, x, w, stride=1, padding="same"):
    w = np.ascontiguousarray(w, dtype=np.float64).reshape(-1)
    n_, m, h, wd = x.shape
    pad_lo, out_c = _channelwise_geometry(m, w.shape[0], stride, padding, g.shape[1])
    g3 = np.ascontiguousarray(g).reshape(n_, out_c, h * wd)
    dx = kernels.channel_backward_input(g3, w, stride, pad_lo, m).reshape(x.shape)
    dw = kernels.channel_backward_weight(g3, np.ascontiguousarray(x).reshape(n_, m, h * wd),
                                         stride, pad_lo, w.shape[0])
    return dx, dw


def banded_matrix(w: np.ndarray, in_channels: int, stride: int = 1,
                  padding: str = "same") -> np.ndarray:
    """Dense ``(out, in)`` matrix ``W[k, i] = w[i - k * stride + pad_lo]``."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    pad_lo, out_c = _channelwise_geometry(in_channels, w.shape[0], stride, padding, None)
    dense = np.zeros((out_c, in_channels))
    for k in range(out_c):
        for i in range(in_channels):
            j = i - k * stride + pad_lo
            if 0 <= j < w.shape[0]:
                dense[k, i] = w[j]
    return dense


def _check_group_cw(n, g, d_c):
    if g < 1 or n % g:
        raise ParameterError(f"group_channelwise_conv: {n} channels not divisible by g={g}")
    if d_c < g:
        raise ParameterError(
            f"group_channelwise_conv needs d_c >= g so every group sees all channels, "
            f"got d_c={d_c}, g={g}"
        )


def group_channelwise_conv(x: np.ndarray, ws: np.ndarray) -> np.ndarray:
    """``g`` channel-wise convolutions of stride ``g``, outputs concatenated.

    ``ws`` has shape ``(g, d_c)``.  All kernels read the same padded window
    and differ only in their weights.
    """
    x = _require_nchw(x, "group_channelwise_conv")
    g, d_c = ws.shape
    n_, n, h, wd = x.shape
    _check_group_cw(n, g, d_c)
    pad_lo, _ = channel_padding(d_c, g)
    x3 = x.reshape(n_, n, h * wd)
    parts = [kernels.channel_forward(x3, np.ascontiguousarray(ws[k]), g, pad_lo, n // g)
             for k in range(g)]
    return np.concatenate(parts, axis=1).reshape(n_, n, h, wd)


def group_channelwise_conv_backward(gout, x, ws):
    g, d_c = ws.shape
    n_, n, h, wd = x.shape
    pad_lo, _ = channel_padding(d_c, g)
    x3 = np.ascontiguousarray(x).reshape(n_, n, h * wd)
    g3 = np.ascontiguousarray(gout).reshape(n_, n, h * wd)
    ng = n // g
    dx = np.zeros((n_, n, h * wd))
    dws = np.empty_like(ws)
    for k in range(g):
        gk = np.ascontiguousarray(g3[:, k * ng:(k + 1) * ng])
        dx += kernels.channel_backward_input(gk, np.ascontiguousarray(ws[k]), g, pad_lo, n)
        dws[k] = kernels.channel_backward_weight(gk, x3, g, pad_lo, d_c)
    return dx.reshape(x.shape), dws


def dws_channelwise_conv(x: np.ndarray, w_dw: np.ndarray, w_cw: np.ndarray,
                         stride: int = 1) -> np.ndarray:
    """Depthwise ``d_k x d_k`` convolution followed by same-mode channel-wise fusion.

    ``w_cw`` is ``(d_c,)`` for ``n == m`` or ``(q, d_c)`` for ``n == q * m``;
    the ``q`` stride-1 outputs are concatenated along channels.
    """
    kernels_cw = np.atleast_2d(np.asarray(w_cw, dtype=np.float64))
    y = depthwise_conv2d(x, w_dw, stride)
    parts = [channelwise_conv(y, kernels_cw[k], 1, "same") for k in range(kernels_cw.shape[0])]
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)


def dws_channelwise_conv_backward(g, x, w_dw, w_cw, stride=1):
    kernels_cw = np.atleast_2d(np.asarray(w_cw, dtype=np.float64))
    y = depthwise_conv2d(x, w_dw, stride)
    m = y.shape[1]
    dy = np.zeros_like(y)
    dcw = np.empty_like(kernels_cw)
    for k in range(kernels_cw.shape[0]):
        dyk, dcw[k] = channelwise_conv_backward(g[:, k * m:(k + 1) * m], y, kernels_cw[k])
        dy += dyk
    dx, ddw = depthwise_conv2d_backward(dy, x, w_dw, stride)
    return dx, ddw, dcw.reshape(np.shape(w_cw))


# ---------------------------------------------------------------------------
# classifier heads
# ---------------------------------------------------------------------------


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    x = _require_nchw(x, "global_avg_pool")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(g, x_shape):
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(g / (h * w), x_shape).copy()


def conv_classification_layer(x: np.ndarray, w: np.ndarray,
                              n_classes: int | None = None) -> np.ndarray:
    """Single 3-D convolution, kernel ``(d_f, d_f, d_c)``, no padding.

    ``out[b, k] = sum_{i,j,c} w[i, j, c] * x[b, k + c, i, j]`` for
    ``k < m - d_c + 1``.
    """
    x = _require_nchw(x, "conv_classification_layer")
    df_h, df_w, d_c = w.shape
    n_, m, h, wd = x.shape
    if (h, wd) != (df_h, df_w):
        raise ShapeError(
            f"conv_classification_layer: feature map is {h}x{wd}, kernel expects {df_h}x{df_w}"
        )
    n_out = m - d_c + 1
    if n_out < 1:
        raise ParameterError(
            f"conv_classification_layer: m={m} channels cannot feed a kernel of depth {d_c}"
        )
    if n_classes is not None and n_classes != n_out:
        if m < n_classes:
            raise ParameterError(f"conv_classification_layer needs m >= n_classes, got {m} < {n_classes}")
        raise ParameterError(f"kernel depth must be m - n_classes + 1 = {m - n_classes + 1}, got {d_c}")
    s = np.tensordot(x, w, axes=([2, 3], [0, 1]))  # (N, m, d_c)
    out = np.zeros((n_, n_out))
    for c in range(d_c):
        out += s[:, c:c + n_out, c]
    return out


def conv_classification_layer_backward(g, x, w):
    d_c = w.shape[2]
    n_, m = x.shape[0], x.shape[1]
    n_out = g.shape[1]
    ds = np.zeros((n_, m, d_c))
    for c in range(d_c):
        ds[:, c:c + n_out, c] = g
    dx = np.tensordot(ds, w, axes=([2], [2]))  # (N, m, d_f, d_f)
    dw = np.tensordot(x, ds, axes=([0, 1], [0, 1]))
    return dx, dw


def fully_connected(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Dense map without bias: ``(N, m) @ (n, m).T``."""
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"fully_connected: input shape {tuple(x.shape)} does not match weights {tuple(w.shape)}"
        )
    return x @ w.T


def fully_connected_backward(g, x, w):
    return g @ w, g.T @ x


# ---------------------------------------------------------------------------
# auxiliary operators
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(g, x):
    return g * (x > 0)


def batchnorm_lite(x, gamma, beta, running_mean=None, running_var=None, train=True,
                   eps=BN_EPS):
    """Per-channel normalisation followed by a learned scale and shift.

    Returns ``(y, cache)``.  In training mode ``cache`` carries the batch mean
    and (biased) variance that the owner may fold into its running statistics.
    """
    x = _require_nchw(x, "batchnorm_lite")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm_lite: gamma/beta must have shape ({c},)")
    if train:
        y, xhat, mean, var = kernels.bn_train_forward(x, np.ascontiguousarray(gamma),
                                                      np.ascontiguousarray(beta), eps)
        inv_std = 1.0 / np.sqrt(var + eps)
    else:
        mean, var = running_mean, running_var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var, "train": train}


def batchnorm_lite_backward(g, cache, gamma):
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    if cache["train"]:
        return kernels.bn_train_backward(np.ascontiguousarray(g), xhat, inv_std, gamma)
    dgamma = np.einsum("nchw,nchw->c", g, xhat)
    dbeta = g.sum(axis=(0, 2, 3))
    return g * (gamma * inv_std)[None, :, None, None], dgamma, dbeta


def dropout(x: np.ndarray, p: float, seed: int, train: bool = True):
    """Inverted dropout.  Returns ``(y, scale_mask)``; the mask is ``None`` if inactive."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x.copy(), None
    mask = kernels.dropout_scale(x.size, seed, p).reshape(x.shape)
    return x * mask, mask


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}"
        )
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    idx = np.arange(n)
    loss = float(-log_p[idx, labels].mean())
    grad = np.exp(log_p)
    grad[idx, labels] -= 1.0
    return loss, grad / n


def fan_in_bound(fan_in: int) -> float:
    return math.sqrt(1.0 / fan_in)
