"""Hot inner loops: depthwise 2-D convolution and 1-D convolution along channels.

Each kernel exists twice.  The ``*_loops`` variants are explicit loops that
numba compiles with ``parallel=True``; parallel loops only ever write disjoint
output slices and every reduction runs in a fixed serial order, so results do
not depend on the thread count.  The ``*_np`` variants are shifted-slice numpy
formulations.  The public names bind to the loop variants when numba is active
(see ``channelkit._accel``) and to the numpy variants otherwise.

Layouts: activations are ``(N, C, H, W)``; depthwise weights ``(C, k, k)``;
channel kernels are 1-D of length ``d_c``.  Padding is given explicitly as the
number of leading zeros (``pad_top``/``pad_left`` or ``pad_lo`` on the channel
axis); trailing padding is implied by the requested output extent.
"""

from __future__ import annotations

import numpy as np

from ._accel import HAVE_NUMBA, njit, prange

# ---------------------------------------------------------------------------
# depthwise 2-D
# ---------------------------------------------------------------------------


@njit()
def _padded_plane(src, pad_top, pad_left, ph, pw):
    xp = np.zeros((ph, pw))
    xp[pad_top:pad_top + src.shape[0], pad_left:pad_left + src.shape[1]] = src
    return xp


# Each (sample, channel) plane is copied into a zero-padded scratch buffer so
# the inner loops run over contiguous rows without bounds tests.


@njit(parallel=True)
def _dw_forward_loops(x, w, stride, pad_top, pad_left, out_h, out_w):
    n, c, h, wd = x.shape
    k = w.shape[1]
    ph = max(stride * (out_h - 1) + k, pad_top + h)
    pw = max(stride * (out_w - 1) + k, pad_left + wd)
    out = np.zeros((n, c, out_h, out_w))
    for bc in prange(n * c):
        b = bc // c
        ch = bc % c
        xp = _padded_plane(x[b, ch], pad_top, pad_left, ph, pw)
        o = out[b, ch]
        for oh in range(out_h):
            orow = o[oh]
            for i in range(k):
                xr = xp[oh * stride + i]
                for j in range(k):
                    wv = w[ch, i, j]
                    if stride == 1:
                        for ow in range(out_w):
                            orow[ow] += wv * xr[ow + j]
                    else:
                        for ow in range(out_w):
                            orow[ow] += wv * xr[ow * stride + j]
    return out


@njit(parallel=True)
def _dw_backward_input_loops(g, w, stride, pad_top, pad_left, in_h, in_w):
    n, c, out_h, out_w = g.shape
    k = w.shape[1]
    ph = max(stride * (out_h - 1) + k, pad_top + in_h)
    pw = max(stride * (out_w - 1) + k, pad_left + in_w)
    dx = np.empty((n, c, in_h, in_w))
    for bc in prange(n * c):
        b = bc // c
        ch = bc % c
        dp = np.zeros((ph, pw))
        gp = g[b, ch]
        for oh in range(out_h):
            grow = gp[oh]
            for i in range(k):
                dr = dp[oh * stride + i]
                for j in range(k):
                    wv = w[ch, i, j]
                    if stride == 1:
                        for ow in range(out_w):
                            dr[ow + j] += wv * grow[ow]
                    else:
                        for ow in range(out_w):
                            dr[ow * stride + j] += wv * grow[ow]
        dx[b, ch] = dp[pad_top:pad_top + in_h, pad_left:pad_left + in_w]
    return dx


@njit(parallel=True)
def _dw_backward_weight_loops(g, x, stride, pad_top, pad_left, k):
    n, c, h, wd = x.shape
    out_h, out_w = g.shape[2], g.shape[3]
    ph = max(stride * (out_h - 1) + k, pad_top + h)
    pw = max(stride * (out_w - 1) + k, pad_left + wd)
    dw = np.zeros((c, k, k))
    for ch in prange(c):
        acc = np.zeros((k, k))
        for b in range(n):
            xp = _padded_plane(x[b, ch], pad_top, pad_left, ph, pw)
            gp = g[b, ch]
            for oh in range(out_h):
                grow = gp[oh]
                for i in range(k):
                    xr = xp[oh * stride + i]
                    for j in range(k):
                        t = 0.0
                        if stride == 1:
                            for ow in range(out_w):
                                t += grow[ow] * xr[ow + j]
                        else:
                            for ow in range(out_w):
                                t += grow[ow] * xr[ow * stride + j]
                        acc[i, j] += t
        dw[ch] = acc
    return dw


def _pad_spatial(x, pad_top, pad_left, total_h, total_w):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, total_h, total_w))
    xp[:, :, pad_top:pad_top + h, pad_left:pad_left + w] = x
    return xp


def _dw_forward_np(x, w, stride, pad_top, pad_left, out_h, out_w):
    k = w.shape[1]
    span_h = stride * (out_h - 1) + k
    span_w = stride * (out_w - 1) + k
    xp = _pad_spatial(x, pad_top, pad_left, max(span_h, pad_top + x.shape[2]),
                      max(span_w, pad_left + x.shape[3]))
    out = np.zeros((x.shape[0], x.shape[1], out_h, out_w))
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i:i + stride * (out_h - 1) + 1:stride,
                     j:j + stride * (out_w - 1) + 1:stride]
            out += w[None, :, i, j, None, None] * win
    return out


def _dw_backward_input_np(g, w, stride, pad_top, pad_left, in_h, in_w):
    k = w.shape[1]
    n, c, out_h, out_w = g.shape
    total_h = max(stride * (out_h - 1) + k, pad_top + in_h)
    total_w = max(stride * (out_w - 1) + k, pad_left + in_w)
    dxp = np.zeros((n, c, total_h, total_w))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (out_h - 1) + 1:stride,
                j:j + stride * (out_w - 1) + 1:stride] += w[None, :, i, j, None, None] * g
    return dxp[:, :, pad_top:pad_top + in_h, pad_left:pad_left + in_w].copy()


def _dw_backward_weight_np(g, x, stride, pad_top, pad_left, k):
    out_h, out_w = g.shape[2], g.shape[3]
    total_h = max(stride * (out_h - 1) + k, pad_top + x.shape[2])
    total_w = max(stride * (out_w - 1) + k, pad_left + x.shape[3])
    xp = _pad_spatial(x, pad_top, pad_left, total_h, total_w)
    dw = np.zeros((x.shape[1], k, k))
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i:i + stride * (out_h - 1) + 1:stride,
                     j:j + stride * (out_w - 1) + 1:stride]
            dw[:, i, j] = np.einsum("nchw,nchw->c", g, win)
    return dw


# ---------------------------------------------------------------------------
# 1-D convolution along the channel axis (kernel shared over all pixels)
# ---------------------------------------------------------------------------


@njit(parallel=True)
def _cw_forward_loops(x, w, stride, pad_lo, out_c):
    n, in_c = x.shape[0], x.shape[1]
    p = x.shape[2]
    d_c = w.shape[0]
    out = np.zeros((n, out_c, p))
    for bk in prange(n * out_c):
        b = bk // out_c
        k = bk % out_c
        for j in range(d_c):
            ci = k * stride + j - pad_lo
            if ci < 0 or ci >= in_c:
                continue
            wj = w[j]
            for q in range(p):
                out[b, k, q] += wj * x[b, ci, q]
    return out


@njit(parallel=True)
def _cw_backward_input_loops(g, w, stride, pad_lo, in_c):
    n, out_c, p = g.shape
    d_c = w.shape[0]
    dx = np.zeros((n, in_c, p))
    for bc in prange(n * in_c):
        b = bc // in_c
        ci = bc % in_c
        for j in range(d_c):
            t = ci + pad_lo - j
            if t < 0 or t % stride != 0:
                continue
            k = t // stride
            if k >= out_c:
                continue
            wj = w[j]
            for q in range(p):
                dx[b, ci, q] += wj * g[b, k, q]
    return dx


@njit(parallel=True)
def _cw_backward_weight_loops(g, x, stride, pad_lo, d_c):
    n, out_c, p = g.shape
    in_c = x.shape[1]
    dw = np.zeros(d_c)
    for j in prange(d_c):
        acc = 0.0
        for b in range(n):
            for k in range(out_c):
                ci = k * stride + j - pad_lo
                if ci < 0 or ci >= in_c:
                    continue
                for q in range(p):
                    acc += g[b, k, q] * x[b, ci, q]
        dw[j] = acc
    return dw


def _pad_channels(x, pad_lo, total):
    xp = np.zeros((x.shape[0], total, x.shape[2]))
    xp[:, pad_lo:pad_lo + x.shape[1]] = x
    return xp


def _cw_span(stride, out_c, d_c, pad_lo, in_c):
    return max(stride * (out_c - 1) + d_c, pad_lo + in_c)


def _cw_forward_np(x, w, stride, pad_lo, out_c):
    d_c = w.shape[0]
    xp = _pad_channels(x, pad_lo, _cw_span(stride, out_c, d_c, pad_lo, x.shape[1]))
    out = np.zeros((x.shape[0], out_c, x.shape[2]))
    for j in range(d_c):
        out += w[j] * xp[:, j:j + stride * (out_c - 1) + 1:stride]
    return out


def _cw_backward_input_np(g, w, stride, pad_lo, in_c):
    d_c = w.shape[0]
    out_c = g.shape[1]
    dxp = np.zeros((g.shape[0], _cw_span(stride, out_c, d_c, pad_lo, in_c), g.shape[2]))
    for j in range(d_c):
        dxp[:, j:j + stride * (out_c - 1) + 1:stride] += w[j] * g
    return dxp[:, pad_lo:pad_lo + in_c].copy()


def _cw_backward_weight_np(g, x, stride, pad_lo, d_c):
    out_c = g.shape[1]
    xp = _pad_channels(x, pad_lo, _cw_span(stride, out_c, d_c, pad_lo, x.shape[1]))
    dw = np.empty(d_c)
    for j in range(d_c):
        dw[j] = np.vdot(g, xp[:, j:j + stride * (out_c - 1) + 1:stride])
    return dw


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

LOOP_KERNELS = {
    "dw_forward": _dw_forward_loops,
    "dw_backward_input": _dw_backward_input_loops,
    "dw_backward_weight": _dw_backward_weight_loops,
    "cw_forward": _cw_forward_loops,
    "cw_backward_input": _cw_backward_input_loops,
    "cw_backward_weight": _cw_backward_weight_loops,
}
NUMPY_KERNELS = {
    "dw_forward": _dw_forward_np,
    "dw_backward_input": _dw_backward_input_np,
    "dw_backward_weight": _dw_backward_weight_np,
    "cw_forward": _cw_forward_np,
    "cw_backward_input": _cw_backward_input_np,
    "cw_backward_weight": _cw_backward_weight_np,
}
_ACTIVE = LOOP_KERNELS if HAVE_NUMBA else NUMPY_KERNELS


def depthwise_forward(x, w, stride, pad_top, pad_left, out_h, out_w):
    return _ACTIVE["dw_forward"](x, w, stride, pad_top, pad_left, out_h, out_w)


def depthwise_backward_input(g, w, stride, pad_top, pad_left, in_h, in_w):
    return _ACTIVE["dw_backward_input"](g, w, stride, pad_top, pad_left, in_h, in_w)


def depthwise_backward_weight(g, x, stride, pad_top, pad_left, k):
    return _ACTIVE["dw_backward_weight"](g, x, stride, pad_top, pad_left, k)


def channel_forward(x, w, stride, pad_lo, out_c):
    """``x`` is ``(N, C_in, P)`` with spatial positions flattened into ``P``."""
    return _ACTIVE["cw_forward"](x, w, stride, pad_lo, out_c)


def channel_backward_input(g, w, stride, pad_lo, in_c):
    return _ACTIVE["cw_backward_input"](g, w, stride, pad_lo, in_c)


def channel_backward_weight(g, x, stride, pad_lo, d_c):
    return _ACTIVE["cw_backward_weight"](g, x, stride, pad_lo, d_c)


# ---------------------------------------------------------------------------
# batch-norm statistics and dropout masks
# ---------------------------------------------------------------------------


@njit(parallel=True)
def _bn_train_forward_loops(x, gamma, beta, eps):
    n, c, h, w = x.shape
    count = n * h * w
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    mean = np.empty(c)
    var = np.empty(c)
    for ch in prange(c):
        s = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    s += x[b, ch, i, j]
        mu = s / count
        s2 = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    d = x[b, ch, i, j] - mu
                    s2 += d * d
        v = s2 / count
        inv = 1.0 / np.sqrt(v + eps)
        gm = gamma[ch]
        bt = beta[ch]
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    xh = (x[b, ch, i, j] - mu) * inv
                    xhat[b, ch, i, j] = xh
                    y[b, ch, i, j] = gm * xh + bt
        mean[ch] = mu
        var[ch] = v
    return y, xhat, mean, var


@njit(parallel=True)
def _bn_train_backward_loops(g, xhat, inv_std, gamma):
    n, c, h, w = g.shape
    count = n * h * w
    dx = np.empty_like(g)
    dgamma = np.empty(c)
    dbeta = np.empty(c)
    for ch in prange(c):
        sg = 0.0
        sgx = 0.0
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    gv = g[b, ch, i, j]
                    sg += gv
                    sgx += gv * xhat[b, ch, i, j]
        scale = gamma[ch] * inv_std[ch] / count
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    dx[b, ch, i, j] = scale * (count * g[b, ch, i, j] - sg - xhat[b, ch, i, j] * sgx)
        dgamma[ch] = sgx
        dbeta[ch] = sg
    return dx, dgamma, dbeta


def _bn_train_forward_np(x, gamma, beta, eps):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], xhat, mean, var


def _bn_train_backward_np(g, xhat, inv_std, gamma):
    count = g.shape[0] * g.shape[2] * g.shape[3]
    sg = g.sum(axis=(0, 2, 3))
    sgx = np.einsum("nchw,nchw->c", g, xhat)
    scale = (gamma * inv_std / count)[None, :, None, None]
    dx = scale * (count * g - sg[None, :, None, None] - xhat * sgx[None, :, None, None])
    return dx, sgx, sg


@njit(parallel=True)
def _dropout_scale_loops(n, seed, p, inv_keep):
    # same SplitMix64 stream and 53-bit uniforms as channelkit.rng
    out = np.empty(n)
    base = np.uint64(seed)
    gamma = np.uint64(0x9E3779B97F4A7C15)
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)
    for i in prange(n):
        z = base + np.uint64(i + 1) * gamma
        z = (z ^ (z >> np.uint64(30))) * m1
        z = (z ^ (z >> np.uint64(27))) * m2
        z = z ^ (z >> np.uint64(31))
        u = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        out[i] = inv_keep if u >= p else 0.0
    return out


def _dropout_scale_np(n, seed, p, inv_keep):
    from .rng import seeded_uniform

    return (seeded_uniform((n,), 0.0, 1.0, seed) >= p) * inv_keep


LOOP_KERNELS.update(bn_train_forward=_bn_train_forward_loops,
                    bn_train_backward=_bn_train_backward_loops,
                    dropout_scale=_dropout_scale_loops)
NUMPY_KERNELS.update(bn_train_forward=_bn_train_forward_np,
                     bn_train_backward=_bn_train_backward_np,
                     dropout_scale=_dropout_scale_np)


def bn_train_forward(x, gamma, beta, eps):
    """Returns ``(y, xhat, batch_mean, batch_var)`` with biased variance."""
    return _ACTIVE["bn_train_forward"](x, gamma, beta, eps)


def bn_train_backward(g, xhat, inv_std, gamma):
    """Returns ``(dx, dgamma, dbeta)``."""
    return _ACTIVE["bn_train_backward"](g, xhat, inv_std, gamma)


def dropout_scale(n, seed, p):
    """Flat inverted-dropout multipliers: ``1/(1-p)`` where kept, else 0."""
    return _ACTIVE["dropout_scale"](n, np.uint64(seed & ((1 << 64) - 1)), p, 1.0 / (1.0 - p))
