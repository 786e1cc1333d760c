"""Dense and brute-force reference implementations, plus the equivalence suite.

Each oracle here is written independently of :mod:`channelkit.ops`: plain
Python loops over explicit index formulas, or an explicit dense matrix
applied with ``einsum``.  :func:`run_suite` draws random small problems and
records the largest absolute difference between every operator and its
oracle.  Operators are looked up on the ``ops`` module at call time, so a
test can swap one out for a corrupted version.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ParameterError
from .rng import derive_seed, seeded_integers, seeded_normal

DIFF_LIMIT = 1e-12


# ---------------------------------------------------------------------------
# reference implementations
# ---------------------------------------------------------------------------


def _same_pad(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, out


def naive_conv2d(x, w, stride=1):
    """Sliding-window convolution with same padding, six explicit loops."""
    n_, m, h, wd = x.shape
    n_out, _, k, _ = w.shape
    pt, oh = _same_pad(h, k, stride)
    pl, ow = _same_pad(wd, k, stride)
    out = np.zeros((n_, n_out, oh, ow))
    for b in range(n_):
        for o in range(n_out):
            for r in range(oh):
                for c in range(ow):
                    acc = 0.0
                    for i in range(m):
                        for di in range(k):
                            for dj in range(k):
                                ih, iw = r * stride + di - pt, c * stride + dj - pl
                                if 0 <= ih < h and 0 <= iw < wd:
                                    acc += w[o, i, di, dj] * x[b, i, ih, iw]
                    out[b, o, r, c] = acc
    return out


def naive_depthwise(x, w, stride=1, padding="same"):
    n_, m, h, wd = x.shape
    k = w.shape[1]
    if padding == "same":
        pt, oh = _same_pad(h, k, stride)
        pl, ow = _same_pad(wd, k, stride)
    else:
        pt = pl = 0
        oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n_, m, oh, ow))
    for b in range(n_):
        for ch in range(m):
            for r in range(oh):
                for c in range(ow):
                    acc = 0.0
                    for di in range(k):
                        for dj in range(k):
                            ih, iw = r * stride + di - pt, c * stride + dj - pl
                            if 0 <= ih < h and 0 <= iw < wd:
                                acc += w[ch, di, dj] * x[b, ch, ih, iw]
                    out[b, ch, r, c] = acc
    return out


def dense_banded(w, m, stride=1, padding="same"):
    """``W[k, i] = w[i - k*stride + p_left]`` for the channel-wise map."""
    d_c = len(w)
    if padding == "same":
        p_left = (d_c - stride) // 2
        n_out = m // stride
    else:
        p_left, n_out = 0, m - d_c + 1
    dense = np.zeros((n_out, m))
    for k in range(n_out):
        for j in range(d_c):
            i = k * stride + j - p_left
            if 0 <= i < m:
                dense[k, i] = w[j]
    return dense


def dense_block_diagonal(w):
    g, ng, mg = w.shape
    dense = np.zeros((g * ng, g * mg))
    for k in range(g):
        for r in range(ng):
            for c in range(mg):
                dense[k * ng + r, k * mg + c] = w[k, r, c]
    return dense


def apply_dense(dense, x):
    """Per-pixel channel mixing by an explicit ``(out, in)`` matrix."""
    return np.einsum("ki,bihw->bkhw", dense, x)


def naive_ccl(x, w):
    n_, m, d_f, _ = x.shape
    d_c = w.shape[2]
    n_out = m - d_c + 1
    out = np.zeros((n_, n_out))
    for b in range(n_):
        for k in range(n_out):
            acc = 0.0
            for i in range(d_f):
                for j in range(d_f):
                    for c in range(d_c):
                        acc += w[i, j, c] * x[b, k + c, i, j]
            out[b, k] = acc
    return out


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    name: str
    trials: int
    max_abs_diff: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < DIFF_LIMIT

    def row(self) -> str:
        return (f"{self.name:<34} {self.trials:>6} {self.max_abs_diff:>12.3e}  "
                f"{'ok' if self.passed else 'FAIL'}")


class _Draw:
    def __init__(self, seed):
        self.seed, self.k = seed, 0

    def _next(self):
        self.k += 1
        return derive_seed(self.seed, self.k)

    def int(self, lo, hi):
        return lo + int(seeded_integers(1, hi - lo + 1, self._next())[0])

    def normal(self, *shape):
        return seeded_normal(shape, self._next())


def _diff(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return float("inf")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _trial_channelwise_banded(r):
    s = r.int(1, 3)
    d_c = r.int(s, 7)
    m = s * r.int(1, 6)
    x, w = r.normal(r.int(1, 2), m, r.int(1, 3), r.int(1, 3)), r.normal(d_c)
    return _diff(ops.channelwise_conv(x, w, s, "same"), apply_dense(dense_banded(w, m, s), x))


def _trial_channelwise_valid(r):
    d_c = r.int(1, 5)
    m = d_c + r.int(0, 5)
    x, w = r.normal(r.int(1, 2), m, r.int(1, 3), r.int(1, 3)), r.normal(d_c)
    return _diff(ops.channelwise_conv(x, w, 1, "valid"),
                 apply_dense(dense_banded(w, m, 1, "valid"), x))


def _trial_group_pointwise(r):
    g = r.int(1, 4)
    x = r.normal(r.int(1, 2), g * r.int(1, 3), r.int(1, 3), r.int(1, 3))
    w = r.normal(g, r.int(1, 3), x.shape[1] // g)
    return _diff(ops.group_pointwise_conv(x, w), apply_dense(dense_block_diagonal(w), x))


def _trial_group_channelwise(r):
    g = r.int(1, 4)
    n = g * r.int(1, 4)
    d_c = r.int(g, g + 4)
    x, ws = r.normal(r.int(1, 2), n, r.int(1, 3), r.int(1, 3)), r.normal(g, d_c)
    dense = np.concatenate([dense_banded(ws[k], n, g) for k in range(g)], axis=0)
    return _diff(ops.group_channelwise_conv(x, ws), apply_dense(dense, x))


def _trial_avg_pool(r):
    d_f = r.int(1, 6)
    x = r.normal(r.int(1, 2), r.int(1, 4), d_f, d_f)
    fixed = np.full((x.shape[1], d_f, d_f), 1.0 / (d_f * d_f))
    got = ops.global_avg_pool(x)
    return max(_diff(got, ops.depthwise_conv2d(x, fixed, 1, "valid")),
               _diff(got, naive_depthwise(x, fixed, 1, "valid")))


def _trial_ccl_factorized(r):
    n_cls, d_f = r.int(1, 5), r.int(1, 5)
    m = n_cls + r.int(0, 5)
    x, v = r.normal(r.int(1, 2), m, d_f, d_f), r.normal(m - n_cls + 1)
    w = np.broadcast_to(v / (d_f * d_f), (d_f, d_f, v.size)).copy()
    got = ops.conv_classification_layer(x, w, n_cls)
    pooled = ops.global_avg_pool(x)
    factor = ops.channelwise_conv(pooled, v, 1, "valid").reshape(x.shape[0], n_cls)
    return max(_diff(got, factor), _diff(got, naive_ccl(x, w)))


def _trial_conv2d(r):
    s, k = r.int(1, 2), 2 * r.int(0, 1) + 1
    x = r.normal(r.int(1, 2), r.int(1, 3), r.int(2, 6), r.int(2, 6))
    w = r.normal(r.int(1, 3), x.shape[1], k, k)
    return _diff(ops.conv2d(x, w, s), naive_conv2d(x, w, s))


def _trial_depthwise(r):
    s, k = r.int(1, 2), 2 * r.int(0, 2) + 1
    x = r.normal(r.int(1, 2), r.int(1, 4), r.int(2, 7), r.int(2, 7))
    w = r.normal(x.shape[1], k, k)
    return _diff(ops.depthwise_conv2d(x, w, s), naive_depthwise(x, w, s))


def _trial_pointwise(r):
    m, n = r.int(1, 6), r.int(1, 6)
    x, w = r.normal(r.int(1, 3), m, 1, 1), r.normal(n, m)
    return max(_diff(ops.pointwise_conv(x, w), apply_dense(w, x)),
               _diff(ops.fully_connected(x[:, :, 0, 0], w), apply_dense(w, x)[:, :, 0, 0]))


TRIALS = {
    "channelwise_vs_banded_toeplitz": _trial_channelwise_banded,
    "channelwise_valid_vs_banded": _trial_channelwise_valid,
    "group_pointwise_vs_block_diagonal": _trial_group_pointwise,
    "group_channelwise_vs_strided_bands": _trial_group_channelwise,
    "avg_pool_vs_fixed_depthwise": _trial_avg_pool,
    "ccl_rank1_factorization": _trial_ccl_factorized,
    "conv2d_vs_naive_loops": _trial_conv2d,
    "depthwise_vs_naive_loops": _trial_depthwise,
    "pointwise_vs_matmul": _trial_pointwise,
}


def run_suite(trials: int = 100, seed: int = 0) -> list[OracleResult]:
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    results = []
    for name, trial in TRIALS.items():
        worst = 0.0
        for t in range(trials):
            worst = max(worst, trial(_Draw(derive_seed(seed, name, t))))
        results.append(OracleResult(name, trials, worst))
    return results


def format_table(results) -> str:
    head = f"{'equivalence':<34} {'trials':>6} {'max_abs_diff':>12}  status"
    return "\n".join([head] + [r.row() for r in results])
