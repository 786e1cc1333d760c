"""Finite-difference verification of analytic gradients.

The scalar probed is always ``f = sum(output * cotangent)`` for a fixed
random cotangent, so ``df/dx`` is exactly what a backward pass returns when
fed that cotangent.  Central differences use ``h = 1e-5``.

An element passes when its relative error
``|a - n| / max(|a|, |n|, 1e-9)`` is below the tolerance, or when its
absolute error is below ``ABS_FLOOR`` (tiny gradients drown in rounding).
A report's ``max_rel_error`` is taken over elements not already cleared by
the absolute floor, so ``passed`` is simply ``max_rel_error < tol``.

Models are checked with batch-norm in inference mode, running statistics
calibrated to one training batch, and dropout switched off.  When a probe
flips any relu mask the element sits near a kink; it is retried with a step
10x and then 100x smaller and skipped only if every step flips a mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import modules as nn
from . import ops
from .errors import NumericalError, ParameterError
from .rng import derive_seed, seeded_integers, seeded_normal, seeded_permutation
from .zoo import ModelSpec, Network, build_gcwm, build_gm, build_model_spec

STEP = 1e-5
TOL = 1e-6
ABS_FLOOR = 1e-9


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    block_name: str
    max_rel_error: float
    max_abs_error: float
    num_elements: int
    passed: bool
    num_skipped: int = 0

    def row(self) -> str:
        mark = "ok" if self.passed else "FAIL"
        return (f"{self.op_name:<28} {self.block_name:<32} {self.num_elements:>6} "
                f"{self.num_skipped:>5} {self.max_rel_error:>10.2e} {self.max_abs_error:>10.2e}  {mark}")


TABLE_HEADER = (f"{'op':<28} {'block':<32} {'elems':>6} {'skip':>5} "
                f"{'max_rel':>10} {'max_abs':>10}  status")


def format_table(reports) -> str:
    return "\n".join([TABLE_HEADER] + [r.row() for r in reports])


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP,
                     indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``indices`` restricts the flat elements probed; the rest stay zero.
    ``x`` itself is never modified.
    """
    if not h > 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    work = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(work)
    flat = work.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(work)
        flat[i] = orig - h
        fm = f(work)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value while probing element {i}")
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad


def compare(op_name, block_name, analytic, numeric, tol=TOL, skip=None) -> GradCheckReport:
    """Elementwise comparison of two gradient arrays; ``skip`` masks out elements."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = np.ones(a.shape, bool) if skip is None else ~np.asarray(skip).reshape(-1)
    a, n = a[keep], n[keep]
    err = np.abs(a - n)
    rel = err / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)
    judged = rel[err >= ABS_FLOOR]
    max_rel = float(judged.max()) if judged.size else 0.0
    max_abs = float(err.max()) if err.size else 0.0
    return GradCheckReport(op_name, block_name, max_rel, max_abs, int(a.size),
                           bool(max_rel < tol), int(keep.size - keep.sum()))


# ---------------------------------------------------------------------------
# single operators
# ---------------------------------------------------------------------------


@dataclass
class OpCase:
    inputs: dict
    forward: Callable
    backward: Callable  # (g, **inputs) -> dict of gradients keyed like inputs


class _Draw:
    """Small deterministic sampler over the package PRNG."""

    def __init__(self, seed):
        self.seed = seed
        self.k = 0

    def _next(self):
        self.k += 1
        return derive_seed(self.seed, self.k)

    def int(self, lo, hi):
        return lo + int(seeded_integers(1, hi - lo + 1, self._next())[0])

    def choice(self, items):
        return items[self.int(0, len(items) - 1)]

    def normal(self, *shape):
        return seeded_normal(shape, self._next())


def _case_conv2d(r):
    n, m, c = r.int(1, 2), r.int(1, 3), r.int(1, 3)
    k, s = r.choice([1, 3]), r.choice([1, 2])
    x, w = r.normal(n, m, r.int(3, 6), r.int(3, 6)), r.normal(c, m, k, k)
    return OpCase({"x": x, "w": w}, lambda x, w: ops.conv2d(x, w, s),
                  lambda g, x, w: dict(zip("xw", ops.conv2d_backward(g, x, w, s))))


def _case_depthwise(r):
    m, k, s = r.int(1, 4), r.choice([1, 3, 5]), r.choice([1, 2])
    x, w = r.normal(r.int(1, 2), m, r.int(3, 7), r.int(3, 7)), r.normal(m, k, k)
    return OpCase({"x": x, "w": w}, lambda x, w: ops.depthwise_conv2d(x, w, s),
                  lambda g, x, w: dict(zip("xw", ops.depthwise_conv2d_backward(g, x, w, s))))


def _case_pointwise(r):
    m, n = r.int(1, 5), r.int(1, 5)
    x, w = r.normal(r.int(1, 2), m, r.int(1, 4), r.int(1, 4)), r.normal(n, m)
    return OpCase({"x": x, "w": w}, ops.pointwise_conv,
                  lambda g, x, w: dict(zip("xw", ops.pointwise_conv_backward(g, x, w))))


def _case_group_pointwise(r):
    g = r.choice([1, 2, 3])
    mg, ng = r.int(1, 3), r.int(1, 3)
    x, w = r.normal(r.int(1, 2), g * mg, r.int(1, 4), r.int(1, 4)), r.normal(g, ng, mg)
    return OpCase({"x": x, "w": w}, ops.group_pointwise_conv,
                  lambda gr, x, w: dict(zip("xw", ops.group_pointwise_conv_backward(gr, x, w))))


def _case_channelwise(r):
    s = r.choice([1, 2])
    d_c = r.int(s, 6)
    m = s * r.int(1, 5)
    x, w = r.normal(r.int(1, 2), m, r.int(1, 3), r.int(1, 3)), r.normal(d_c)
    return OpCase({"x": x, "w": w}, lambda x, w: ops.channelwise_conv(x, w, s, "same"),
                  lambda g, x, w: dict(zip("xw", ops.channelwise_conv_backward(g, x, w, s))))


def _case_channelwise_valid(r):
    d_c = r.int(1, 4)
    m = d_c + r.int(0, 4)
    x, w = r.normal(r.int(1, 2), m, r.int(1, 3), r.int(1, 3)), r.normal(d_c)
    return OpCase({"x": x, "w": w}, lambda x, w: ops.channelwise_conv(x, w, 1, "valid"),
                  lambda g, x, w: dict(zip("xw", ops.channelwise_conv_backward(g, x, w, 1, "valid"))))


def _case_group_channelwise(r):
    g = r.choice([1, 2, 3])
    n = g * r.int(1, 4)
    d_c = r.int(g, g + 4)
    x, w = r.normal(r.int(1, 2), n, r.int(1, 3), r.int(1, 3)), r.normal(g, d_c)
    return OpCase({"x": x, "ws": w}, ops.group_channelwise_conv,
                  lambda gr, x, ws: dict(zip(("x", "ws"), ops.group_channelwise_conv_backward(gr, x, ws))))


def _case_dws_channelwise(r):
    m, q, s = r.int(1, 4), r.choice([1, 2]), r.choice([1, 2])
    d_c = r.int(1, 5)
    x = r.normal(r.int(1, 2), m, r.int(3, 6), r.int(3, 6))
    w_cw = r.normal(d_c) if q == 1 else r.normal(q, d_c)
    return OpCase({"x": x, "w_dw": r.normal(m, 3, 3), "w_cw": w_cw},
                  lambda x, w_dw, w_cw: ops.dws_channelwise_conv(x, w_dw, w_cw, s),
                  lambda g, x, w_dw, w_cw: dict(zip(("x", "w_dw", "w_cw"),
                                                    ops.dws_channelwise_conv_backward(g, x, w_dw, w_cw, s))))


def _case_avg_pool(r):
    x = r.normal(r.int(1, 2), r.int(1, 4), r.int(1, 5), r.int(1, 5))
    return OpCase({"x": x}, ops.global_avg_pool,
                  lambda g, x: {"x": ops.global_avg_pool_backward(g, x.shape)})


def _case_ccl(r):
    n_cls, d_f = r.int(1, 4), r.int(1, 4)
    m = n_cls + r.int(0, 4)
    x, w = r.normal(r.int(1, 2), m, d_f, d_f), r.normal(d_f, d_f, m - n_cls + 1)
    return OpCase({"x": x, "w": w}, lambda x, w: ops.conv_classification_layer(x, w, n_cls),
                  lambda g, x, w: dict(zip("xw", ops.conv_classification_layer_backward(g, x, w))))


def _case_fc(r):
    m, n = r.int(1, 6), r.int(1, 6)
    x, w = r.normal(r.int(1, 3), m), r.normal(n, m)
    return OpCase({"x": x, "w": w}, ops.fully_connected,
                  lambda g, x, w: dict(zip("xw", ops.fully_connected_backward(g, x, w))))


def _bn_case(r, train):
    c = r.int(1, 4)
    x = r.normal(r.int(2, 3), c, r.int(1, 3), r.int(2, 3))
    gamma, beta = 1.0 + 0.5 * r.normal(c), r.normal(c)
    rm, rv = r.normal(c), 0.5 + np.abs(r.normal(c))

    def fwd(x, gamma, beta):
        return ops.batchnorm_lite(x, gamma, beta, rm, rv, train)[0]

    def bwd(g, x, gamma, beta):
        cache = ops.batchnorm_lite(x, gamma, beta, rm, rv, train)[1]
        return dict(zip(("x", "gamma", "beta"), ops.batchnorm_lite_backward(g, cache, gamma)))

    return OpCase({"x": x, "gamma": gamma, "beta": beta}, fwd, bwd)


def _case_relu(r):
    x = r.normal(r.int(1, 2), r.int(1, 3), r.int(1, 4), r.int(1, 4))
    x = x + np.sign(x) * 0.1  # keep away from the kink
    return OpCase({"x": x}, ops.relu, lambda g, x: {"x": ops.relu_backward(g, x)})


def _case_dropout(r):
    x = r.normal(r.int(1, 2), r.int(1, 3), r.int(1, 4), r.int(1, 4))
    return OpCase({"x": x}, lambda x: ops.dropout(x, 0.0, 0, True)[0], lambda g, x: {"x": g})


def _case_residual(r):
    shape = (r.int(1, 2), r.int(1, 3), r.int(1, 3), r.int(1, 3))
    return OpCase({"a": r.normal(*shape), "b": r.normal(*shape)}, ops.residual_add,
                  lambda g, a, b: {"a": g, "b": g})


def _case_softmax(r):
    n, k = r.int(1, 4), r.int(2, 6)
    labels = np.array([r.int(0, k - 1) for _ in range(n)])
    return OpCase({"logits": r.normal(n, k)},
                  lambda logits: np.array(ops.softmax_cross_entropy(logits, labels)[0]),
                  lambda g, logits: {"logits": float(g) * ops.softmax_cross_entropy(logits, labels)[1]})


OP_CASES = {
    "conv2d": _case_conv2d,
    "depthwise_conv2d": _case_depthwise,
    "pointwise_conv": _case_pointwise,
    "group_pointwise_conv": _case_group_pointwise,
    "channelwise_conv": _case_channelwise,
    "channelwise_conv_valid": _case_channelwise_valid,
    "group_channelwise_conv": _case_group_channelwise,
    "dws_channelwise_conv": _case_dws_channelwise,
    "global_avg_pool": _case_avg_pool,
    "conv_classification_layer": _case_ccl,
    "fully_connected": _case_fc,
    "batchnorm_lite": lambda r: _bn_case(r, train=False),
    "batchnorm_lite_train": lambda r: _bn_case(r, train=True),
    "relu": _case_relu,
    "dropout": _case_dropout,
    "residual_add": _case_residual,
    "softmax_cross_entropy": _case_softmax,
}


def check_case(op_name: str, case: OpCase, seed: int = 0, tol: float = TOL,
               h: float = STEP) -> list[GradCheckReport]:
    """Check every input of ``case`` (full finite differences)."""
    out = case.forward(**case.inputs)
    cot = seeded_normal(np.shape(out), derive_seed(seed, op_name, "cotangent"))
    analytic = case.backward(cot, **case.inputs)
    reports = []
    for key, value in case.inputs.items():
        def f(v, key=key):
            args = dict(case.inputs)
            args[key] = v
            return float(np.vdot(case.forward(**args), cot))

        numeric = finite_diff_grad(f, value, h)
        reports.append(compare(op_name, key, analytic[key], numeric, tol))
    return reports


def check_op(name: str, seed: int = 0, tol: float = TOL, shapes: int = 3,
             h: float = STEP) -> list[GradCheckReport]:
    """Check operator ``name`` at ``shapes`` random geometries."""
    if name not in OP_CASES:
        raise ParameterError(f"unknown operator {name!r}; known: {', '.join(sorted(OP_CASES))}")
    reports = []
    for t in range(shapes):
        case = OP_CASES[name](_Draw(derive_seed(seed, name, t)))
        for rep in check_case(name, case, derive_seed(seed, t), tol, h):
            reports.append(GradCheckReport(rep.op_name, f"{rep.block_name}#{t}", rep.max_rel_error,
                                           rep.max_abs_error, rep.num_elements, rep.passed,
                                           rep.num_skipped))
    return reports


# ---------------------------------------------------------------------------
# modules and whole models
# ---------------------------------------------------------------------------


def _infer(module, x):
    if isinstance(module, Network):
        return module.forward(x, "infer")
    return module.forward(x, False)


def _train_pass(module, x):
    if isinstance(module, Network):
        return module.forward(x, "train", 0)
    return module.forward(x, True, 0)


def _sample(size, limit, seed):
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(seeded_permutation(size, seed)[:limit])


def check_module(module: nn.Module, x: np.ndarray, op_name: str | None = None, seed: int = 0,
                 tol: float = TOL, max_elements: int | None = None,
                 h: float = STEP) -> list[GradCheckReport]:
    """One report per parameter block of ``module`` plus one for the input.

    ``max_elements`` caps how many elements of each block are probed; the
    subset is drawn deterministically from ``seed``.
    """
    op_name = op_name or module.name
    drops = [m for m in module.modules() if isinstance(m, nn.Dropout)]
    saved_p = [d.p for d in drops]
    for d in drops:
        d.p = 0.0
    try:
        x = np.ascontiguousarray(x, dtype=np.float64)
        _train_pass(module, x)
        for m in module.modules():
            if isinstance(m, nn.BatchNorm):
                m.calibrate()
        out = _infer(module, x)
        base_masks = [mk.copy() for mk in module.relu_masks()]
        cot = seeded_normal(out.shape, derive_seed(seed, op_name, "cotangent"))
        module.zero_grad()
        dx = module.backward(cot)
        kinked = [False]

        def probe(inp):
            val = float(np.vdot(_infer(module, inp), cot))
            masks = module.relu_masks()
            if len(masks) != len(base_masks) or any(
                    not np.array_equal(a, b) for a, b in zip(masks, base_masks)):
                kinked[0] = True
            return val

        blocks = [(p.name, p.value, p.grad.copy()) for p in module.params()]
        blocks.append(("input", x, dx))
        reports = []
        for name, value, analytic in blocks:
            idx = _sample(value.size, max_elements, derive_seed(seed, name))
            numeric = np.zeros(idx.size)
            skip = np.zeros(idx.size, bool)
            flat = value.reshape(-1)
            work = x.copy() if name == "input" else None
            wflat = work.reshape(-1) if work is not None else None
            target = wflat if work is not None else flat
            arg = work if work is not None else x
            for pos, i in enumerate(idx):
                orig = target[i]
                for step in (h, h / 10, h / 100):
                    kinked[0] = False
                    target[i] = orig + step
                    fp = probe(arg)
                    target[i] = orig - step
                    fm = probe(arg)
                    target[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise NumericalError(f"{op_name}: non-finite output probing {name}[{i}]")
                    numeric[pos] = (fp - fm) / (2.0 * step)
                    if not kinked[0]:
                        break
                skip[pos] = kinked[0]
            reports.append(compare(op_name, name, analytic.reshape(-1)[idx], numeric, tol, skip))
        return reports
    finally:
        for d, p in zip(drops, saved_p):
            d.p = p


DESK_DEFAULTS = {"alpha": 0.125, "n_classes": 10, "input_size": 32}


def check_model(model: ModelSpec | str, input_shape=None, seed: int = 0, tol: float = TOL,
                max_elements: int | None = 8, h: float = STEP) -> list[GradCheckReport]:
    """Gradient-check a whole network built from ``model``.

    A string names a version and builds the desk-scale variant.
    """
    spec = model
    if isinstance(model, str):
        spec = build_model_spec(model, DESK_DEFAULTS["alpha"], DESK_DEFAULTS["n_classes"],
                                DESK_DEFAULTS["input_size"])
    net = Network(spec, seed)
    if input_shape is None:
        input_shape = (2, 3, spec.input_size, spec.input_size)
    x = seeded_normal(tuple(input_shape), derive_seed(seed, "input"))
    return check_module(net, x, spec.name, seed, tol, max_elements, h)


def check_block(kind: str, channels: int = 8, spatial: int = 4, seed: int = 0,
                tol: float = TOL, max_elements: int | None = None) -> list[GradCheckReport]:
    """Gradient-check a stand-alone GM or GCWM block."""
    if kind == "gm":
        block = build_gm(channels, name="gm", seed=seed, dropout_p=0.0)
    elif kind == "gcwm":
        block = build_gcwm(channels, name="gcwm", seed=seed, dropout_p=0.0)
    else:
        raise ParameterError(f"block kind must be 'gm' or 'gcwm', got {kind!r}")
    x = seeded_normal((2, channels, spatial, spatial), derive_seed(seed, "input"))
    return check_module(block, x, kind, seed, tol, max_elements)


def all_passed(reports) -> bool:
    return all(r.passed for r in reports)
