"""Compare the numba loop kernels with their pure-numpy twins.

    python3 benchmarks/bench_kernels.py            # per-kernel table
    python3 benchmarks/bench_kernels.py --step     # plus one training step per backend

Per-kernel timings run both variants in this process (numba must be
importable).  ``--step`` launches a child process per backend with
``CHANNELKIT_DISABLE_NUMBA`` set accordingly, so the whole stack is measured.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

STEP_SNIPPET = """
import time
import numpy as np
from channelkit import backend_name, ops, zoo
from channelkit.rng import seeded_normal
spec = zoo.build_channelnet("v3", {alpha}, 10, 32)
net = zoo.build_network(spec, 0)
x = seeded_normal(({batch}, 3, 32, 32), 1)
y = np.arange({batch}) % 10
best = float("inf")
for i in range({repeats} + 1):
    t = time.perf_counter()
    logits = net.forward(x, "train", i)
    _, g = ops.softmax_cross_entropy(logits, y)
    net.zero_grad()
    net.backward(g)
    if i:
        best = min(best, time.perf_counter() - t)
print(backend_name(), best)
"""


def best_of(fn, args, repeats):
    fn(*args)  # warm-up / compile
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def kernel_cases(n, c, s):
    from channelkit.ops import channel_padding, same_padding

    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, s, s))
    w = rng.standard_normal((c, 3, 3))
    pt, oh = same_padding(s, 3, 1)
    pt2, oh2 = same_padding(s, 3, 2)
    g1 = rng.standard_normal((n, c, oh, oh))
    g2 = rng.standard_normal((n, c, oh2, oh2))
    x3 = x.reshape(n, c, s * s)
    wc = rng.standard_normal(8)
    lo, _ = channel_padding(8, 1)
    gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
    xhat = rng.standard_normal(x.shape)
    inv = np.abs(rng.standard_normal(c)) + 0.5
    return [
        ("dw_forward s1", "dw_forward", (x, w, 1, pt, pt, oh, oh)),
        ("dw_forward s2", "dw_forward", (x, w, 2, pt2, pt2, oh2, oh2)),
        ("dw_backward_input s1", "dw_backward_input", (g1, w, 1, pt, pt, s, s)),
        ("dw_backward_weight s1", "dw_backward_weight", (g1, x, 1, pt, pt, 3)),
        ("dw_backward_weight s2", "dw_backward_weight", (g2, x, 2, pt2, pt2, 3)),
        ("cw_forward d_c=8", "cw_forward", (x3, wc, 1, lo, c)),
        ("cw_backward_input d_c=8", "cw_backward_input", (x3, wc, 1, lo, c)),
        ("cw_backward_weight d_c=8", "cw_backward_weight", (x3, x3, 1, lo, 8)),
        ("bn_train_forward", "bn_train_forward", (x, gamma, beta, 1e-5)),
        ("bn_train_backward", "bn_train_backward", (x, xhat, inv, gamma)),
        ("dropout_scale", "dropout_scale", (x.size, np.uint64(7), 1e-4, 1.0 / (1.0 - 1e-4))),
    ]


def run_kernels(shape, repeats):
    from channelkit import _accel, kernels

    if not _accel.HAVE_NUMBA:
        sys.exit("numba is disabled or missing; per-kernel comparison needs it")
    n, c, s = shape
    print(f"shape N={n} C={c} H=W={s}, best of {repeats}")
    print(f"{'kernel':<26} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max diff':>10}")
    for label, key, args in kernel_cases(n, c, s):
        fa, fb = kernels.LOOP_KERNELS[key], kernels.NUMPY_KERNELS[key]
        ta, tb = best_of(fa, args, repeats), best_of(fb, args, repeats)
        ra, rb = fa(*args), fb(*args)
        ra = ra if isinstance(ra, tuple) else (ra,)
        rb = rb if isinstance(rb, tuple) else (rb,)
        diff = max(float(np.max(np.abs(a - b))) for a, b in zip(ra, rb))
        print(f"{label:<26} {ta * 1e3:>10.2f} {tb * 1e3:>10.2f} {tb / ta:>7.1f}x {diff:>10.1e}")


def run_step(alpha, batch, repeats):
    print(f"\ntrain step, desk v3 alpha={alpha}, batch {batch}")
    for disabled in ("0", "1"):
        env = dict(os.environ, CHANNELKIT_DISABLE_NUMBA=disabled)
        code = STEP_SNIPPET.format(alpha=alpha, batch=batch, repeats=repeats)
        out = subprocess.run([sys.executable, "-c", code], env=env, check=True,
                             capture_output=True, text=True).stdout.split()
        print(f"  {out[0]:<6} {float(out[1]) * 1e3:8.1f} ms")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--shape", type=int, nargs=3, default=(32, 32, 32), metavar=("N", "C", "S"))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--step", action="store_true", help="also time a full training step")
    p.add_argument("--alpha", type=float, default=0.125)
    p.add_argument("--batch", type=int, default=32)
    args = p.parse_args()
    run_kernels(tuple(args.shape), args.repeats)
    if args.step:
        run_step(args.alpha, args.batch, args.repeats)


if __name__ == "__main__":
    main()
