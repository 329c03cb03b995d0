"""Time the conv2d backends over the desk net's layer shapes.

Runs both the pure-numpy im2col kernels and (when importable) the compiled
Cython/BLAS ones on identical inputs, forward and backward, and prints
per-layer medians plus the speed ratio.  Shapes follow the training
configuration: batch 8 at 32x32 with the fixed encoder-decoder plan.

    python3 benchmarks/bench_kernels.py --batch 8 --size 32 --repeats 30
"""

import argparse
import time

import numpy as np

from imas.kernels import _conv_np

try:
    from imas.kernels import _conv_cy
except ImportError:
    _conv_cy = None

# (out_ch, in_ch, kernel, pad, stride, upsample_before) -- mirrors the net.
PLAN = (
    (16, 3, 3, 1, 1, 1),
    (32, 16, 3, 1, 2, 1),
    (64, 32, 3, 1, 2, 1),
    (64, 64, 3, 1, 1, 1),
    (32, 64, 3, 1, 1, 2),
    (16, 32, 3, 1, 1, 2),
    (4, 16, 1, 0, 1, 1),
)


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_layer(impl, x, w, b, pad, stride, repeats):
    out = impl.conv2d_forward(x, w, b, pad, stride)
    gout = np.ones_like(out)
    fwd = median_time(lambda: impl.conv2d_forward(x, w, b, pad, stride),
                      repeats)
    bwd = median_time(lambda: impl.conv2d_backward(x, w, gout, pad, stride),
                      repeats)
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser(
        description=__doc__.splitlines()[0],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--dtype", default="float32",
                    choices=("float32", "float64"))
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    dtype = np.dtype(args.dtype)
    h = w = args.size
    print(f"batch={args.batch} size={args.size} dtype={args.dtype} "
          f"repeats={args.repeats}")
    if _conv_cy is None:
        print("compiled backend not importable; timing numpy only")
    header = (f"{'layer':<22} {'np fwd':>9} {'np bwd':>9} "
              f"{'cy fwd':>9} {'cy bwd':>9} {'fwd x':>6} {'bwd x':>6}")
    print(header)
    print("-" * len(header))

    totals = np.zeros(4)
    for oc, ic, k, pad, stride, up in PLAN:
        hh, ww = h * up, w * up
        x = rng.standard_normal((args.batch, ic, hh, ww)).astype(dtype)
        wgt = rng.standard_normal((oc, ic, k, k)).astype(dtype) * 0.1
        bias = np.zeros(oc, dtype=dtype)
        nf, nb = bench_layer(_conv_np, x, wgt, bias, pad, stride,
                             args.repeats)
        name = f"{ic:>3}->{oc:<3} k{k} s{stride} {hh}x{ww}"
        # spatial dims shrink through the strided encoder stages
        h = (hh + 2 * pad - k) // stride + 1
        w = (ww + 2 * pad - k) // stride + 1
        if _conv_cy is None:
            print(f"{name:<22} {nf * 1e3:8.3f}m {nb * 1e3:8.3f}m")
            continue
        cf, cb = bench_layer(_conv_cy, x, wgt, bias, pad, stride,
                             args.repeats)
        totals += (nf, nb, cf, cb)
        print(f"{name:<22} {nf * 1e3:8.3f}m {nb * 1e3:8.3f}m "
              f"{cf * 1e3:8.3f}m {cb * 1e3:8.3f}m "
              f"{nf / cf:6.2f} {nb / cb:6.2f}")

    if _conv_cy is not None:
        nf, nb, cf, cb = totals
        print("-" * len(header))
        print(f"{'total':<22} {nf * 1e3:8.3f}m {nb * 1e3:8.3f}m "
              f"{cf * 1e3:8.3f}m {cb * 1e3:8.3f}m "
              f"{nf / cf:6.2f} {nb / cb:6.2f}")


if __name__ == "__main__":
    main()
