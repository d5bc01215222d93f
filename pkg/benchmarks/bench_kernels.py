"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--batch 128] [--repeat 5]

Also checks that both backends return bit-identical results.
"""
import argparse
import time

import numpy as np

from routenet import _pykernels

try:
    from routenet import _ckernels
except ImportError:
    _ckernels = None


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(batch):
    rng = np.random.default_rng(0)
    for H, C in ((32, 32), (16, 64), (8, 128)):
        xp = rng.standard_normal((batch, H + 2, H + 2, C)).astype(np.float32)
        cols = rng.standard_normal((batch * H * H, 9 * C)).astype(np.float32)
        x = rng.standard_normal((batch, H, H, C)).astype(np.float32)
        g = rng.standard_normal((batch, H // 2, H // 2, C)).astype(np.float32)
        yield f"im2col {H}x{H}x{C}", lambda m, xp=xp, H=H: m.im2col(xp, 3, 3, 1, H, H)
        yield f"col2im {H}x{H}x{C}", lambda m, c=cols, H=H, C=C: m.col2im(c, batch, H + 2, H + 2, C, 3, 3, 1, H, H)
        yield f"maxpool fwd {H}x{H}x{C}", lambda m, x=x: m.maxpool2x2_fwd(x)
        arg = _pykernels.maxpool2x2_fwd(x)[1]
        yield f"maxpool bwd {H}x{H}x{C}", lambda m, g=g, a=arg, H=H: m.maxpool2x2_bwd(g, a, H, H)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; only the fallback is available")
    print(f"{'kernel':<24}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for name, fn in cases(args.batch):
        tp = _time(lambda: fn(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<24}{tp * 1e3:>12.2f}")
            continue
        tc = _time(lambda: fn(_ckernels), args.repeat)
        a, b = fn(_pykernels), fn(_ckernels)
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        same = all(np.array_equal(u, v) for u, v in zip(a, b))
        print(f"{name:<24}{tp * 1e3:>12.2f}{tc * 1e3:>12.2f}{tp / tc:>10.1f}  {same}")


if __name__ == "__main__":
    main()
