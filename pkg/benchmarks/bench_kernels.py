"""Time the numba kernels against their numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Shapes follow the model: correlation on 1/8-scale shallow features, warp on
full-resolution images (photometric loss) and on 64-channel upsampled
semantic features (semantic loss). Each numba kernel is called once before
timing so compilation is excluded. Outputs of the two paths are compared as
well, so a fast but wrong kernel shows up here too.
"""
import argparse
import time

import numpy as np

from segstereo import kernels as K
from segstereo._accel import HAVE_NUMBA


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def _max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.abs(x - y).max()) for x, y in zip(a, b))


def cases(quick):
    rng = np.random.default_rng(0)
    n, h, w = (2, 32, 64) if quick else (4, 64, 128)
    fl = rng.normal(size=(n, 32, h // 8, w // 8)).astype(np.float32)
    fr = rng.normal(size=fl.shape).astype(np.float32)
    cg = rng.normal(size=(n, 25, h // 8, w // 8)).astype(np.float32)
    img = rng.uniform(0, 255, size=(n, 3, h, w)).astype(np.float32)
    sem = rng.normal(size=(n, 64, h, w)).astype(np.float32)
    disp = rng.uniform(0, 16, size=(n, 1, h, w)).astype(np.float32)
    return [
        ("corr_forward", K.corr_forward_nb, K.corr_forward_np, (fl, fr, 24)),
        ("corr_backward", K.corr_backward_nb, K.corr_backward_np, (cg, fl, fr, 24)),
        ("warp_forward rgb", K.warp_forward_nb, K.warp_forward_np, (img, disp)),
        ("warp_backward rgb", K.warp_backward_nb, K.warp_backward_np, (img, img, disp)),
        ("warp_forward sem64", K.warp_forward_nb, K.warp_forward_np, (sem, disp)),
        ("warp_backward sem64", K.warp_backward_nb, K.warp_backward_np, (sem, sem, disp)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small shapes, for a smoke run")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is unavailable (or disabled); the *_nb kernels run as plain python")

    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, nb, npf, a in cases(args.quick):
        diff = _max_diff(nb(*a), npf(*a))  # also triggers compilation
        t_nb = _best(nb, a, args.repeat)
        t_np = _best(npf, a, args.repeat)
        print(f"{name:<22}{1e3 * t_nb:>10.2f}{1e3 * t_np:>10.2f}{t_np / t_nb:>8.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
