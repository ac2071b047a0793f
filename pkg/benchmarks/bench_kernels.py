"""Time each hot kernel on its numba and pure-numpy paths.

    python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from plainpose import _kernels as K


def cases(rng):
    xp = rng.standard_normal((8, 64, 48, 64)).astype(np.float32)
    cols = K.im2col_numpy(xp, 4, 4, 2, 31, 23)
    ious = rng.random((20, 20))
    ign = np.zeros(20, bool)
    th = np.round(np.arange(0.5, 0.951, 0.05), 2)
    img = rng.random((128, 96, 3))
    centers, colours = rng.uniform(0, 96, (17, 2)), rng.random((17, 3))
    starts, ends = rng.uniform(0, 96, (16, 2)), rng.uniform(0, 96, (16, 2))
    gc = rng.uniform(0, 24, (17, 2))
    return {
        "im2col 8x64x48x64 k4 s2": (
            lambda: K._im2col_nb(xp, 4, 4, 2, 31, 23),
            lambda: K.im2col_numpy(xp, 4, 4, 2, 31, 23),
        ),
        "col2im (transpose of above)": (
            lambda: K._col2im_nb(cols, 64, 48, 2),
            lambda: K.col2im_numpy(cols, 64, 48, 2),
        ),
        "render_gaussians 32x24x17": (
            lambda: K._render_gaussians_nb(gc, 32, 24, 2.0),
            lambda: K.render_gaussians_numpy(gc, 32, 24, 2.0),
        ),
        "paint_blobs 17 on 128x96": (
            lambda: K._paint_blobs_nb(img.copy(), centers, colours, 0.8, 4.0),
            lambda: K.paint_blobs_numpy(img.copy(), centers, colours, 0.8, 4.0),
        ),
        "paint_segments 16 on 128x96": (
            lambda: K._paint_segments_nb(img.copy(), starts, ends, 1.5, 0.35, 0.5),
            lambda: K.paint_segments_numpy(img.copy(), starts, ends, 1.5, 0.35, 0.5),
        ),
        "greedy_match 20x20, 10 thresholds": (
            lambda: K._greedy_match_nb(ious, ign, th),
            lambda: K.greedy_match_numpy(ious, ign, th),
        ),
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed")
    print(f"{'kernel':36s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, slow) in cases(np.random.default_rng(0)).items():
        fast()  # compile
        t_fast = min(timeit.repeat(fast, number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(slow, number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {t_fast:10.3f} {t_slow:10.3f} {t_slow / t_fast:8.1f}x")


if __name__ == "__main__":
    main()
