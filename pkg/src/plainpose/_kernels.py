"""Hot inner loops, each with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``PLAINPOSE_NUMBA`` is not
set to ``0``. Both paths must agree to float rounding; ``tests/test_kernels.py``
pins that and ``benchmarks/bench_kernels.py`` times them side by side.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the dev env
    numba = None
    HAS_NUMBA = False


def numba_enabled() -> bool:
    return HAS_NUMBA and os.environ.get("PLAINPOSE_NUMBA", "1") != "0"


# --------------------------------------------------------------------------
# im2col / col2im
# --------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, stride, ho, wo):
    """Gather (N, Ho, Wo, kh, kw, C) patches from a padded NHWC array."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # view: N, Hp-kh+1, Wp-kw+1, C, kh, kw
    view = view[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3))


def col2im_numpy(cols, hp, wp, stride):
    """Scatter-add (N, Ho, Wo, kh, kw, C) patches back into (N, Hp, Wp, C)."""
    n, ho, wo, kh, kw, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    hs = (ho - 1) * stride + 1
    ws = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + hs : stride, j : j + ws : stride] += cols[:, :, :, i, j]
    return out


if HAS_NUMBA:

    @numba.njit(cache=True)
    def _im2col_nb(xp, kh, kw, stride, ho, wo):
        n = xp.shape[0]
        c = xp.shape[3]
        out = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                out[b, y, x, i, j, ch] = xp[b, y * stride + i, x * stride + j, ch]
        return out

    @numba.njit(cache=True)
    def _col2im_nb(cols, hp, wp, stride):
        n, ho, wo, kh, kw, c = cols.shape
        out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
        # fixed loop order keeps the summation order identical to the numpy path
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for y in range(ho):
                        for x in range(wo):
                            for ch in range(c):
                                out[b, y * stride + i, x * stride + j, ch] += cols[b, y, x, i, j, ch]
        return out


def im2col(xp, kh, kw, stride, ho, wo):
    if numba_enabled():
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    return im2col_numpy(xp, kh, kw, stride, ho, wo)


def col2im(cols, hp, wp, stride):
    if numba_enabled():
        return _col2im_nb(np.ascontiguousarray(cols), hp, wp, stride)
    return col2im_numpy(cols, hp, wp, stride)


# --------------------------------------------------------------------------
# Gaussian heatmap rendering
# --------------------------------------------------------------------------


def render_gaussians_numpy(centers, h, w, sigma):
    """Peak-normalised Gaussians, one channel per row of ``centers`` (x, y in cells)."""
    ys = np.arange(h, dtype=np.float64)[:, None, None]
    xs = np.arange(w, dtype=np.float64)[None, :, None]
    cx = centers[:, 0][None, None, :]
    cy = centers[:, 1][None, None, :]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))


if HAS_NUMBA:

    @numba.njit(cache=True)
    def _render_gaussians_nb(centers, h, w, sigma):
        k = centers.shape[0]
        out = np.empty((h, w, k), dtype=np.float64)
        denom = 2.0 * sigma * sigma
        for y in range(h):
            for x in range(w):
                for c in range(k):
                    dx = x - centers[c, 0]
                    dy = y - centers[c, 1]
                    out[y, x, c] = np.exp(-(dx * dx + dy * dy) / denom)
        return out


def render_gaussians(centers, h, w, sigma):
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if numba_enabled():
        return _render_gaussians_nb(centers, int(h), int(w), float(sigma))
    return render_gaussians_numpy(centers, h, w, sigma)


# --------------------------------------------------------------------------
# alpha compositing of synthetic marks (in place, H x W x 3 float64)
# --------------------------------------------------------------------------


def _window(h, w, x0, y0, x1, y1, pad):
    ya = max(int(np.floor(y0 - pad)), 0)
    xa = max(int(np.floor(x0 - pad)), 0)
    yb = min(int(np.ceil(y1 + pad)) + 1, h)
    xb = min(int(np.ceil(x1 + pad)) + 1, w)
    return ya, yb, xa, xb


def paint_blobs_numpy(img, centers, colours, sigma, radius):
    """Composite peak-1 Gaussian blobs, in order, onto ``img``."""
    h, w = img.shape[:2]
    denom = 2.0 * sigma * sigma
    for k in range(centers.shape[0]):
        cx, cy = centers[k]
        ya, yb, xa, xb = _window(h, w, cx, cy, cx, cy, radius)
        yy = np.arange(ya, yb, dtype=np.float64)[:, None]
        xx = np.arange(xa, xb, dtype=np.float64)[None, :]
        a = np.exp(-((xx - cx) * (xx - cx) + (yy - cy) * (yy - cy)) / denom)[:, :, None]
        patch = img[ya:yb, xa:xb]
        patch[...] = patch * (1.0 - a) + a * colours[k]
    return img


def paint_segments_numpy(img, starts, ends, width, alpha, value):
    """Composite soft line segments of constant grey ``value`` onto ``img``."""
    h, w = img.shape[:2]
    denom = 2.0 * width * width
    for k in range(starts.shape[0]):
        ax, ay = starts[k]
        bx, by = ends[k]
        ya, yb, xa, xb = _window(h, w, min(ax, bx), min(ay, by), max(ax, bx), max(ay, by), 4.0 * width)
        yy = np.arange(ya, yb, dtype=np.float64)[:, None]
        xx = np.arange(xa, xb, dtype=np.float64)[None, :]
        dx, dy = bx - ax, by - ay
        dd = max(dx * dx + dy * dy, 1e-12)
        t = np.clip(((xx - ax) * dx + (yy - ay) * dy) / dd, 0.0, 1.0)
        ex = xx - ax - t * dx
        ey = yy - ay - t * dy
        a = (alpha * np.exp(-(ex * ex + ey * ey) / denom))[:, :, None]
        patch = img[ya:yb, xa:xb]
        patch[...] = patch * (1.0 - a) + a * value
    return img


if HAS_NUMBA:
    _window_nb = numba.njit(cache=True)(_window)

    @numba.njit(cache=True)
    def _paint_blobs_nb(img, centers, colours, sigma, radius):
        h, w = img.shape[0], img.shape[1]
        denom = 2.0 * sigma * sigma
        for k in range(centers.shape[0]):
            cx = centers[k, 0]
            cy = centers[k, 1]
            ya, yb, xa, xb = _window_nb(h, w, cx, cy, cx, cy, radius)
            for y in range(ya, yb):
                for x in range(xa, xb):
                    a = np.exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / denom)
                    for c in range(3):
                        img[y, x, c] = img[y, x, c] * (1.0 - a) + a * colours[k, c]
        return img

    @numba.njit(cache=True)
    def _paint_segments_nb(img, starts, ends, width, alpha, value):
        h, w = img.shape[0], img.shape[1]
        denom = 2.0 * width * width
        for k in range(starts.shape[0]):
            ax, ay = starts[k, 0], starts[k, 1]
            bx, by = ends[k, 0], ends[k, 1]
            ya, yb, xa, xb = _window_nb(h, w, min(ax, bx), min(ay, by), max(ax, bx), max(ay, by), 4.0 * width)
            dx, dy = bx - ax, by - ay
            dd = max(dx * dx + dy * dy, 1e-12)
            for y in range(ya, yb):
                for x in range(xa, xb):
                    t = ((x - ax) * dx + (y - ay) * dy) / dd
                    t = min(max(t, 0.0), 1.0)
                    ex = x - ax - t * dx
                    ey = y - ay - t * dy
                    a = alpha * np.exp(-(ex * ex + ey * ey) / denom)
                    for c in range(3):
                        img[y, x, c] = img[y, x, c] * (1.0 - a) + a * value
        return img


def paint_blobs(img, centers, colours, sigma, radius):
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 2)
    colours = np.ascontiguousarray(colours, dtype=np.float64).reshape(-1, 3)
    if numba_enabled():
        return _paint_blobs_nb(img, centers, colours, float(sigma), float(radius))
    return paint_blobs_numpy(img, centers, colours, sigma, radius)


def paint_segments(img, starts, ends, width, alpha, value):
    starts = np.ascontiguousarray(starts, dtype=np.float64).reshape(-1, 2)
    ends = np.ascontiguousarray(ends, dtype=np.float64).reshape(-1, 2)
    if numba_enabled():
        return _paint_segments_nb(img, starts, ends, float(width), float(alpha), float(value))
    return paint_segments_numpy(img, starts, ends, width, alpha, value)


# --------------------------------------------------------------------------
# Greedy OKS matching (one image, detections already sorted by score)
# --------------------------------------------------------------------------


def greedy_match_numpy(ious, gt_ignore, thresholds):
    """COCO-style greedy matching.

    Returns ``dt_match`` (T, D) holding the matched gt column or -1, and
    ``dt_ignore`` (T, D) flags for detections matched to ignored gts.
    Gts must be ordered with ignored ones last.
    """
    t_count = len(thresholds)
    d_count, g_count = ious.shape
    dt_match = -np.ones((t_count, d_count), dtype=np.int64)
    dt_ignore = np.zeros((t_count, d_count), dtype=np.bool_)
    for ti in range(t_count):
        gt_taken = np.zeros(g_count, dtype=np.bool_)
        for d in range(d_count):
            best = min(thresholds[ti], 1 - 1e-10)
            m = -1
            for g in range(g_count):
                if gt_taken[g]:
                    continue
                if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                    break
                if ious[d, g] < best:
                    continue
                best = ious[d, g]
                m = g
            if m == -1:
                continue
            dt_ignore[ti, d] = gt_ignore[m]
            dt_match[ti, d] = m
            gt_taken[m] = True
    return dt_match, dt_ignore


if HAS_NUMBA:
    _greedy_match_nb = numba.njit(cache=True)(greedy_match_numpy)


def greedy_match(ious, gt_ignore, thresholds):
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    gt_ignore = np.ascontiguousarray(gt_ignore, dtype=np.bool_)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    if numba_enabled():
        return _greedy_match_nb(ious, gt_ignore, thresholds)
    return greedy_match_numpy(ious, gt_ignore, thresholds)
