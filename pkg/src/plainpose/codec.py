"""Gaussian heatmap targets and sub-pixel keypoint decoding.

Pixel/cell convention (half-pixel): heatmap cell ``c`` covers input pixels
whose centres map to ``(x + 0.5) / stride - 0.5 == c``; decoding applies the
inverse ``x = (c + 0.5) * stride - 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels


@dataclass
class KeypointSet:
    points: np.ndarray  # N_k x 3: x px, y px, v (0 unlabeled, 1 occluded, 2 visible) or confidence
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    dataset_id: str = "coco"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def visibility(self) -> np.ndarray:
        return self.points[:, 2]

    @property
    def num_keypoints(self) -> int:
        return self.points.shape[0]


def pixel_to_cell(xy, stride: float) -> np.ndarray:
    return (np.asarray(xy, dtype=np.float64) + 0.5) / stride - 0.5


def cell_to_pixel(cells, stride: float) -> np.ndarray:
    return (np.asarray(cells, dtype=np.float64) + 0.5) * stride - 0.5


def encode_targets(
    kps: KeypointSet, heatmap_hw: tuple[int, int], stride: float = 4.0, sigma: float = 2.0
) -> tuple[np.ndarray, np.ndarray]:
    """Render an h x w x N_k target and an N_k weight vector (0 for unlabeled)."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    h, w = heatmap_hw
    centers = pixel_to_cell(kps.xy, stride)
    hm = _kernels.render_gaussians(centers, h, w, sigma)
    labeled = kps.visibility > 0
    hm[:, :, ~labeled] = 0.0
    return hm, labeled.astype(np.float64)


def _refine_axis(lo, mid, hi, method: str):
    """Sub-cell offset and log-gain along one axis, vectorised.

    Parabolic: fit a parabola through the log values of the three samples;
    exact for a sampled Gaussian. Falls back to the quarter-offset rule
    (0.25 toward the larger neighbour) when a sample is not positive.
    """
    quarter = 0.25 * np.sign(hi - lo)
    if method == "quarter":
        return quarter, np.zeros_like(mid)
    ok = (lo > 0) & (mid > 0) & (hi > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        llo, lmid, lhi = np.log(np.where(ok, lo, 1.0)), np.log(np.where(ok, mid, 1.0)), np.log(np.where(ok, hi, 1.0))
        curv = llo - 2 * lmid + lhi
        slope = 0.5 * (lhi - llo)
        ok &= curv < 0
        off = np.where(ok, -slope / np.where(ok, curv, -1.0), 0.0)
    off = np.clip(off, -0.5, 0.5)
    gain = np.where(ok, slope * off + 0.5 * curv * off * off, 0.0)
    return np.where(ok, off, quarter), gain


def decode_heatmaps(hm: np.ndarray, stride: float = 4.0, method: str = "parabolic"):
    """Batch decode. ``hm`` is [N x] h x w x K; returns ([N x] K x 2 pixels, [N x] K conf)."""
    hm = np.asarray(hm, dtype=np.float64)
    single = hm.ndim == 3
    if single:
        hm = hm[None]
    n, h, w, k = hm.shape
    if h < 3 or w < 3:
        raise ValueError("heatmaps must be at least 3 x 3")
    flat = hm.transpose(0, 3, 1, 2).reshape(n, k, h * w)
    idx = flat.argmax(axis=-1)  # lowest row-major index on ties
    flat_ch = flat.max(axis=-1) == flat.min(axis=-1)
    idx = np.where(flat_ch, ((h - 1) // 2) * w + (w - 1) // 2, idx)
    ys, xs = np.divmod(idx, w)
    ni, ki = np.meshgrid(np.arange(n), np.arange(k), indexing="ij")
    peak = hm[ni, ys, xs, ki]

    def sample(dy, dx):
        yy = np.clip(ys + dy, 0, h - 1)
        xx = np.clip(xs + dx, 0, w - 1)
        return hm[ni, yy, xx, ki]

    dx, gx = _refine_axis(sample(0, -1), peak, sample(0, 1), method)
    dy, gy = _refine_axis(sample(-1, 0), peak, sample(1, 0), method)
    dx = np.where((xs > 0) & (xs < w - 1), dx, 0.0)
    gx = np.where((xs > 0) & (xs < w - 1), gx, 0.0)
    dy = np.where((ys > 0) & (ys < h - 1), dy, 0.0)
    gy = np.where((ys > 0) & (ys < h - 1), gy, 0.0)
    cells = np.stack([xs + dx, ys + dy], axis=-1)
    conf = peak * np.exp(gx + gy) if method == "parabolic" else peak
    coords = cell_to_pixel(cells, stride)
    if single:
        return coords[0], conf[0]
    return coords, conf


def decode_keypoints(
    hm: np.ndarray, stride: float = 4.0, method: str = "parabolic", dataset_id: str = "coco"
) -> KeypointSet:
    """Decode one h x w x K heatmap; the third column holds the confidence."""
    coords, conf = decode_heatmaps(hm, stride, method)
    return KeypointSet(np.column_stack([coords, conf]), dataset_id=dataset_id)


# --------------------------------------------------------------------------
# inspection output
# --------------------------------------------------------------------------


def to_pgm_bytes(channel: np.ndarray) -> bytes:
    """8-bit binary PGM of one channel, min-max scaled (flat channels map to 0)."""
    ch = np.asarray(channel, dtype=np.float64)
    lo, hi = ch.min(), ch.max()
    scaled = np.zeros_like(ch) if hi <= lo else (ch - lo) / (hi - lo) * 255.0
    pix = np.round(scaled).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def export_pgm(hm: np.ndarray, out_dir, prefix: str = "kp") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(hm.shape[-1]):
        p = out_dir / f"{prefix}_{k:02d}.pgm"
        p.write_bytes(to_pgm_bytes(hm[..., k]))
        paths.append(p)
    return paths
