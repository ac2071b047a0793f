"""Synthetic single-person crops: coloured joint blobs, stick limbs, grey clutter.

Every sample is a pure function of ``(seed, index)``. Joint positions are
i.i.d. uniform over a central box so their marginals are exactly uniform.
Each joint gets its own saturated colour; limbs and clutter are grey, so
colour alone identifies a joint.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .. import _kernels
from ..codec import KeypointSet
from ..schemas import Schema, load_schema

# the {0, .5, 1}^3 colour cube without its greys, most saturated first
_PALETTE = np.array(
    [c for c in itertools.product((0.0, 0.5, 1.0), repeat=3) if not (c[0] == c[1] == c[2])]
)
_PALETTE = _PALETTE[np.argsort(-np.abs(_PALETTE - 0.5).sum(axis=1), kind="stable")]


def joint_colours(num_keypoints: int) -> np.ndarray:
    if num_keypoints > len(_PALETTE):
        raise ValueError(f"at most {len(_PALETTE)} distinct joint colours")
    return _PALETTE[:num_keypoints]


@dataclass
class SynthParams:
    margin: float = 0.125  # fraction of each side excluded from joint placement
    blob_sigma: float = 0.8  # px
    limb_alpha: float = 0.35
    clutter_rects: int = 4
    noise_std: float = 0.02
    occlusion_prob: float = 0.0


@dataclass
class SyntheticSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    kps: KeypointSet
    params: SynthParams = field(default_factory=SynthParams)


def central_box(hw: tuple[int, int], margin: float) -> tuple[float, float, float, float]:
    h, w = hw
    return (margin * w, margin * h, (1 - 2 * margin) * w, (1 - 2 * margin) * h)


def sample_joints(rng: np.random.Generator, hw, num_keypoints: int, margin: float) -> np.ndarray:
    x0, y0, bw, bh = central_box(hw, margin)
    xs = x0 + bw * rng.random(num_keypoints)
    ys = y0 + bh * rng.random(num_keypoints)
    return np.column_stack([xs, ys])


def blob_alpha(hw, center_xy, sigma: float) -> np.ndarray:
    """Peak-1 Gaussian alpha centred exactly on ``center_xy`` (pixel-centre coordinates)."""
    h, w = hw
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    return np.exp(-((xx - center_xy[0]) ** 2 + (yy - center_xy[1]) ** 2) / (2 * sigma * sigma))


def render(rng: np.random.Generator, hw, joints: np.ndarray, schema: Schema, p: SynthParams):
    h, w = hw
    # smooth grey background gradient
    g0, gx, gy = 0.3 + 0.4 * rng.random(), 0.2 * rng.standard_normal(), 0.2 * rng.standard_normal()
    base = g0 + gx * (np.arange(w)[None, :] / w - 0.5) + gy * (np.arange(h)[:, None] / h - 0.5)
    img = np.repeat(base[:, :, None], 3, axis=2)
    for _ in range(p.clutter_rects):
        y, x = rng.integers(0, h), rng.integers(0, w)
        rh, rw = rng.integers(2, max(3, h // 4)), rng.integers(2, max(3, w // 4))
        img[y : y + rh, x : x + rw] = rng.random()
    if schema.skeleton:
        limbs = np.asarray(schema.skeleton)
        _kernels.paint_segments(img, joints[limbs[:, 0]], joints[limbs[:, 1]], 0.7, p.limb_alpha, 0.5)
    vis = np.full(len(joints), 2.0)
    _kernels.paint_blobs(img, joints, joint_colours(len(joints)), p.blob_sigma, 5 * p.blob_sigma)
    if p.occlusion_prob > 0:
        for k in np.flatnonzero(rng.random(len(joints)) < p.occlusion_prob):
            x, y = np.round(joints[k]).astype(int)
            img[max(y - 2, 0) : y + 3, max(x - 2, 0) : x + 3] = rng.random()
            vis[k] = 1.0
    if p.noise_std > 0:
        img = img + p.noise_std * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), vis


def synth_sample(index: int, hw, schema: Schema | str = "coco", seed: int = 0, params: SynthParams | None = None):
    schema = load_schema(schema) if isinstance(schema, str) else schema
    p = params or SynthParams()
    rng = np.random.default_rng([seed, index])
    joints = sample_joints(rng, hw, schema.num_keypoints, p.margin)
    image, vis = render(rng, hw, joints, schema, p)
    lo, hi = joints.min(axis=0), joints.max(axis=0)
    bbox = (float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
    kps = KeypointSet(np.column_stack([joints, vis]), bbox=bbox, dataset_id=schema.name)
    return SyntheticSample(image, kps, p)


def synth_generate(
    n: int, hw, schema: Schema | str = "coco", seed: int = 0, params: SynthParams | None = None, start: int = 0
) -> Iterator[SyntheticSample]:
    for i in range(start, start + n):
        yield synth_sample(i, hw, schema, seed, params)


class SyntheticDataset:
    """Indexable, lazily rendered synthetic set; the first ``cache_size`` samples rendered are kept."""

    def __init__(
        self,
        n: int,
        hw,
        schema: Schema | str = "coco",
        seed: int = 0,
        params: SynthParams | None = None,
        cache_size: int = 2048,
    ):
        if n < 1:
            raise ValueError("dataset must not be empty")
        self.n = n
        self.hw = tuple(hw)
        self.schema = load_schema(schema) if isinstance(schema, str) else schema
        self.seed = seed
        self.params = params or SynthParams()
        self.cache_size = cache_size
        self._cache: dict[int, SyntheticSample] = {}

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> SyntheticSample:
        if not 0 <= i < self.n:
            raise IndexError(i)
        s = self._cache.get(i)
        if s is None:
            s = synth_sample(i, self.hw, self.schema, self.seed, self.params)
            if len(self._cache) < self.cache_size:
                self._cache[i] = s
        return s
