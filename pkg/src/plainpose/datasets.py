"""Image IO, top-down person crops and an on-disk COCO-keypoint dataset.

A dataset directory holds ``annotations.json`` (COCO keypoint format) and
the images it names, either at the top level or under ``images/``. Images
may be anything Pillow reads, ``.npy`` arrays, or ``.vtpt`` tensors
(H x W x 3 floats in [0, 1]).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import KeypointSet
from .core import serialize
from .evaluation import parse_keypoint_json
from .schemas import Schema, load_schema

CROP_PADDING = 1.25


@dataclass
class PoseSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    kps: KeypointSet


def read_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        img = np.load(path)
    elif suffix == ".vtpt":
        img = serialize.load_tensor(path)
    else:
        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{path}: expected an H x W x 3 image, got shape {img.shape}")
    return img


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    img = np.asarray(img, dtype=np.float32)
    if suffix == ".npy":
        np.save(path, img)
    elif suffix == ".vtpt":
        serialize.save_tensor(path, img)
    else:
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def crop_box(bbox, out_hw, padding: float = CROP_PADDING) -> tuple[float, float, float, float]:
    """Grow ``bbox`` (x y w h) by ``padding`` about its centre and widen it to the output aspect ratio."""
    x, y, w, h = (float(v) for v in bbox)
    cx, cy = x + w / 2, y + h / 2
    aspect = out_hw[1] / out_hw[0]
    w, h = max(w, 1.0), max(h, 1.0)
    if w > aspect * h:
        h = w / aspect
    else:
        w = aspect * h
    w, h = w * padding, h * padding
    return cx - w / 2, cy - h / 2, w, h


def crop_to_input(img: np.ndarray, bbox, out_hw, padding: float = CROP_PADDING):
    """Resample the padded box onto an ``out_hw`` grid.

    Returns the crop and the 2 x 3 affine taking crop pixels to image pixels.
    Pixel centres are at integer coordinates on both sides.
    """
    bx, by, bw, bh = crop_box(bbox, out_hw, padding)
    oh, ow = out_hw
    sx, sy = bw / ow, bh / oh
    to_img = np.array([[sx, 0.0, bx + 0.5 * sx - 0.5], [0.0, sy, by + 0.5 * sy - 0.5]])
    # Pillow's affine maps output pixel edges to input pixel edges
    data = (sx, 0.0, bx, 0.0, sy, by)
    chans = [
        np.asarray(
            Image.fromarray(np.ascontiguousarray(img[..., c], dtype=np.float32), mode="F").transform(
                (ow, oh), Image.Transform.AFFINE, data, resample=Image.Resampling.BILINEAR
            )
        )
        for c in range(img.shape[2])
    ]
    return np.stack(chans, axis=-1), to_img


def apply_affine(xy, m: np.ndarray) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    return xy @ m[:, :2].T + m[:, 2]


def invert_affine(m: np.ndarray) -> np.ndarray:
    a = np.linalg.inv(m[:, :2])
    return np.column_stack([a, -a @ m[:, 2]])


class CocoKeypointDataset:
    """Person instances of a COCO-keypoint directory, cropped to the model input.

    Crowd instances and instances without labeled joints are skipped.
    """

    def __init__(self, root, hw, schema: Schema | str = "coco", padding: float = CROP_PADDING):
        self.root = Path(root)
        self.hw = tuple(hw)
        self.schema = load_schema(schema) if isinstance(schema, str) else schema
        self.padding = padding
        kf = parse_keypoint_json(self.root / "annotations.json", self.schema)
        self.files = {im.id: im.file_name for im in kf.images}
        self.annotations = [a for a in kf.annotations if not a.iscrowd and a.num_labeled > 0]
        if not self.annotations:
            raise ValueError(f"{self.root}: no usable annotations")

    def __len__(self) -> int:
        return len(self.annotations)

    def image_path(self, image_id: int) -> Path:
        name = self.files[image_id]
        for p in (self.root / name, self.root / "images" / name):
            if p.exists():
                return p
        raise FileNotFoundError(f"image {name!r} not found under {self.root}")

    def __getitem__(self, i: int) -> PoseSample:
        ann = self.annotations[i]
        img = read_image(self.image_path(ann.image_id))
        bbox = ann.bbox
        if bbox[2] <= 0 or bbox[3] <= 0:
            lab = ann.keypoints[ann.keypoints[:, 2] > 0, :2]
            lo, hi = lab.min(axis=0), lab.max(axis=0)
            bbox = (lo[0], lo[1], hi[0] - lo[0], hi[1] - lo[1])
        crop, to_img = crop_to_input(img, bbox, self.hw, self.padding)
        pts = ann.keypoints.copy()
        pts[:, :2] = apply_affine(pts[:, :2], invert_affine(to_img))
        lab = pts[pts[:, 2] > 0, :2]
        lo, hi = lab.min(axis=0), lab.max(axis=0)
        box = (float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
        return PoseSample(crop, KeypointSet(pts, bbox=box, dataset_id=self.schema.name))


def write_coco_dir(root, samples, schema: Schema | str = "coco", suffix: str = ".png") -> Path:
    """Write samples (objects with ``image`` and ``kps``) as a dataset directory, one image each."""
    schema = load_schema(schema) if isinstance(schema, str) else schema
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    for i, s in enumerate(samples):
        name = f"{i:06d}{suffix}"
        write_image(root / "images" / name, s.image)
        h, w = s.image.shape[:2]
        images.append({"id": i, "file_name": name, "width": w, "height": h})
        x, y, bw, bh = s.kps.bbox
        anns.append(
            {
                "id": i + 1,
                "image_id": i,
                "category_id": 1,
                "keypoints": [float(v) for v in s.kps.points.reshape(-1)],
                "num_keypoints": int((s.kps.points[:, 2] > 0).sum()),
                "bbox": [float(x), float(y), float(bw), float(bh)],
                "area": float(max(bw * bh, 1.0)),
                "iscrowd": 0,
            }
        )
    obj = {"images": images, "annotations": anns, "categories": [{"id": 1, "name": "person", "keypoints": list(schema.keypoints)}]}
    (root / "annotations.json").write_text(json.dumps(obj))
    return root
