"""COCO-keypoint JSON ingestion, OKS-based AP/AR, PCKh and bbox-normalised PCK."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .schemas import Schema, load_schema

OKS_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 20
AREA_RANGES = {"all": (0.0, 1e10), "medium": (32.0**2, 96.0**2), "large": (96.0**2, 1e10)}


# --------------------------------------------------------------------------
# records and parsing
# --------------------------------------------------------------------------


class ParseError(ValueError):
    """Malformed keypoint file; ``location`` pinpoints the offending record."""

    def __init__(self, message: str, location: str = "", path: str | None = None):
        self.message = message
        self.location = location
        self.path = path
        where = ": ".join(p for p in (path, location) if p)
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class ImageRecord:
    id: int
    file_name: str = ""
    width: int = 0
    height: int = 0


@dataclass
class Annotation:
    id: int
    image_id: int
    keypoints: np.ndarray  # N_k x 3
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    area: float = 0.0
    iscrowd: int = 0
    category_id: int = 1

    @property
    def num_labeled(self) -> int:
        return int((self.keypoints[:, 2] > 0).sum())

    def __eq__(self, other):
        if not isinstance(other, Annotation):
            return NotImplemented
        return (
            (self.id, self.image_id, tuple(self.bbox), self.area, self.iscrowd, self.category_id)
            == (other.id, other.image_id, tuple(other.bbox), other.area, other.iscrowd, other.category_id)
            and np.array_equal(self.keypoints, other.keypoints)
        )


@dataclass
class Prediction:
    image_id: int
    keypoints: np.ndarray  # N_k x 3, third column is a per-joint score
    score: float
    category_id: int = 1

    def __eq__(self, other):
        if not isinstance(other, Prediction):
            return NotImplemented
        return (self.image_id, self.score, self.category_id) == (
            other.image_id,
            other.score,
            other.category_id,
        ) and np.array_equal(self.keypoints, other.keypoints)


@dataclass
class KeypointFile:
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    predictions: list[Prediction] = field(default_factory=list)

    @property
    def is_prediction(self) -> bool:
        return not self.images and not self.annotations and bool(self.predictions)


def _number(value, loc: str, name: str, path) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ParseError(f"{name} must be a finite number, got {value!r}", loc, path)
    return value


def _int_id(rec: dict, key: str, loc: str, path) -> int:
    if key not in rec:
        raise ParseError(f"missing {key!r}", loc, path)
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"{key} must be an integer, got {v!r}", loc, path)
    return v


def _keypoints(rec: dict, schema: Schema, loc: str, path) -> np.ndarray:
    if "keypoints" not in rec:
        raise ParseError("missing 'keypoints'", loc, path)
    kp = rec["keypoints"]
    if not isinstance(kp, list):
        raise ParseError("keypoints must be a list", loc, path)
    need = 3 * schema.num_keypoints
    if len(kp) != need:
        raise ParseError(
            f"keypoints has {len(kp)} values, schema {schema.name!r} needs {need}", loc, path
        )
    for j, v in enumerate(kp):
        _number(v, loc, f"keypoints[{j}]", path)
    return np.asarray(kp, dtype=np.float64).reshape(-1, 3)


def _bbox(rec: dict, loc: str, path, required: bool) -> tuple[float, float, float, float]:
    if "bbox" not in rec:
        if required:
            raise ParseError("missing 'bbox'", loc, path)
        return (0.0, 0.0, 0.0, 0.0)
    b = rec["bbox"]
    if not isinstance(b, list) or len(b) != 4:
        raise ParseError(f"bbox must be a list of 4 numbers, got {b!r}", loc, path)
    return tuple(float(_number(v, loc, "bbox", path)) for v in b)


def _loc(section: str, i: int, rec) -> str:
    rid = rec.get("id") if isinstance(rec, dict) else None
    return f"{section}[{i}]" + (f" (id={rid})" if rid is not None else "")


def parse_keypoint_obj(obj, schema: Schema | str, path: str | None = None) -> KeypointFile:
    schema = load_schema(schema) if isinstance(schema, str) else schema
    if isinstance(obj, list):
        preds = []
        for i, rec in enumerate(obj):
            loc = _loc("results", i, rec)
            if not isinstance(rec, dict):
                raise ParseError("result entry must be an object", loc, path)
            score = float(_number(rec.get("score"), loc, "score", path)) if "score" in rec else None
            if score is None:
                raise ParseError("missing 'score'", loc, path)
            preds.append(
                Prediction(
                    image_id=_int_id(rec, "image_id", loc, path),
                    keypoints=_keypoints(rec, schema, loc, path),
                    score=score,
                    category_id=int(rec.get("category_id", 1)),
                )
            )
        return KeypointFile(predictions=preds)
    if not isinstance(obj, dict):
        raise ParseError(f"top level must be an object or a result list, got {type(obj).__name__}", "", path)
    for key in ("images", "annotations"):
        if key not in obj:
            raise ParseError(f"missing top-level {key!r}", "", path)
        if not isinstance(obj[key], list):
            raise ParseError(f"{key!r} must be a list", "", path)
    images = []
    for i, rec in enumerate(obj["images"]):
        loc = _loc("images", i, rec)
        if not isinstance(rec, dict):
            raise ParseError("image entry must be an object", loc, path)
        images.append(
            ImageRecord(
                id=_int_id(rec, "id", loc, path),
                file_name=str(rec.get("file_name", "")),
                width=int(rec.get("width", 0)),
                height=int(rec.get("height", 0)),
            )
        )
    image_ids = {im.id for im in images}
    if len(image_ids) != len(images):
        raise ParseError("duplicate image ids", "images", path)
    anns, seen = [], set()
    for i, rec in enumerate(obj["annotations"]):
        loc = _loc("annotations", i, rec)
        if not isinstance(rec, dict):
            raise ParseError("annotation entry must be an object", loc, path)
        aid = _int_id(rec, "id", loc, path)
        if aid in seen:
            raise ParseError(f"duplicate annotation id {aid}", loc, path)
        seen.add(aid)
        image_id = _int_id(rec, "image_id", loc, path)
        if image_id not in image_ids:
            raise ParseError(f"image_id {image_id} not present in 'images'", loc, path)
        kps = _keypoints(rec, schema, loc, path)
        bbox = _bbox(rec, loc, path, required=False)
        area = float(_number(rec["area"], loc, "area", path)) if "area" in rec else bbox[2] * bbox[3]
        anns.append(
            Annotation(
                id=aid,
                image_id=image_id,
                keypoints=kps,
                bbox=bbox,
                area=area,
                iscrowd=int(rec.get("iscrowd", 0)),
                category_id=int(rec.get("category_id", 1)),
            )
        )
    return KeypointFile(images=images, annotations=anns)


def parse_keypoint_json(path_or_text, schema: Schema | str) -> KeypointFile:
    """Parse a COCO keypoint GT file or a result list.

    ``path_or_text`` is a path, or JSON text when it starts with ``{`` or ``[``.
    Every failure raises :class:`ParseError`; unknown fields are ignored.
    """
    src = str(path_or_text)
    path = None
    if src.lstrip()[:1] in ("{", "["):
        text = src
    else:
        path = src
        try:
            text = Path(src).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read file: {exc.strerror or exc}", "", path) from None
        except UnicodeDecodeError:
            raise ParseError("file is not UTF-8 text", "", path) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", f"line {exc.lineno} column {exc.colno}", path) from None
    return parse_keypoint_obj(obj, schema, path)


def _flat(kps: np.ndarray) -> list[float]:
    return [float(v) for v in np.asarray(kps).reshape(-1)]


def keypoint_file_to_obj(kf: KeypointFile):
    if kf.is_prediction:
        return [
            {"image_id": p.image_id, "category_id": p.category_id, "keypoints": _flat(p.keypoints), "score": p.score}
            for p in kf.predictions
        ]
    return {
        "images": [asdict(im) for im in kf.images],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "keypoints": _flat(a.keypoints),
                "num_keypoints": a.num_labeled,
                "bbox": list(a.bbox),
                "area": a.area,
                "iscrowd": a.iscrowd,
            }
            for a in kf.annotations
        ],
        "categories": [{"id": 1, "name": "person"}],
    }


def dump_keypoint_json(kf: KeypointFile, path=None) -> str:
    text = json.dumps(keypoint_file_to_obj(kf))
    if path is not None:
        Path(path).write_text(text)
    return text


# --------------------------------------------------------------------------
# OKS and AP/AR
# --------------------------------------------------------------------------


def oks(pred_xy, gt: Annotation, sigmas) -> float | None:
    """Object keypoint similarity over the labeled gt joints; None if none are labeled."""
    pred_xy = np.asarray(getattr(pred_xy, "xy", pred_xy), dtype=np.float64)[:, :2]
    g = gt.keypoints
    labeled = g[:, 2] > 0
    if not labeled.any():
        return None
    k2 = (2.0 * np.asarray(sigmas, dtype=np.float64)) ** 2
    d2 = ((pred_xy - g[:, :2]) ** 2).sum(axis=1)
    e = d2 / (2.0 * gt.area * k2)
    return float(np.exp(-e[labeled]).sum() / labeled.sum())


def _oks_matrix(dts: Sequence[Prediction], gts: Sequence[Annotation], sigmas) -> np.ndarray:
    """D x G OKS, following the COCO convention for gts without labeled joints
    (distance to a box twice the gt box, averaged over all joints)."""
    k2 = (2.0 * np.asarray(sigmas, dtype=np.float64)) ** 2
    out = np.zeros((len(dts), len(gts)))
    for j, gt in enumerate(gts):
        g = gt.keypoints
        labeled = g[:, 2] > 0
        x0, y0, bw, bh = gt.bbox
        for i, dt in enumerate(dts):
            xy = dt.keypoints[:, :2]
            if labeled.any():
                d2 = ((xy - g[:, :2]) ** 2).sum(axis=1)
                e = d2 / (2.0 * max(gt.area, np.spacing(1)) * k2)
                out[i, j] = np.exp(-e[labeled]).sum() / labeled.sum()
            else:
                dx = np.maximum(0, x0 - bw - xy[:, 0]) + np.maximum(0, xy[:, 0] - (x0 + 2 * bw))
                dy = np.maximum(0, y0 - bh - xy[:, 1]) + np.maximum(0, xy[:, 1] - (y0 + 2 * bh))
                e = (dx**2 + dy**2) / (2.0 * max(gt.area, np.spacing(1)) * k2)
                out[i, j] = np.exp(-e).mean()
    return out


def _pred_area(p: Prediction) -> float:
    xy = p.keypoints[:, :2]
    span = xy.max(axis=0) - xy.min(axis=0)
    return float(span[0] * span[1])


@dataclass
class MetricReport:
    AP: float = float("nan")
    AP50: float = float("nan")
    AP75: float = float("nan")
    AP_M: float = float("nan")
    AP_L: float = float("nan")
    AR: float = float("nan")
    AR50: float = float("nan")
    AR75: float = float("nan")

    def to_dict(self) -> dict:
        return {k: (None if math.isnan(v) else v) for k, v in asdict(self).items()}


def _evaluate_range(preds_by_img, gts_by_img, image_ids, sigmas, thresholds, area_rng, max_dets):
    """Per-threshold (precision-at-recall-points, recall) arrays; NaN when no gt counts."""
    t_count = len(thresholds)
    scores, matched, ignored = [], [], []
    n_gt = 0
    for img in image_ids:
        gts = gts_by_img.get(img, [])
        dts = sorted(preds_by_img.get(img, []), key=lambda p: -p.score)[:max_dets]
        g_ign = np.array(
            [g.iscrowd or g.num_labeled == 0 or not (area_rng[0] <= g.area <= area_rng[1]) for g in gts], bool
        )
        order = np.argsort(g_ign, kind="stable")
        gts = [gts[i] for i in order]
        g_ign = g_ign[order]
        n_gt += int((~g_ign).sum())
        if not dts:
            continue
        if gts:
            match, d_ign = _kernels.greedy_match(_oks_matrix(dts, gts, sigmas), g_ign, thresholds)
        else:
            match = -np.ones((t_count, len(dts)), np.int64)
            d_ign = np.zeros((t_count, len(dts)), bool)
        out_of_range = np.array([not (area_rng[0] <= _pred_area(p) <= area_rng[1]) for p in dts])
        d_ign = d_ign | ((match < 0) & out_of_range[None, :])
        scores.append(np.array([p.score for p in dts]))
        matched.append(match >= 0)
        ignored.append(d_ign)
    precision = np.full((t_count, len(RECALL_POINTS)), np.nan)
    recall = np.full(t_count, np.nan)
    if n_gt == 0:
        return precision, recall
    if scores:
        s = np.concatenate(scores)
        order = np.argsort(-s, kind="mergesort")
        m = np.concatenate(matched, axis=1)[:, order]
        ign = np.concatenate(ignored, axis=1)[:, order]
    else:
        m = ign = np.zeros((t_count, 0), bool)
    for t in range(t_count):
        tp = np.cumsum(m[t] & ~ign[t])
        fp = np.cumsum(~m[t] & ~ign[t])
        rc = tp / n_gt
        pr = tp / np.maximum(tp + fp, np.spacing(1))
        recall[t] = rc[-1] if len(rc) else 0.0
        pr = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
        q = np.zeros(len(RECALL_POINTS))
        inds = np.searchsorted(rc, RECALL_POINTS, side="left")
        valid = inds < len(pr)
        q[valid] = pr[inds[valid]]
        precision[t] = q
    return precision, recall


def ap_ar(
    predictions: Iterable[Prediction],
    annotations: Iterable[Annotation],
    sigmas,
    thresholds=OKS_THRESHOLDS,
    image_ids: Iterable[int] | None = None,
    max_dets: int = MAX_DETS,
) -> MetricReport:
    """COCO keypoint AP/AR: greedy per-image matching in descending score, 101-point AP.

    Crowd gts are treated as ignore regions that absorb at most one match.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    preds_by_img: dict[int, list[Prediction]] = {}
    gts_by_img: dict[int, list[Annotation]] = {}
    for p in predictions:
        preds_by_img.setdefault(p.image_id, []).append(p)
    for a in annotations:
        gts_by_img.setdefault(a.image_id, []).append(a)
    ids = sorted(set(gts_by_img) | set(preds_by_img) if image_ids is None else set(image_ids))

    def at(t):
        hit = np.flatnonzero(np.isclose(thresholds, t))
        return int(hit[0]) if len(hit) else None

    def mean(x):
        x = np.asarray(x, dtype=np.float64)
        x = x[~np.isnan(x)]
        return float(x.mean()) if x.size else float("nan")

    report = MetricReport()
    prec, rec = _evaluate_range(preds_by_img, gts_by_img, ids, sigmas, thresholds, AREA_RANGES["all"], max_dets)
    ap_t = prec.mean(axis=1)
    report.AP, report.AR = mean(ap_t), mean(rec)
    i50, i75 = at(0.5), at(0.75)
    if i50 is not None:
        report.AP50, report.AR50 = float(ap_t[i50]), float(rec[i50])
    if i75 is not None:
        report.AP75, report.AR75 = float(ap_t[i75]), float(rec[i75])
    for name, attr in (("medium", "AP_M"), ("large", "AP_L")):
        p, _ = _evaluate_range(preds_by_img, gts_by_img, ids, sigmas, thresholds, AREA_RANGES[name], max_dets)
        setattr(report, attr, mean(p.mean(axis=1)))
    return report


# --------------------------------------------------------------------------
# PCK variants
# --------------------------------------------------------------------------


@dataclass
class PCKReport:
    per_joint: list[float]
    mean: float
    evaluated: int  # instances that contributed

    def to_dict(self) -> dict:
        return {"per_joint": self.per_joint, "mean": self.mean, "evaluated": self.evaluated}


def _pck(pred_xy, gt, norms, alpha) -> PCKReport:
    pred_xy = np.asarray(pred_xy, dtype=np.float64)[..., :2]
    gt = np.asarray(gt, dtype=np.float64)
    norms = np.asarray(norms, dtype=np.float64)
    keep = norms > 0
    labeled = (gt[..., 2] > 0) & keep[:, None]
    dist = np.linalg.norm(pred_xy - gt[..., :2], axis=-1)
    correct = (dist <= alpha * norms[:, None]) & labeled
    counts = labeled.sum(axis=0)
    per_joint = [float(c / n) if n else float("nan") for c, n in zip(correct.sum(axis=0), counts)]
    total = labeled.sum()
    return PCKReport(per_joint, float(correct.sum() / total) if total else float("nan"), int(keep.sum()))


def head_sizes(gt, schema: Schema | str = "mpii", head_boxes=None, box_scale: float = 0.6) -> np.ndarray:
    """Per-instance PCKh normaliser.

    With head boxes (N x 4, x y w h) it is ``box_scale`` times the box
    diagonal, the usual MPII convention; otherwise the length of the head
    segment between the schema's two head joints. Degenerate sizes are 0.
    """
    if head_boxes is not None:
        hb = np.asarray(head_boxes, dtype=np.float64).reshape(-1, 4)
        return box_scale * np.hypot(hb[:, 2], hb[:, 3])
    schema = load_schema(schema) if isinstance(schema, str) else schema
    if schema.head_joints is None:
        raise ValueError(f"schema {schema.name!r} defines no head segment")
    a, b = schema.head_joints
    gt = np.asarray(gt, dtype=np.float64)
    size = np.linalg.norm(gt[:, a, :2] - gt[:, b, :2], axis=-1)
    both = (gt[:, a, 2] > 0) & (gt[:, b, 2] > 0)
    return np.where(both, size, 0.0)


def pckh(pred_xy, gt, alpha: float = 0.5, schema: Schema | str = "mpii", head_boxes=None) -> PCKReport:
    """Fraction of labeled joints within ``alpha`` head sizes; zero-size heads are skipped."""
    return _pck(pred_xy, gt, head_sizes(gt, schema, head_boxes), alpha)


def pck_bbox(pred_xy, gt, bbox_sizes, alpha: float = 0.1) -> dict:
    """PCK normalised by a per-instance bbox size (the longer side)."""
    r = _pck(pred_xy, gt, bbox_sizes, alpha)
    return {"pck": r.mean, "per_joint": r.per_joint}


def format_report(report: MetricReport | PCKReport, names: Sequence[str] | None = None) -> str:
    """Aligned text table, values x 100."""
    if isinstance(report, MetricReport):
        items = list(asdict(report).items())
    else:
        labels = names or [f"joint{i}" for i in range(len(report.per_joint))]
        items = list(zip(labels, report.per_joint)) + [("mean", report.mean)]
    width = max(len(k) for k, _ in items)
    return "\n".join(
        f"{k:<{width}}  {'n/a' if v is None or math.isnan(v) else f'{100 * v:6.2f}'}" for k, v in items
    )
