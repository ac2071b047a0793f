"""Slow, independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np


def oks_direct(pred_xy, gt_kps, area, sigmas):
    num = den = 0.0
    for (px, py), (gx, gy, v), s in zip(pred_xy, gt_kps, sigmas):
        if v > 0:
            d2 = (px - gx) ** 2 + (py - gy) ** 2
            num += math.exp(-d2 / (2.0 * area * (2.0 * s) ** 2))
            den += 1.0
    return num / den


def _best_assignment(oks, gt_ign, t):
    """Enumerate every injective dt -> gt assignment with OKS >= t and keep the
    one whose per-detection keys, in score order, are lexicographically largest.
    A key prefers a non-ignored gt, then any gt, then the higher OKS."""
    d_count, g_count = oks.shape
    best_key, best = None, None
    choices = [None] + list(range(g_count))
    for assign in itertools.product(choices, repeat=d_count):
        used = [g for g in assign if g is not None]
        if len(used) != len(set(used)):
            continue
        if any(g is not None and oks[d, g] < t for d, g in enumerate(assign)):
            continue
        key = tuple((0, 0.0) if g is None else (1 if gt_ign[g] else 2, oks[d, g]) for d, g in enumerate(assign))
        if best_key is None or key > best_key:
            best_key, best = key, assign
    return best


def brute_ap_ar(preds, gts, sigmas, thresholds, area_rng=(0.0, 1e10), max_dets=20):
    """preds: (image_id, kps Kx3, score); gts: (image_id, kps Kx3, area).

    Returns (AP per threshold, recall per threshold); NaN without countable gts.
    """
    images = sorted({p[0] for p in preds} | {g[0] for g in gts})
    ap, ar = [], []
    for t in thresholds:
        pooled, n_gt = [], 0
        for img in images:
            dts = sorted([p for p in preds if p[0] == img], key=lambda p: -p[2])[:max_dets]
            gi = [g for g in gts if g[0] == img]
            ign = [not (area_rng[0] <= g[2] <= area_rng[1]) for g in gi]
            n_gt += sum(not x for x in ign)
            oks = np.array([[oks_direct(d[1][:, :2], g[1], g[2], sigmas) for g in gi] for d in dts]).reshape(len(dts), len(gi))
            assign = _best_assignment(oks, ign, t) if dts else ()
            for d, g in zip(dts, assign):
                span = d[1][:, :2].max(axis=0) - d[1][:, :2].min(axis=0)
                d_area = span[0] * span[1]
                if g is not None:
                    pooled.append((d[2], True, ign[g]))
                else:
                    pooled.append((d[2], False, not (area_rng[0] <= d_area <= area_rng[1])))
        if n_gt == 0:
            ap.append(float("nan"))
            ar.append(float("nan"))
            continue
        pooled.sort(key=lambda x: -x[0])
        tp = fp = 0
        prec, rec = [], []
        for _, hit, ignored in pooled:
            if ignored:
                continue
            tp += hit
            fp += not hit
            prec.append(tp / (tp + fp))
            rec.append(tp / n_gt)
        pts = []
        for r in np.linspace(0.0, 1.0, 101):
            ok = [p for p, q in zip(prec, rec) if q >= r]
            pts.append(max(ok) if ok else 0.0)
        ap.append(float(np.mean(pts)))
        ar.append(rec[-1] if rec else 0.0)
    return np.array(ap), np.array(ar)
