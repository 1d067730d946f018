"""Detection AP/AR evaluation over the standard benchmark protocol.

Protocol, pinned here so the independent slow reference in the test suite
can implement the same contract:

  - AP is 101-point interpolated precision, averaged over the 10 IoU
    thresholds 0.50:0.05:0.95 and over categories present in ground truth.
  - Detections sort by score descending; ties break by insertion order
    (image order, then within-image order).
  - Matching is greedy and one-to-one per image and category: each detection
    takes the highest-IoU not-yet-matched ground truth with IoU >= threshold.
  - Size buckets (area < 32^2, 32^2..96^2, > 96^2) select ground truth by
    box area.  Out-of-bucket ground truth is ignorable: a detection whose
    only match is an ignored ground truth is dropped from scoring, and an
    unmatched detection whose own area falls outside the bucket is dropped
    rather than counted as a false positive.
  - AR_k caps detections at the top k per image per category; recall then
    averages over thresholds and categories.
  - A (category, threshold, bucket) cell with zero selected ground truth is
    undefined and excluded from means; a metric with no defined cells at all
    reports 0.0.
  - At most 100 detections per image per category are scored everywhere.

Scores only ever enter through their ordering, so every metric is invariant
under strictly monotone score transformations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .geometry import iou_matrix

IOU_THRESHOLDS = tuple(0.5 + 0.05 * t for t in range(10))
SMALL_MAX = 32.0**2
MEDIUM_MAX = 96.0**2
AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, SMALL_MAX),
    "medium": (SMALL_MAX, MEDIUM_MAX),
    "large": (MEDIUM_MAX, math.inf),
}
MAX_DETS = 100

_TP, _FP, _IGNORED = 1, 0, -1


@dataclass(frozen=True)
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    ar_1: float
    ar_10: float
    ar_100: float
    ar_s: float
    ar_m: float
    ar_l: float

    def to_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def greedy_match(dets: list, gts: list, iou_thr: float) -> list[int]:
    """Per-detection matched ground-truth index, or -1.

    dets must already be sorted by descending score.  Each detection matches
    the highest-IoU unmatched same-category ground truth with IoU >= iou_thr;
    the assignment is one-to-one.
    """
    taken = [False] * len(gts)
    out = []
    for d in dets:
        best, best_v = -1, 0.0
        for gi, g in enumerate(gts):
            if taken[gi] or g.category != d.category:
                continue
            iw = min(d.box.brx, g.box.brx) - max(d.box.tlx, g.box.tlx)
            ih = min(d.box.bry, g.box.bry) - max(d.box.tly, g.box.tly)
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            v = inter / (d.box.area + g.box.area - inter)
            if v >= iou_thr and v > best_v:
                best, best_v = gi, v
        if best >= 0:
            taken[best] = True
        out.append(best)
    return out


def average_precision(matched_flags, n_gt: int) -> float | None:
    """101-point interpolated AP from per-detection hit flags in score order.

    Returns None when n_gt is 0 (the metric is undefined and must be
    excluded from means); 0.0 when there are no detections but n_gt > 0.
    """
    if n_gt == 0:
        return None
    flags = np.asarray(matched_flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # envelope: best precision at any recall >= r
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    samples = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, samples, side="left")
    vals = np.where(idx < recall.size, precision[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


class _PerImageCategory:
    """Pre-sorted detections, ground truth, and their IoU matrix for one
    (image, category) cell; computed once, reused across thresholds/buckets."""

    __slots__ = ("scores", "det_areas", "gt_areas", "ious", "n_dets", "n_gts")

    def __init__(self, dets: list, gts: list) -> None:
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        dets = [dets[i] for i in order]
        self.scores = np.asarray([d.score for d in dets], dtype=np.float64)
        self.det_areas = np.asarray([d.box.area for d in dets], dtype=np.float64)
        self.gt_areas = np.asarray([g.box.area for g in gts], dtype=np.float64)
        self.n_dets = len(dets)
        self.n_gts = len(gts)
        if dets and gts:
            self.ious = iou_matrix(
                np.asarray([d.box.as_tuple() for d in dets]),
                np.asarray([g.box.as_tuple() for g in gts]),
            )
        else:
            self.ious = np.zeros((self.n_dets, self.n_gts), dtype=np.float64)

    def match(self, thr: float, lo: float, hi: float, maxdets: int):
        """(flags, n_counted_gt) under the documented ignore rules."""
        counted = (self.gt_areas >= lo) & (self.gt_areas < hi)
        n_counted = int(counted.sum())
        n = min(self.n_dets, maxdets)
        flags = np.empty(n, dtype=np.int8)
        taken = np.zeros(self.n_gts, dtype=bool)
        for di in range(n):
            row = self.ious[di]
            best, best_v = -1, 0.0
            for gi in range(self.n_gts):
                if taken[gi] or not counted[gi]:
                    continue
                v = row[gi]
                if v >= thr and v > best_v:
                    best, best_v = gi, v
            if best >= 0:
                taken[best] = True
                flags[di] = _TP
                continue
            # fall back to an ignored ground truth; the detection then
            # neither scores nor penalizes
            for gi in range(self.n_gts):
                if taken[gi] or counted[gi]:
                    continue
                v = row[gi]
                if v >= thr and v > best_v:
                    best, best_v = gi, v
            if best >= 0:
                taken[best] = True
                flags[di] = _IGNORED
            elif not (lo <= self.det_areas[di] < hi):
                flags[di] = _IGNORED
            else:
                flags[di] = _FP
        return flags, n_counted


def _mean_defined(values: list[float | None]) -> float:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else 0.0


def evaluate(dets_per_image: list[list], gts_per_image: list[list]) -> EvalResult:
    """Full metric bundle for a dataset.

    dets_per_image[i] holds score-carrying detections (.box/.category/.score)
    for image i; gts_per_image[i] holds ground-truth objects
    (.box/.category).  Lists must align by image.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError(
            f"{len(dets_per_image)} detection lists vs {len(gts_per_image)} ground-truth lists"
        )
    cats = sorted({g.category for img in gts_per_image for g in img})
    cells: dict[tuple[int, int], _PerImageCategory] = {}
    for ii, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        by_cat_d: dict[int, list] = {}
        by_cat_g: dict[int, list] = {}
        for d in dets:
            by_cat_d.setdefault(d.category, []).append(d)
        for g in gts:
            by_cat_g.setdefault(g.category, []).append(g)
        for c in cats:
            d = by_cat_d.get(c, [])
            g = by_cat_g.get(c, [])
            if d or g:
                cells[(ii, c)] = _PerImageCategory(d, g)

    n_images = len(gts_per_image)

    def accumulate(cat: int, thr: float, lo: float, hi: float, maxdets: int):
        """Pooled (scores, hit flags) in global score order plus GT count."""
        scores: list[np.ndarray] = []
        hits: list[np.ndarray] = []
        n_gt = 0
        for ii in range(n_images):
            cell = cells.get((ii, cat))
            if cell is None:
                continue
            flags, n_counted = cell.match(thr, lo, hi, maxdets)
            n_gt += n_counted
            keep = flags != _IGNORED
            scores.append(cell.scores[: flags.size][keep])
            hits.append(flags[keep] == _TP)
        if scores:
            s = np.concatenate(scores)
            h = np.concatenate(hits)
            order = np.argsort(-s, kind="stable")
            s, h = s[order], h[order]
        else:
            s = np.empty(0)
            h = np.empty(0, dtype=bool)
        return h, n_gt

    def ap_over(thrs, lo, hi) -> float:
        vals: list[float | None] = []
        for cat in cats:
            for thr in thrs:
                hits, n_gt = accumulate(cat, thr, lo, hi, MAX_DETS)
                vals.append(average_precision(hits, n_gt))
        return _mean_defined(vals)

    def ar_over(maxdets, lo, hi) -> float:
        vals: list[float | None] = []
        for cat in cats:
            for thr in IOU_THRESHOLDS:
                hits, n_gt = accumulate(cat, thr, lo, hi, maxdets)
                vals.append(None if n_gt == 0 else float(hits.sum()) / n_gt)
        return _mean_defined(vals)

    rng_all = AREA_RANGES["all"]
    return EvalResult(
        ap=ap_over(IOU_THRESHOLDS, *rng_all),
        ap50=ap_over((IOU_THRESHOLDS[0],), *rng_all),
        ap75=ap_over((IOU_THRESHOLDS[5],), *rng_all),
        ap_s=ap_over(IOU_THRESHOLDS, *AREA_RANGES["small"]),
        ap_m=ap_over(IOU_THRESHOLDS, *AREA_RANGES["medium"]),
        ap_l=ap_over(IOU_THRESHOLDS, *AREA_RANGES["large"]),
        ar_1=ar_over(1, *rng_all),
        ar_10=ar_over(10, *rng_all),
        ar_100=ar_over(100, *rng_all),
        ar_s=ar_over(100, *AREA_RANGES["small"]),
        ar_m=ar_over(100, *AREA_RANGES["medium"]),
        ar_l=ar_over(100, *AREA_RANGES["large"]),
    )
