"""Corner pairing and re-scoring strategies, plus soft-NMS.

The flagship strategy pairs same-category corner candidates, decodes each
corner's implied center, and keeps a pair only when both centers land inside
the pair box's central region; surviving pairs are down-weighted by how far
the two centers disagree.  The three baseline strategies (linear center
regression, associative embeddings, center-keypoint validation) share the
same pairing, scoring, and NMS code so comparisons isolate the matching rule
itself.  Matchers never invent geometry: every output box is one of the
enumerated pair boxes, only scores change.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .decoder import CornerCandidate, decode_center
from .geometry import BBox, MuPolicy, Point, central_region, iou_matrix, select_mu

STRATEGIES = (
    "centripetal",
    "center_regression",
    "associative_1d",
    "associative_2d",
    "center_validation",
)


@dataclass(frozen=True)
class MatchConfig:
    strategy: str = "centripetal"
    mu_policy: MuPolicy = MuPolicy()
    soft_nms_sigma: float = 0.5
    final_keep: int = 100
    ae_threshold: float = 0.5
    euclidean_weight: bool = False  # study variant; the product form is the default

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.final_keep <= 0:
            raise ValueError(f"final_keep must be > 0, got {self.final_keep}")
        if self.soft_nms_sigma <= 0:
            raise ValueError(f"soft_nms_sigma must be > 0, got {self.soft_nms_sigma}")
        if self.ae_threshold < 0:
            raise ValueError(f"ae_threshold must be >= 0, got {self.ae_threshold}")


@dataclass(frozen=True)
class CandidatePair:
    tl: CornerCandidate
    br: CornerCandidate
    score: float  # geometric mean of the two corner scores
    box: BBox


@dataclass(frozen=True)
class ScoredBox:
    """Detection-shaped result carrying the match weight and both decoded
    centers; score is the final (weighted, NMS-decayed) value."""

    box: BBox
    category: int
    score: float
    weight: float
    tl_center: Point | None = None
    br_center: Point | None = None


@dataclass(frozen=True)
class CenterPoint:
    """A detected center keypoint, input to the center-validation baseline."""

    category: int
    pos: Point


# ---------------------------------------------------------------------------
# pairing


def _candidate_arrays(cands: list[CornerCandidate]):
    n = len(cands)
    pos = np.empty((n, 2), dtype=np.float64)
    score = np.empty(n, dtype=np.float64)
    cat = np.empty(n, dtype=np.int64)
    shift = np.empty((n, 2), dtype=np.float64)
    for idx, c in enumerate(cands):
        pos[idx] = (c.pos.x, c.pos.y)
        score[idx] = c.score
        cat[idx] = c.category
        shift[idx] = c.shift
    return pos, score, cat, shift


def _pair_indices(
    tl_cat: np.ndarray, br_cat: np.ndarray, tl_pos: np.ndarray, br_pos: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (ti, bi), same category, tl strictly up-left of br.

    Enumeration order is (category ascending, tl list position, br list
    position); downstream stable sorts make this the documented tie order.
    """
    tis: list[np.ndarray] = []
    bis: list[np.ndarray] = []
    for c in np.unique(np.concatenate([tl_cat, br_cat])):
        ti = np.nonzero(tl_cat == c)[0]
        bi = np.nonzero(br_cat == c)[0]
        if ti.size == 0 or bi.size == 0:
            continue
        tg, bg = np.meshgrid(ti, bi, indexing="ij")
        ok = (tl_pos[tg, 0] < br_pos[bg, 0]) & (tl_pos[tg, 1] < br_pos[bg, 1])
        tis.append(tg[ok])
        bis.append(bg[ok])
    if not tis:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(tis), np.concatenate(bis)


def pair_candidates(
    tls: list[CornerCandidate], brs: list[CornerCandidate]
) -> list[CandidatePair]:
    """All same-category (tl, br) pairs with valid corner order; pair score is
    the geometric mean of the corner scores."""
    if not tls or not brs:
        return []
    tl_pos, tl_score, tl_cat, _ = _candidate_arrays(tls)
    br_pos, br_score, br_cat, _ = _candidate_arrays(brs)
    ti, bi = _pair_indices(tl_cat, br_cat, tl_pos, br_pos)
    scores = np.sqrt(tl_score[ti] * br_score[bi])
    out = []
    for t, b, s in zip(ti, bi, scores):
        tl, br = tls[int(t)], brs[int(b)]
        out.append(
            CandidatePair(tl, br, float(s), BBox(tl.pos.x, tl.pos.y, br.pos.x, br.pos.y))
        )
    return out


# ---------------------------------------------------------------------------
# centripetal weighting


def _region_weight_vec(
    boxes: np.ndarray,
    tl_ct: np.ndarray,
    br_ct: np.ndarray,
    policy: MuPolicy,
    euclidean: bool,
) -> np.ndarray:
    """Weights for (P, 4) pair boxes given both decoded centers (P, 2).

    Zero when either center leaves the box's central region (closed test);
    otherwise exp(-(|dx|*|dy|) / region area), which is 1.0 exactly for
    coinciding centers and scale-invariant (the exponent is a ratio of areas).
    """
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    mu = np.where(w * h > policy.area_threshold, policy.large_mu, policy.small_mu)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    hw = w / 2.0 * mu
    hh = h / 2.0 * mu
    inside = (
        (np.abs(tl_ct[:, 0] - cx) <= hw)
        & (np.abs(tl_ct[:, 1] - cy) <= hh)
        & (np.abs(br_ct[:, 0] - cx) <= hw)
        & (np.abs(br_ct[:, 1] - cy) <= hh)
    )
    dx = np.abs(br_ct[:, 0] - tl_ct[:, 0])
    dy = np.abs(br_ct[:, 1] - tl_ct[:, 1])
    region_area = (2.0 * hw) * (2.0 * hh)
    expo = (dx * dx + dy * dy) / region_area if euclidean else dx * dy / region_area
    return np.where(inside, np.exp(-expo), 0.0)


def centripetal_weight(
    pair: CandidatePair,
    mu_policy: MuPolicy,
    stride: int = 4,
    euclidean: bool = False,
) -> float:
    """Agreement weight for one pair under the log-space shift encoding."""
    tl_ct = decode_center(pair.tl, stride, mode="log")
    br_ct = decode_center(pair.br, stride, mode="log")
    region = central_region(pair.box, select_mu(pair.box, mu_policy))
    if not (region.contains(tl_ct) and region.contains(br_ct)):
        return 0.0
    dx = abs(br_ct.x - tl_ct.x)
    dy = abs(br_ct.y - tl_ct.y)
    if euclidean:
        expo = (dx * dx + dy * dy) / region.area
    else:
        expo = dx * dy / region.area
    return float(np.exp(-expo))


# ---------------------------------------------------------------------------
# soft-NMS


def soft_nms(dets: list, sigma: float = 0.5) -> list:
    """Gaussian soft-NMS, class-wise: iteratively select the highest-scored
    remaining detection and decay every remaining same-category score by
    exp(-iou^2 / sigma).  Nothing is deleted here; callers apply their own
    score floor and top-k.  Returns re-scored copies in selection order,
    which is descending final score with insertion-order tie breaks.
    """
    n = len(dets)
    if n == 0:
        return []
    boxes = np.asarray([d.box.as_tuple() for d in dets], dtype=np.float64)
    cats = np.asarray([d.category for d in dets], dtype=np.int64)
    scores = np.asarray([d.score for d in dets], dtype=np.float64)
    ious = iou_matrix(boxes, boxes)
    same_cat = cats[:, None] == cats[None, :]
    decay_all = np.exp(-(ious * ious) / sigma)
    remaining = np.ones(n, dtype=bool)
    order: list[int] = []
    for _ in range(n):
        live = np.nonzero(remaining)[0]
        best = live[np.argmax(scores[live])]  # argmax keeps first on ties
        order.append(int(best))
        remaining[best] = False
        decay = np.where(same_cat[best], decay_all[best], 1.0)
        scores[remaining] *= decay[remaining]
    return [replace(dets[i], score=float(scores[i])) for i in order]


# ---------------------------------------------------------------------------
# strategies


def _finalize(dets: list[ScoredBox], cfg: MatchConfig) -> list[ScoredBox]:
    survivors = soft_nms(dets, cfg.soft_nms_sigma)
    return [d for d in survivors if d.score > 0.0][: cfg.final_keep]


def _match_shift_strategy(
    tls: list[CornerCandidate],
    brs: list[CornerCandidate],
    cfg: MatchConfig,
    stride: int,
    mode: str,
) -> list[ScoredBox]:
    if not tls or not brs:
        return []
    tl_pos, tl_score, tl_cat, tl_shift = _candidate_arrays(tls)
    br_pos, br_score, br_cat, br_shift = _candidate_arrays(brs)
    ti, bi = _pair_indices(tl_cat, br_cat, tl_pos, br_pos)
    if ti.size == 0:
        return []
    if mode == "log":
        tl_ct = tl_pos[ti] + stride * np.exp(tl_shift[ti])
        br_ct = br_pos[bi] - stride * np.exp(br_shift[bi])
    else:
        tl_ct = tl_pos[ti] + stride * tl_shift[ti]
        br_ct = br_pos[bi] + stride * br_shift[bi]
    boxes = np.concatenate([tl_pos[ti], br_pos[bi]], axis=1)
    weights = _region_weight_vec(boxes, tl_ct, br_ct, cfg.mu_policy, cfg.euclidean_weight)
    scores = np.sqrt(tl_score[ti] * br_score[bi]) * weights
    # Zero-weight pairs can never outrank a positive score and are dropped by
    # the final score>0 filter anyway; pruning them before soft-NMS leaves
    # every surviving score unchanged.
    keep = np.nonzero(scores > 0.0)[0]
    dets = [
        ScoredBox(
            box=BBox(*boxes[p]),
            category=int(tl_cat[ti[p]]),
            score=float(scores[p]),
            weight=float(weights[p]),
            tl_center=Point(*tl_ct[p]),
            br_center=Point(*br_ct[p]),
        )
        for p in keep
    ]
    return _finalize(dets, cfg)


def match_centripetal(
    tls: list[CornerCandidate],
    brs: list[CornerCandidate],
    cfg: MatchConfig,
    stride: int = 4,
) -> list[ScoredBox]:
    """Pair, weight by center agreement (log-space shifts), multiply scores,
    soft-NMS, then keep at most final_keep detections with score > 0."""
    if cfg.strategy != "centripetal":
        raise ValueError(f"config strategy is {cfg.strategy!r}, not 'centripetal'")
    return _match_shift_strategy(tls, brs, cfg, stride, "log")


def match_center_regression(
    tls: list[CornerCandidate],
    brs: list[CornerCandidate],
    cfg: MatchConfig,
    stride: int = 4,
) -> list[ScoredBox]:
    """Same pipeline with linear shift decoding: center = corner + s*shift.
    Candidates must carry linear (signed, non-log) shifts."""
    if cfg.strategy != "center_regression":
        raise ValueError(f"config strategy is {cfg.strategy!r}, not 'center_regression'")
    return _match_shift_strategy(tls, brs, cfg, stride, "linear")


def match_associative(
    tls: list[CornerCandidate],
    brs: list[CornerCandidate],
    cfg: MatchConfig,
) -> list[ScoredBox]:
    """Embedding-distance pairing: accept a pair when the L1 distance between
    corner embeddings is at most ae_threshold.  The score stays the plain
    geometric mean (no distance penalty) so all strategies rank comparably.
    """
    if cfg.strategy not in ("associative_1d", "associative_2d"):
        raise ValueError(f"config strategy is {cfg.strategy!r}, not associative")
    if not tls or not brs:
        return []
    dim = 1 if cfg.strategy == "associative_1d" else 2
    for c in tls + brs:
        if c.embedding is None or len(c.embedding) < dim:
            raise ValueError(f"strategy {cfg.strategy} needs embeddings of dim >= {dim}")
    tl_pos, tl_score, tl_cat, _ = _candidate_arrays(tls)
    br_pos, br_score, br_cat, _ = _candidate_arrays(brs)
    tl_emb = np.asarray([c.embedding[:dim] for c in tls], dtype=np.float64)
    br_emb = np.asarray([c.embedding[:dim] for c in brs], dtype=np.float64)
    ti, bi = _pair_indices(tl_cat, br_cat, tl_pos, br_pos)
    if ti.size == 0:
        return []
    dist = np.abs(tl_emb[ti] - br_emb[bi]).sum(axis=1)
    keep = np.nonzero(dist <= cfg.ae_threshold)[0]
    dets = [
        ScoredBox(
            box=BBox(*np.concatenate([tl_pos[ti[p]], br_pos[bi[p]]])),
            category=int(tl_cat[ti[p]]),
            score=float(np.sqrt(tl_score[ti[p]] * br_score[bi[p]])),
            weight=1.0,
        )
        for p in keep
    ]
    return _finalize(dets, cfg)


def match_center_validation(
    tls: list[CornerCandidate],
    brs: list[CornerCandidate],
    centers: list[CenterPoint],
    cfg: MatchConfig,
) -> list[ScoredBox]:
    """Keep a pair only when some same-category detected center keypoint lies
    inside the pair box's central region.  Recall rides on the center
    detector: a missed center silently drops a correct pair."""
    if cfg.strategy != "center_validation":
        raise ValueError(f"config strategy is {cfg.strategy!r}, not 'center_validation'")
    if not tls or not brs:
        return []
    tl_pos, tl_score, tl_cat, _ = _candidate_arrays(tls)
    br_pos, br_score, br_cat, _ = _candidate_arrays(brs)
    ti, bi = _pair_indices(tl_cat, br_cat, tl_pos, br_pos)
    if ti.size == 0:
        return []
    boxes = np.concatenate([tl_pos[ti], br_pos[bi]], axis=1)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    mu = np.where(w * h > cfg.mu_policy.area_threshold, cfg.mu_policy.large_mu, cfg.mu_policy.small_mu)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    hw = w / 2.0 * mu
    hh = h / 2.0 * mu
    validated = np.zeros(ti.size, dtype=bool)
    pair_cat = tl_cat[ti]
    for cp in centers:
        hit = (
            (pair_cat == cp.category)
            & (np.abs(cp.pos.x - cx) <= hw)
            & (np.abs(cp.pos.y - cy) <= hh)
        )
        validated |= hit
    keep = np.nonzero(validated)[0]
    dets = [
        ScoredBox(
            box=BBox(*boxes[p]),
            category=int(pair_cat[p]),
            score=float(np.sqrt(tl_score[ti[p]] * br_score[bi[p]])),
            weight=1.0,
        )
        for p in keep
    ]
    return _finalize(dets, cfg)


def match(
    tls: list[CornerCandidate],
    brs: list[CornerCandidate],
    cfg: MatchConfig,
    stride: int = 4,
    centers: list[CenterPoint] | None = None,
) -> list[ScoredBox]:
    """Dispatch to the strategy named in cfg.strategy."""
    if cfg.strategy == "centripetal":
        return match_centripetal(tls, brs, cfg, stride)
    if cfg.strategy == "center_regression":
        return match_center_regression(tls, brs, cfg, stride)
    if cfg.strategy in ("associative_1d", "associative_2d"):
        return match_associative(tls, brs, cfg)
    if centers is None:
        raise ValueError("center_validation needs a list of center keypoints")
    return match_center_validation(tls, brs, centers, cfg)
