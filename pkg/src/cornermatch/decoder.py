"""Corner decoding: predicted maps to scored corner candidates.

The pipeline per corner kind is softmax -> 3x3 keypoint NMS -> global top-k
across categories.  Candidate positions are refined with the local-offset
map; the shift vector (and optional embedding) is read at the un-refined
cell, since offsets refine position, not the lookup cell.

Scores on an idealized map with an exactly flat background survive NMS as a
plateau of ties, so asking for k far beyond the number of real peaks returns
deterministic tie candidates after them; size k to the scene when exact
candidate sets matter.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Point
from .kernels import nms_maxpool3, softmax_scores


@dataclass(frozen=True)
class CornerMaps:
    """Per-corner-kind prediction bundle: (C,H,W) heat, (2,H,W) offset and
    shift maps, optional (E,H,W) embedding map."""

    heat: np.ndarray
    offset: np.ndarray
    shift: np.ndarray
    embedding: np.ndarray | None = None

    def __post_init__(self) -> None:
        hs, ws = self.heat.shape[1:]
        for name, m in (("offset", self.offset), ("shift", self.shift)):
            if m.shape != (2, hs, ws):
                raise ValueError(f"{name} shape {m.shape} does not match heat {self.heat.shape}")
        if self.embedding is not None and self.embedding.shape[1:] != (hs, ws):
            raise ValueError(
                f"embedding shape {self.embedding.shape} does not match heat {self.heat.shape}"
            )


@dataclass(frozen=True)
class CornerCandidate:
    kind: str  # "tl" | "br"
    cell: tuple[int, int]  # (i, j)
    pos: Point  # refined, image pixels
    score: float
    category: int
    shift: tuple[float, float]  # (x, y), units depend on the encoding
    embedding: tuple[float, ...] | None = None


def _top_k_flat(flat: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties at the cutoff resolved by flat
    (category, i, j) order, result sorted by (-score, flat index)."""
    n = flat.size
    if k >= n:
        return np.lexsort((np.arange(n), -flat))
    # Introselect goes quadratic on these maps: a flat softmax background
    # kept whole by tie-preserving NMS means the array is almost entirely
    # one repeated value.  Probe a strided sample for a pivot with roughly
    # 3k elements above it and resolve the cutoff with comparison scans;
    # a misleading sample falls back to the full partition.
    m = (n + 19) // 20
    sample = flat[:: n // m if n >= m else 1]
    want = min(sample.size - 1, max(1, 3 * k * sample.size // n))
    pivot = np.partition(sample, sample.size - 1 - want)[sample.size - 1 - want]
    above = np.flatnonzero(flat > pivot)
    if above.size >= k:
        sub = flat[above]
        thr = np.partition(sub, sub.size - k)[sub.size - k]
        keep = above[sub > thr]
        ties = above[sub == thr][: k - keep.size]
        sel = np.concatenate([keep, ties])
    else:
        ties = np.flatnonzero(flat == pivot)[: k - above.size]
        if above.size + ties.size == k:
            sel = np.concatenate([above, ties])
        else:
            thr = np.partition(flat, n - k)[n - k]
            above = np.flatnonzero(flat > thr)
            ties = np.flatnonzero(flat == thr)[: k - above.size]
            sel = np.concatenate([above, ties])
    return sel[np.lexsort((sel, -flat[sel]))]


def _decode_one(maps: CornerMaps, kind: str, k: int, stride: int, axis: str) -> list[CornerCandidate]:
    scores = nms_maxpool3(softmax_scores(maps.heat, axis))
    n_cat, hs, ws = scores.shape
    flat = scores.reshape(-1)
    if k > flat.size:
        warnings.warn(
            f"top-k {k} exceeds {flat.size} cells; returning every cell", stacklevel=3
        )
    chosen = _top_k_flat(flat, min(k, flat.size))
    cells = hs * ws
    out: list[CornerCandidate] = []
    for fi in chosen:
        cat, rem = divmod(int(fi), cells)
        i, j = divmod(rem, ws)
        pos = Point(
            (j + float(maps.offset[0, i, j])) * stride,
            (i + float(maps.offset[1, i, j])) * stride,
        )
        emb = None
        if maps.embedding is not None:
            emb = tuple(float(v) for v in maps.embedding[:, i, j])
        out.append(
            CornerCandidate(
                kind=kind,
                cell=(i, j),
                pos=pos,
                score=float(flat[fi]),
                category=cat,
                shift=(float(maps.shift[0, i, j]), float(maps.shift[1, i, j])),
                embedding=emb,
            )
        )
    return out


def decode_corners(
    tl_maps: CornerMaps,
    br_maps: CornerMaps,
    k: int = 100,
    stride: int = 4,
    axis: str = "channel",
) -> tuple[list[CornerCandidate], list[CornerCandidate]]:
    """Decode both corner kinds; returns (tl candidates, br candidates), each
    sorted by descending score with deterministic (category, i, j) tie order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return (
        _decode_one(tl_maps, "tl", k, stride, axis),
        _decode_one(br_maps, "br", k, stride, axis),
    )


def decode_center(c: CornerCandidate, stride: int = 4, mode: str = "log") -> Point:
    """Center implied by one corner candidate.

    mode="log": the shift holds log displacements; tl moves right/down by
    s*exp(shift), br moves left/up.  mode="linear": the shift is a signed
    displacement in cells, center = pos + s*shift for either kind.
    """
    sx, sy = c.shift
    if mode == "log":
        dx = stride * np.exp(sx)
        dy = stride * np.exp(sy)
        if c.kind == "tl":
            return Point(c.pos.x + dx, c.pos.y + dy)
        return Point(c.pos.x - dx, c.pos.y - dy)
    if mode == "linear":
        return Point(c.pos.x + stride * sx, c.pos.y + stride * sy)
    raise ValueError(f"mode must be 'log' or 'linear', got {mode!r}")
