"""Synthetic crowd benchmark: procedural scenes plus noisy prediction maps.

The generator builds ground truth with controllable crowding (rows of
near-identical same-category boxes), and the renderer synthesizes the maps a
detection head would emit for that scene: score peaks at (jittered) corner
cells, self-consistent local offsets, corner-to-center shift fields in both
log and linear encodings, per-object embeddings, and center keypoints.  No
network is involved, so strategy comparisons isolate the matching rule
itself.

RNG discipline: every draw comes from a stream seeded (master_seed,
scene_index, stream_id), one stream per concern (scene geometry, map noise,
embedding collisions, center dropout).  Toggling one noise source therefore
never perturbs the draws of another, and scene i is independent of how many
scenes precede it.

Shift noise is applied once in log space and shared by both encodings:
log map = true_log + eps, linear map = exp(log map).  Both decode to the
bitwise-identical center, so log/linear comparisons isolate the encoding's
interaction with everything else, not sampling luck.  Shift maps are f64 to
keep that exactness; score/offset/embedding maps are f32 like real heads.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .decoder import CornerMaps, decode_corners
from .encoder import Scene, SceneObject
from .evaluator import evaluate
from .geometry import BBox, box_center, iou
from .matcher import STRATEGIES, CenterPoint, MatchConfig, match

STREAM_SCENE, STREAM_MAPS, STREAM_EMBED, STREAM_CENTERS = 0, 1, 2, 3

PEAK_SCORE = 0.9  # below 1.0 so score noise can move both ways
SCORE_FLOOR, SCORE_CEIL = 0.05, 1.0
MIN_DISP_CELLS = 0.05  # corner jitter may not push a corner past its center

# side-length ranges (px) per area bucket; chosen so any w x h combination
# within a bucket stays inside that bucket's area range
SIZE_RANGES = {
    "small": (12.0, 28.0),
    "medium": (36.0, 90.0),
    "large": (100.0, 150.0),
}
_BUCKETS = ("small", "medium", "large")

# no two boxes may share a top-left (or bottom-right) cell on this lattice,
# so radius-0 target encodings never overwrite each other at stride <= 4
CORNER_LATTICE = 4
EDGE_MARGIN = 2.0
MAX_PLACE_TRIES = 80


class PackingError(RuntimeError):
    """Scene constraints could not be satisfied within bounded retries."""


@dataclass(frozen=True)
class SceneSpec:
    """Procedural scene recipe; a (spec, scene index) pair fixes the scene."""

    width: int = 256
    height: int = 256
    num_categories: int = 5
    n_singles: tuple[int, int] = (3, 6)
    n_clusters: tuple[int, int] = (0, 0)
    cluster_size: tuple[int, int] = (2, 4)
    # adjacent cluster members' centers sit spacing_factor * member_width
    # apart; values below ~0.92 would let cross-corner boxes pass the
    # central-region test even on perfect maps, so the floor stays above it
    cluster_spacing_factor: float = 1.25
    size_mix: tuple[float, float, float] = (0.2, 0.6, 0.2)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 32 or self.height < 32:
            raise ValueError(f"image {self.width}x{self.height} too small to place objects")
        if self.num_categories < 2:
            raise ValueError("need num_categories >= 2 (channel softmax degenerates at 1)")
        for name, rng in (("n_singles", self.n_singles), ("n_clusters", self.n_clusters)):
            lo, hi = rng
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range {rng} invalid")
        lo, hi = self.cluster_size
        if lo < 2 or hi < lo:
            raise ValueError(f"cluster_size range {self.cluster_size} invalid (members >= 2)")
        if not 0.92 <= self.cluster_spacing_factor <= 4.0:
            raise ValueError(
                f"cluster_spacing_factor {self.cluster_spacing_factor} outside [0.92, 4.0]"
            )
        if len(self.size_mix) != 3 or min(self.size_mix) < 0 or sum(self.size_mix) <= 0:
            raise ValueError(f"size_mix {self.size_mix} must be 3 non-negative weights")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "num_categories": self.num_categories,
            "n_singles": list(self.n_singles),
            "n_clusters": list(self.n_clusters),
            "cluster_size": list(self.cluster_size),
            "cluster_spacing_factor": self.cluster_spacing_factor,
            "size_mix": list(self.size_mix),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        known = {f: doc[f] for f in cls.__dataclass_fields__ if f in doc}
        unknown = set(doc) - set(known)
        if unknown:
            raise ValueError(f"unknown scene spec fields: {sorted(unknown)}")
        for f in ("n_singles", "n_clusters", "cluster_size", "size_mix"):
            if f in known:
                known[f] = tuple(known[f])
        return cls(**known)


@dataclass(frozen=True)
class NoiseModel:
    """Head-error model, applied in target space (cells / log shifts)."""

    sigma_pos: float = 0.0  # corner position jitter, heatmap cells
    sigma_cs: float = 0.0  # shift jitter, log space
    sigma_score: float = 0.0  # additive on the peak score
    collision_rate: float = 0.0  # fraction of clusters sharing one embedding
    center_dropout: float = 0.0  # fraction of center keypoints dropped

    def __post_init__(self) -> None:
        for name in ("sigma_pos", "sigma_cs", "sigma_score"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("collision_rate", "center_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "sigma_pos": self.sigma_pos,
            "sigma_cs": self.sigma_cs,
            "sigma_score": self.sigma_score,
            "collision_rate": self.collision_rate,
            "center_dropout": self.center_dropout,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseModel":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown noise fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class SceneLayout:
    """Scene plus the cluster structure the renderer needs for collisions."""

    scene: Scene
    clusters: tuple[tuple[int, ...], ...]
    spec: SceneSpec
    index: int = 0


def _lattice_cell(x: float, y: float) -> tuple[int, int]:
    return (math.floor(x / CORNER_LATTICE), math.floor(y / CORNER_LATTICE))


class _Placer:
    def __init__(self, spec: SceneSpec, rng: np.random.Generator) -> None:
        self.spec = spec
        self.rng = rng
        self.boxes: list[BBox] = []
        self.cats: list[int] = []
        self.tl_cells: set[tuple[int, int]] = set()
        self.br_cells: set[tuple[int, int]] = set()

    def _draw_size(self) -> tuple[float, float]:
        mix = np.asarray(self.spec.size_mix, dtype=np.float64)
        bucket = _BUCKETS[int(self.rng.choice(3, p=mix / mix.sum()))]
        lo, hi = SIZE_RANGES[bucket]
        return float(self.rng.uniform(lo, hi)), float(self.rng.uniform(lo, hi))

    def _admissible(self, group: list[BBox], cat: int) -> bool:
        cells_tl = {_lattice_cell(b.tlx, b.tly) for b in group}
        cells_br = {_lattice_cell(b.brx, b.bry) for b in group}
        if cells_tl & self.tl_cells or cells_br & self.br_cells:
            return False
        for b in group:
            for prev, pcat in zip(self.boxes, self.cats):
                # same-category overlap is capped so the 0.5 IoU threshold
                # can never cross-match a perfect detection to the wrong GT
                if pcat == cat and iou(b, prev) > 0.3:
                    return False
        return True

    def _commit(self, group: list[BBox], cat: int) -> list[int]:
        first = len(self.boxes)
        for b in group:
            self.boxes.append(b)
            self.cats.append(cat)
            self.tl_cells.add(_lattice_cell(b.tlx, b.tly))
            self.br_cells.add(_lattice_cell(b.brx, b.bry))
        return list(range(first, len(self.boxes)))

    def place_group(self, n_members: int, what: str) -> list[int]:
        """A horizontal row of n identical boxes (n=1 places a single)."""
        spec = self.spec
        for _ in range(MAX_PLACE_TRIES):
            w, h = self._draw_size()
            d = spec.cluster_spacing_factor * w
            span = (n_members - 1) * d + w
            cat = int(self.rng.integers(spec.num_categories))
            max_x = spec.width - EDGE_MARGIN - span
            max_y = spec.height - EDGE_MARGIN - h
            if max_x <= EDGE_MARGIN or max_y <= EDGE_MARGIN:
                continue
            x0 = float(self.rng.uniform(EDGE_MARGIN, max_x))
            y0 = float(self.rng.uniform(EDGE_MARGIN, max_y))
            group = [BBox(x0 + i * d, y0, x0 + i * d + w, y0 + h) for i in range(n_members)]
            if self._admissible(group, cat):
                return self._commit(group, cat)
        raise PackingError(
            f"could not place {what} after {MAX_PLACE_TRIES} tries "
            f"(image {spec.width}x{spec.height} too crowded)"
        )


def generate_layout(spec: SceneSpec, index: int = 0) -> SceneLayout:
    """Deterministic scene for (spec.seed, index), with cluster bookkeeping."""
    rng = np.random.default_rng((spec.seed, index, STREAM_SCENE))
    placer = _Placer(spec, rng)
    n_clusters = int(rng.integers(spec.n_clusters[0], spec.n_clusters[1] + 1))
    n_singles = int(rng.integers(spec.n_singles[0], spec.n_singles[1] + 1))
    clusters = []
    for ci in range(n_clusters):
        n_members = int(rng.integers(spec.cluster_size[0], spec.cluster_size[1] + 1))
        clusters.append(tuple(placer.place_group(n_members, f"cluster {ci}")))
    for si in range(n_singles):
        placer.place_group(1, f"object {si}")
    objects = tuple(
        SceneObject(box=b, category=c) for b, c in zip(placer.boxes, placer.cats)
    )
    return SceneLayout(
        scene=Scene(spec.width, spec.height, objects),
        clusters=tuple(clusters),
        spec=spec,
        index=index,
    )


def generate_scene(spec: SceneSpec, index: int = 0) -> Scene:
    return generate_layout(spec, index).scene


@dataclass(frozen=True)
class RenderedPredictions:
    """Synthesized head output for one scene.

    Scores are post-head values in [SCORE_FLOOR, SCORE_CEIL] at corner cells,
    zero elsewhere; offsets restore each (jittered) corner exactly; shift
    maps exist in both encodings and decode to identical centers; embedding
    maps carry one value per object on both channels, so the same bundle
    serves 1-D and 2-D associative matching.
    """

    tl_scores: np.ndarray
    br_scores: np.ndarray
    tl_offset: np.ndarray
    br_offset: np.ndarray
    tl_shift_log: np.ndarray
    br_shift_log: np.ndarray
    tl_shift_linear: np.ndarray
    br_shift_linear: np.ndarray
    tl_embedding: np.ndarray
    br_embedding: np.ndarray
    centers: tuple[CenterPoint, ...]
    stride: int

    def corner_maps(
        self, encoding: str = "log", with_embeddings: bool = True
    ) -> tuple[CornerMaps, CornerMaps]:
        if encoding == "log":
            tl_shift, br_shift = self.tl_shift_log, self.br_shift_log
        elif encoding == "linear":
            tl_shift, br_shift = self.tl_shift_linear, self.br_shift_linear
        else:
            raise ValueError(f"encoding must be 'log' or 'linear', got {encoding!r}")
        emb_tl = self.tl_embedding if with_embeddings else None
        emb_br = self.br_embedding if with_embeddings else None
        return (
            CornerMaps(self.tl_scores, self.tl_offset, tl_shift, emb_tl),
            CornerMaps(self.br_scores, self.br_offset, br_shift, emb_br),
        )


def _embedding_values(layout: SceneLayout, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Per-object embedding values: unique by default; a collided cluster's
    members all take their category's collision value.  Collisions model
    look-alike appearance, which is a property of the object class, so two
    collided clusters of the same category become mutually indistinguishable
    too (false pairs may span clusters, not just neighbors)."""
    n = len(layout.scene.objects)
    vals = 2.0 * (np.arange(n, dtype=np.float64) + 1.0)
    for members in layout.clusters:
        # one bernoulli per cluster, drawn unconditionally to keep the
        # stream aligned across different rates
        collided = rng.uniform() < rate
        if collided and members:
            cat = layout.scene.objects[members[0]].category
            vals[list(members)] = -2.0 * (cat + 1)
    return vals


def render_predictions(layout: SceneLayout, noise: NoiseModel, stride: int = 4) -> RenderedPredictions:
    """Noisy prediction maps for a generated scene.

    Corner jitter moves the continuous corner position; the offset map then
    encodes the jittered position, so decoding returns exactly where the
    synthetic head "fired".  Shifts always point from the jittered corner to
    the true center (a head regresses the displacement field), then take the
    log-space noise shared by both encodings.  Later objects overwrite
    earlier ones when jitter lands two corners in one cell, mimicking peak
    confusion in crowded heatmaps.
    """
    scene, spec = layout.scene, layout.spec
    hs, ws = scene.map_shape(stride)
    c = spec.num_categories
    rng_maps = np.random.default_rng((spec.seed, layout.index, STREAM_MAPS))
    rng_emb = np.random.default_rng((spec.seed, layout.index, STREAM_EMBED))
    rng_ctr = np.random.default_rng((spec.seed, layout.index, STREAM_CENTERS))

    tl_scores = np.zeros((c, hs, ws), dtype=np.float32)
    br_scores = np.zeros((c, hs, ws), dtype=np.float32)
    tl_off = np.zeros((2, hs, ws), dtype=np.float32)
    br_off = np.zeros((2, hs, ws), dtype=np.float32)
    tl_log = np.zeros((2, hs, ws), dtype=np.float64)
    br_log = np.zeros((2, hs, ws), dtype=np.float64)
    tl_lin = np.zeros((2, hs, ws), dtype=np.float64)
    br_lin = np.zeros((2, hs, ws), dtype=np.float64)
    tl_emb = np.zeros((2, hs, ws), dtype=np.float32)
    br_emb = np.zeros((2, hs, ws), dtype=np.float32)

    emb_vals = _embedding_values(layout, noise.collision_rate, rng_emb)
    n = len(scene.objects)
    drop = rng_ctr.uniform(size=n) < noise.center_dropout if n else np.zeros(0, dtype=bool)

    for k, obj in enumerate(scene.objects):
        b = obj.box
        ctx, cty = (b.tlx + b.brx) / 2.0, (b.tly + b.bry) / 2.0
        # standard-normal draws scaled by sigma, so changing a sigma value
        # never shifts any other draw in the stream
        z_pos = rng_maps.standard_normal(4)
        eps = noise.sigma_cs * rng_maps.standard_normal(4)
        z_sc = rng_maps.standard_normal(2)

        for kind, (px, py), z_xy, z_s, sign in (
            ("tl", (b.tlx, b.tly), z_pos[:2], z_sc[0], 1.0),
            ("br", (b.brx, b.bry), z_pos[2:], z_sc[1], -1.0),
        ):
            jx = px + stride * noise.sigma_pos * z_xy[0]
            jy = py + stride * noise.sigma_pos * z_xy[1]
            jx = min(max(jx, 0.0), scene.width - 1e-3)
            jy = min(max(jy, 0.0), scene.height - 1e-3)
            i, j = int(jy // stride), int(jx // stride)
            # displacement from the fired corner to the true center, in
            # cells; clamped positive so the log encoding stays defined
            dx = max(sign * (ctx - jx) / stride, MIN_DISP_CELLS)
            dy = max(sign * (cty - jy) / stride, MIN_DISP_CELLS)
            ex, ey = (eps[0], eps[1]) if kind == "tl" else (eps[2], eps[3])
            log_x, log_y = math.log(dx) + ex, math.log(dy) + ey
            score = float(np.clip(PEAK_SCORE + noise.sigma_score * z_s, SCORE_FLOOR, SCORE_CEIL))
            if kind == "tl":
                tl_scores[obj.category, i, j] = score
                tl_off[0, i, j] = jx / stride - j
                tl_off[1, i, j] = jy / stride - i
                tl_log[:, i, j] = (log_x, log_y)
                tl_lin[:, i, j] = (math.exp(log_x), math.exp(log_y))
                tl_emb[:, i, j] = emb_vals[k]
            else:
                br_scores[obj.category, i, j] = score
                br_off[0, i, j] = jx / stride - j
                br_off[1, i, j] = jy / stride - i
                br_log[:, i, j] = (log_x, log_y)
                br_lin[:, i, j] = (-math.exp(log_x), -math.exp(log_y))
                br_emb[:, i, j] = emb_vals[k]

    centers = tuple(
        CenterPoint(category=obj.category, pos=box_center(obj.box))
        for k, obj in enumerate(scene.objects)
        if not drop[k]
    )
    return RenderedPredictions(
        tl_scores, br_scores, tl_off, br_off,
        tl_log, br_log, tl_lin, br_lin,
        tl_emb, br_emb, centers, stride,
    )


def _strategy_encoding(strategy: str) -> str:
    return "linear" if strategy == "center_regression" else "log"


def _detect_scene(
    rendered: RenderedPredictions,
    strategies: Sequence[str],
    base_cfg: MatchConfig,
    stride: int,
    k: int,
    timings: dict[str, list[float]] | None,
) -> dict[str, list]:
    """Decode + match once per strategy; decodes shared across strategies
    with the same shift encoding unless timings are being collected."""
    decoded: dict[str, tuple] = {}
    out: dict[str, list] = {}
    for strat in strategies:
        enc = _strategy_encoding(strat)
        cfg = replace(base_cfg, strategy=strat)
        centers = list(rendered.centers) if strat == "center_validation" else None
        if timings is not None:
            maps = rendered.corner_maps(enc)
            t0 = time.perf_counter()
            tls, brs = decode_corners(*maps, k=k, stride=stride)
            dets = match(tls, brs, cfg, stride=stride, centers=centers)
            timings[strat].append(time.perf_counter() - t0)
        else:
            if enc not in decoded:
                decoded[enc] = decode_corners(*rendered.corner_maps(enc), k=k, stride=stride)
            tls, brs = decoded[enc]
            dets = match(tls, brs, cfg, stride=stride, centers=centers)
        out[strat] = dets
    return out


def run_benchmark(
    spec: SceneSpec,
    noise_grid: Sequence[NoiseModel],
    strategies: Sequence[str],
    n_scenes: int = 50,
    stride: int = 4,
    k: int = 100,
    match_config: MatchConfig | None = None,
    include_latency: bool = False,
    threads: int = 1,
) -> dict:
    """Metric grid over (noise, strategy) cells.

    The metrics portion of the report is a pure function of (spec,
    noise_grid, strategies, n_scenes, stride, k, match_config); thread count
    never changes it.  Latency numbers are wall-clock and therefore only
    emitted on request; they are measured single-threaded (decode + match
    only, rendering excluded) so they stay comparable run to run.
    """
    if not strategies:
        raise ValueError("need at least one strategy")
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
    if n_scenes < 0:
        raise ValueError("n_scenes must be >= 0")
    if spec.width % stride or spec.height % stride:
        raise ValueError(f"stride {stride} must divide image {spec.width}x{spec.height}")
    base_cfg = match_config if match_config is not None else MatchConfig()

    report: dict = {
        "spec": spec.to_dict(),
        "stride": stride,
        "k": k,
        "n_scenes": n_scenes,
        "strategies": list(strategies),
        "grid": [],
    }
    if n_scenes == 0:
        return report

    layouts = [generate_layout(spec, i) for i in range(n_scenes)]
    gts = [list(lay.scene.objects) for lay in layouts]

    for noise in noise_grid:
        timings: dict[str, list[float]] | None = (
            {s: [] for s in strategies} if include_latency else None
        )

        def work(lay: SceneLayout) -> dict[str, list]:
            rendered = render_predictions(lay, noise, stride)
            return _detect_scene(rendered, strategies, base_cfg, stride, k, timings)

        if threads > 1 and not include_latency:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_scene = list(pool.map(work, layouts))
        else:
            per_scene = [work(lay) for lay in layouts]

        cells = {}
        for strat in strategies:
            res = evaluate([ps[strat] for ps in per_scene], gts)
            cell: dict = {"metrics": res.to_dict()}
            if timings is not None:
                t = np.asarray(timings[strat]) * 1e3
                cell["latency_ms"] = {
                    "mean": float(t.mean()),
                    "p50": float(np.median(t)),
                    "max": float(t.max()),
                }
            cells[strat] = cell
        report["grid"].append({"noise": noise.to_dict(), "cells": cells})
    return report
