"""Ground-truth target encoding.

Turns an annotated scene into the map bundle a corner-detection head is
trained against: per-category corner heatmaps, sub-cell local offsets,
log-space corner-to-center shifts, and the guiding shifts that supervise
the deformable offset field.  All maps live on the stride-s lattice with
cell (i, j) covering image pixels [j*s, (j+1)*s) x [i*s, (i+1)*s); map
channel 0 carries x and channel 1 carries y for every 2-channel map.

Shift sign conventions: the top-left shift and guide point right/down
(toward the center), stored positive.  The bottom-right guide is mirrored,
floor(br/s) - center/s per axis, so it is also positive for boxes wider
than one cell; the rounding can push it slightly negative for sub-cell
boxes, which is exactly the failure mode validate_center_regression_encodable
reports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BBox

MASK_SIDE = 28


class SceneError(ValueError):
    """A structurally valid scene that violates geometry constraints."""


class SceneFormatError(ValueError):
    """Malformed scene JSON; the message names the offending field."""


class EncodingDegenerateError(ValueError):
    """A shift encoding hit a non-positive log argument; names the object."""


@dataclass(frozen=True)
class SceneObject:
    box: BBox
    category: int
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.category < 0:
            raise SceneError(f"negative category {self.category}")
        if self.mask is not None and self.mask.shape != (MASK_SIDE, MASK_SIDE):
            raise SceneError(f"mask must be {MASK_SIDE}x{MASK_SIDE}, got {self.mask.shape}")


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise SceneError(f"bad image size {self.width}x{self.height}")
        for k, obj in enumerate(self.objects):
            b = obj.box
            if b.tlx < 0 or b.tly < 0 or b.brx > self.width or b.bry > self.height:
                raise SceneError(f"object {k} outside image")

    def map_shape(self, stride: int) -> tuple[int, int]:
        if stride < 1:
            raise SceneError(f"stride must be >= 1, got {stride}")
        if self.width % stride or self.height % stride:
            raise SceneError(
                f"image {self.width}x{self.height} not divisible by stride {stride}"
            )
        return (self.height // stride, self.width // stride)

    def num_categories_lower_bound(self) -> int:
        return 1 + max((o.category for o in self.objects), default=-1)


def scene_from_json(doc: dict | str | Path) -> Scene:
    """Parse {"width","height","objects":[{"bbox","category","mask"?}]}.

    Accepts a parsed dict or a path to a JSON file.  Raises SceneFormatError
    naming the field on structural problems; geometric problems (degenerate
    or out-of-image boxes) surface as SceneError from construction.
    """
    if not isinstance(doc, dict):
        with open(doc, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"unparseable scene JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise SceneFormatError("scene JSON root must be an object")
    for key in ("width", "height"):
        if not isinstance(doc.get(key), int) or isinstance(doc.get(key), bool):
            raise SceneFormatError(f"field '{key}' must be an integer")
    raw_objects = doc.get("objects")
    if not isinstance(raw_objects, list):
        raise SceneFormatError("field 'objects' must be a list")
    objects = []
    for k, raw in enumerate(raw_objects):
        where = f"objects[{k}]"
        if not isinstance(raw, dict):
            raise SceneFormatError(f"field '{where}' must be an object")
        bbox = raw.get("bbox")
        if (
            not isinstance(bbox, list)
            or len(bbox) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox)
        ):
            raise SceneFormatError(f"field '{where}.bbox' must be 4 numbers")
        cat = raw.get("category")
        if not isinstance(cat, int) or isinstance(cat, bool):
            raise SceneFormatError(f"field '{where}.category' must be an integer")
        mask = None
        if raw.get("mask") is not None:
            flat = raw["mask"]
            if not isinstance(flat, list) or len(flat) != MASK_SIDE * MASK_SIDE:
                raise SceneFormatError(
                    f"field '{where}.mask' must be {MASK_SIDE * MASK_SIDE} values, row-major"
                )
            if not all(v in (0, 1) for v in flat):
                raise SceneFormatError(f"field '{where}.mask' must contain only 0/1")
            mask = np.asarray(flat, dtype=np.float32).reshape(MASK_SIDE, MASK_SIDE)
        try:
            box = BBox(*[float(v) for v in bbox])
        except ValueError as exc:
            raise SceneFormatError(f"field '{where}.bbox': {exc}") from exc
        objects.append(SceneObject(box, cat, mask))
    return Scene(doc["width"], doc["height"], tuple(objects))


def scene_to_json(scene: Scene) -> dict:
    objs = []
    for o in scene.objects:
        entry: dict = {"bbox": list(o.box.as_tuple()), "category": o.category}
        if o.mask is not None:
            entry["mask"] = [int(v) for v in o.mask.reshape(-1)]
        objs.append(entry)
    return {"width": scene.width, "height": scene.height, "objects": objs}


# ---------------------------------------------------------------------------
# heatmaps


def gaussian_radius(width_cells: float, height_cells: float, min_overlap: float = 0.3) -> float:
    """Largest corner displacement radius (in cells) keeping a shifted box at
    IoU >= min_overlap with the original, via the three classical worst cases
    (both corners out, both in, one in / one out); smallest root wins."""
    w, h = width_cells, height_cells

    a1 = 1.0
    b1 = h + w
    c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap)
    r1 = (b1 - math.sqrt(b1 * b1 - 4.0 * a1 * c1)) / (2.0 * a1)

    a2 = 4.0
    b2 = 2.0 * (h + w)
    c2 = (1.0 - min_overlap) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 4.0 * a2 * c2)) / (2.0 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (h + w)
    c3 = (min_overlap - 1.0) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 4.0 * a3 * c3)) / (2.0 * a3)
    return min(r1, r2, r3)


def _corner_cells(scene: Scene, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """(N, 2) int arrays of (i, j) heatmap cells for tl and br corners."""
    tl = np.empty((len(scene.objects), 2), dtype=np.int64)
    br = np.empty((len(scene.objects), 2), dtype=np.int64)
    hs, ws = scene.map_shape(stride)
    for k, obj in enumerate(scene.objects):
        b = obj.box
        cells = (
            (int(b.tly // stride), int(b.tlx // stride)),
            (int(b.bry // stride), int(b.brx // stride)),
        )
        for (i, j), out in zip(cells, (tl, br)):
            # A corner sitting exactly on the right/bottom image edge floors
            # to one past the last cell; clamp it back onto the map.
            i = min(i, hs - 1)
            j = min(j, ws - 1)
            if not (0 <= i < hs and 0 <= j < ws):
                raise SceneError(f"object {k}: corner cell ({i}, {j}) outside map")
            out[k] = (i, j)
    return tl, br


def _splat(heat: np.ndarray, cat: int, i: int, j: int, radius: int) -> None:
    # Unnormalized Gaussian, max-combined so stacked objects keep heat <= 1.
    if radius <= 0:
        heat[cat, i, j] = 1.0
        return
    sigma = (2.0 * radius + 1.0) / 6.0
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    hs, ws = heat.shape[1:]
    i0, i1 = max(0, i - radius), min(hs, i + radius + 1)
    j0, j1 = max(0, j - radius), min(ws, j + radius + 1)
    win = g[i0 - (i - radius) : i1 - (i - radius), j0 - (j - radius) : j1 - (j - radius)]
    np.maximum(heat[cat, i0:i1, j0:j1], win, out=heat[cat, i0:i1, j0:j1])
    heat[cat, i, j] = 1.0


def encode_heatmaps(
    scene: Scene,
    num_categories: int,
    stride: int = 4,
    radius: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-category corner heatmaps with value 1.0 at each ground-truth
    corner cell and a Gaussian splat around it.

    radius=None picks the per-box IoU-based radius (min_overlap 0.3);
    an explicit integer fixes it, with 0 producing pure delta peaks.
    """
    hs, ws = scene.map_shape(stride)
    if num_categories < scene.num_categories_lower_bound():
        raise SceneError(
            f"num_categories {num_categories} below max category id in scene"
        )
    tl_heat = np.zeros((num_categories, hs, ws), dtype=np.float32)
    br_heat = np.zeros((num_categories, hs, ws), dtype=np.float32)
    tl_cells, br_cells = _corner_cells(scene, stride)
    for k, obj in enumerate(scene.objects):
        if radius is None:
            r = gaussian_radius(obj.box.width / stride, obj.box.height / stride)
            r = max(0, int(r))
        else:
            r = max(0, int(radius))
        _splat(tl_heat, obj.category, *tl_cells[k], r)
        _splat(br_heat, obj.category, *br_cells[k], r)
    return tl_heat, br_heat


# ---------------------------------------------------------------------------
# per-corner regression targets


def encode_local_offsets(scene: Scene, stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Sub-cell remainders (x/s - floor(x/s), y/s - floor(y/s)) at each GT
    corner cell; restores exact corner positions at decode time."""
    hs, ws = scene.map_shape(stride)
    tl_off = np.zeros((2, hs, ws), dtype=np.float32)
    br_off = np.zeros((2, hs, ws), dtype=np.float32)
    tl_cells, br_cells = _corner_cells(scene, stride)
    for k, obj in enumerate(scene.objects):
        b = obj.box
        for (x, y), (i, j), out in (
            ((b.tlx, b.tly), tl_cells[k], tl_off),
            ((b.brx, b.bry), br_cells[k], br_off),
        ):
            out[0, i, j] = x / stride - j
            out[1, i, j] = y / stride - i
    return tl_off, br_off


def encode_centripetal_shifts(scene: Scene, stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Log-space corner-to-center shifts.

    tl cell: (log((ctx - tlx)/s), log((cty - tly)/s));
    br cell: (log((brx - ctx)/s), log((bry - cty)/s)).
    Both log arguments are half the box extent over the stride, so any box
    with positive width and height encodes; a non-positive argument can only
    come from a degenerate box and raises EncodingDegenerateError.
    """
    hs, ws = scene.map_shape(stride)
    tl_shift = np.zeros((2, hs, ws), dtype=np.float32)
    br_shift = np.zeros((2, hs, ws), dtype=np.float32)
    tl_cells, br_cells = _corner_cells(scene, stride)
    for k, obj in enumerate(scene.objects):
        b = obj.box
        ctx = (b.tlx + b.brx) / 2.0
        cty = (b.tly + b.bry) / 2.0
        for (dx, dy), (i, j), out in (
            ((ctx - b.tlx, cty - b.tly), tl_cells[k], tl_shift),
            ((b.brx - ctx, b.bry - cty), br_cells[k], br_shift),
        ):
            if dx <= 0.0 or dy <= 0.0:
                raise EncodingDegenerateError(
                    f"object {k}: non-positive center displacement ({dx}, {dy})"
                )
            out[0, i, j] = math.log(dx / stride)
            out[1, i, j] = math.log(dy / stride)
    return tl_shift, br_shift


def encode_guiding_shifts(scene: Scene, stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Linear displacement from the rounded corner cell to the precise center,
    in heatmap cells.

    tl cell: (ctx/s - floor(tlx/s), cty/s - floor(tly/s)); the br map is
    mirrored toward the center: (floor(brx/s) - ctx/s, floor(bry/s) - cty/s).
    """
    hs, ws = scene.map_shape(stride)
    tl_guide = np.zeros((2, hs, ws), dtype=np.float32)
    br_guide = np.zeros((2, hs, ws), dtype=np.float32)
    tl_cells, br_cells = _corner_cells(scene, stride)
    for k, obj in enumerate(scene.objects):
        b = obj.box
        ctx = (b.tlx + b.brx) / 2.0
        cty = (b.tly + b.bry) / 2.0
        ti, tj = tl_cells[k]
        tl_guide[0, ti, tj] = ctx / stride - tj
        tl_guide[1, ti, tj] = cty / stride - ti
        bi, bj = br_cells[k]
        br_guide[0, bi, bj] = bj - ctx / stride
        br_guide[1, bi, bj] = bi - cty / stride
    return tl_guide, br_guide


def corner_valid_masks(scene: Scene, stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (H/s, W/s) masks marking GT corner cells; regression maps are
    meaningful only where these are set."""
    hs, ws = scene.map_shape(stride)
    tl_valid = np.zeros((hs, ws), dtype=bool)
    br_valid = np.zeros((hs, ws), dtype=bool)
    tl_cells, br_cells = _corner_cells(scene, stride)
    for k in range(len(scene.objects)):
        tl_valid[tuple(tl_cells[k])] = True
        br_valid[tuple(br_cells[k])] = True
    return tl_valid, br_valid


@dataclass(frozen=True)
class TargetMaps:
    """Encoder output bundle.  Heat maps are (C, H/s, W/s); offset, shift and
    guide maps are (2, H/s, W/s) with x in channel 0; valid masks mark the
    cells where regression targets are defined (other cells carry zeros)."""

    tl_heat: np.ndarray
    br_heat: np.ndarray
    tl_offset: np.ndarray
    br_offset: np.ndarray
    tl_shift: np.ndarray
    br_shift: np.ndarray
    tl_guide: np.ndarray
    br_guide: np.ndarray
    tl_valid: np.ndarray
    br_valid: np.ndarray
    stride: int
    num_categories: int


def encode(
    scene: Scene,
    num_categories: int,
    stride: int = 4,
    radius: int | None = None,
) -> TargetMaps:
    """Full target encoding for one scene.  Shared corner cells between
    objects keep heat at 1.0 via max-combine; for the regression maps the
    later object wins the cell (one value per cell is all the format holds).
    """
    tl_heat, br_heat = encode_heatmaps(scene, num_categories, stride, radius)
    tl_off, br_off = encode_local_offsets(scene, stride)
    tl_shift, br_shift = encode_centripetal_shifts(scene, stride)
    tl_guide, br_guide = encode_guiding_shifts(scene, stride)
    tl_valid, br_valid = corner_valid_masks(scene, stride)
    return TargetMaps(
        tl_heat, br_heat, tl_off, br_off, tl_shift, br_shift,
        tl_guide, br_guide, tl_valid, br_valid, stride, num_categories,
    )


# ---------------------------------------------------------------------------
# encodability report


@dataclass(frozen=True)
class EncodabilityFlag:
    """One non-encodable rounded offset: log() of offset_cells would fail."""

    object_index: int
    corner: str  # "tl" | "br"
    axis: str  # "x" | "y"
    offset_cells: float


def validate_center_regression_encodable(scene: Scene, stride: int = 4) -> list[EncodabilityFlag]:
    """Report objects whose rounded-corner-to-center offset is not log-encodable.

    A baseline that regresses the center from each corner in log space needs
    the displacement from the ROUNDED heatmap corner to the precise center to
    stay positive.  Rounding br corners down can push that displacement to
    zero or below for boxes narrower than about two cells; such (object,
    corner, axis) entries are returned.  tl offsets cannot fail (flooring
    only moves the tl corner further from the center) but are checked anyway.
    """
    flags: list[EncodabilityFlag] = []
    tl_cells, br_cells = _corner_cells(scene, stride)
    for k, obj in enumerate(scene.objects):
        b = obj.box
        ctx = (b.tlx + b.brx) / 2.0
        cty = (b.tly + b.bry) / 2.0
        ti, tj = tl_cells[k]
        bi, bj = br_cells[k]
        offsets = (
            ("tl", "x", ctx / stride - tj),
            ("tl", "y", cty / stride - ti),
            ("br", "x", bj - ctx / stride),
            ("br", "y", bi - cty / stride),
        )
        for corner, axis, off in offsets:
            if off <= 0.0:
                flags.append(EncodabilityFlag(k, corner, axis, off))
    return flags
