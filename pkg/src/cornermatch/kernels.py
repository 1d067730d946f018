"""Dense numeric kernels: directional corner pooling, keypoint NMS, softmax,
bilinear sampling, deformable-convolution forward, RoIAlign, and the loss
functions with their analytic gradients plus a finite-difference checker.

Tensors are numpy arrays shaped (channels, height, width); axis order is
(c, i, j) with i the row (y) and j the column (x).  Offset and shift maps
put x in channel 0 and y in channel 1.  All kernels are pure functions of
their inputs; callers may parallelize freely across images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import BBox, Point


def _require_chw(t: np.ndarray, name: str) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"{name}: expected (C, H, W), got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# pooling and peak extraction


def corner_pool_tl(f_t: np.ndarray, f_l: np.ndarray) -> np.ndarray:
    """Top-left corner pooling: suffix max down each column plus suffix max
    along each row, summed.

    out[c,i,j] = max_{i'>=i} f_t[c,i',j] + max_{j'>=j} f_l[c,i,j'], i.e. the
    scans run bottom-to-top and right-to-left, pushing evidence from the
    object's interior out to its top-left corner.
    """
    f_t = _require_chw(f_t, "f_t")
    f_l = _require_chw(f_l, "f_l")
    if f_t.shape != f_l.shape:
        raise ValueError(f"shape mismatch: {f_t.shape} vs {f_l.shape}")
    mt = np.maximum.accumulate(f_t[:, ::-1, :], axis=1)[:, ::-1, :]
    ml = np.maximum.accumulate(f_l[:, :, ::-1], axis=2)[:, :, ::-1]
    return mt + ml


def corner_pool_br(f_b: np.ndarray, f_r: np.ndarray) -> np.ndarray:
    """Bottom-right corner pooling: the mirrored scans (top-to-bottom,
    left-to-right prefix maxima)."""
    f_b = _require_chw(f_b, "f_b")
    f_r = _require_chw(f_r, "f_r")
    if f_b.shape != f_r.shape:
        raise ValueError(f"shape mismatch: {f_b.shape} vs {f_r.shape}")
    mb = np.maximum.accumulate(f_b, axis=1)
    mr = np.maximum.accumulate(f_r, axis=2)
    return mb + mr


def _window_max3(h: np.ndarray) -> np.ndarray:
    # Separable 3x3 neighborhood max, borders clipped to the map.
    r = h.copy()
    np.maximum(r[:, 1:, :], h[:, :-1, :], out=r[:, 1:, :])
    np.maximum(r[:, :-1, :], h[:, 1:, :], out=r[:, :-1, :])
    m = r.copy()
    np.maximum(m[:, :, 1:], r[:, :, :-1], out=m[:, :, 1:])
    np.maximum(m[:, :, :-1], r[:, :, 1:], out=m[:, :, :-1])
    return m


def nms_maxpool3(h: np.ndarray) -> np.ndarray:
    """Keypoint NMS: keep cells equal to their 3x3 neighborhood max, zero the
    rest.  Ties survive; downstream top-k ordering breaks them."""
    h = _require_chw(h, "h")
    return np.where(h == _window_max3(h), h, np.zeros((), dtype=h.dtype))


def softmax_scores(h: np.ndarray, axis: str = "channel") -> np.ndarray:
    """Normalize a score map with a max-stabilized softmax.

    axis="channel" normalizes each spatial cell across channels;
    axis="spatial" normalizes each channel map over all its cells.
    """
    h = _require_chw(h, "h")
    if axis == "channel":
        m = h.max(axis=0, keepdims=True)
        e = np.exp(h - m)
        return e / e.sum(axis=0, keepdims=True)
    if axis == "spatial":
        m = h.max(axis=(1, 2), keepdims=True)
        e = np.exp(h - m)
        return e / e.sum(axis=(1, 2), keepdims=True)
    raise ValueError(f"axis must be 'channel' or 'spatial', got {axis!r}")


# ---------------------------------------------------------------------------
# sampling


def _bilinear_plane(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized 4-neighbor bilinear read from one 2D plane; out-of-bounds
    taps contribute zero."""
    hgt, wid = plane.shape
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    wx = xs - x0f
    wy = ys - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)

    def tap(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        inb = (yy >= 0) & (yy < hgt) & (xx >= 0) & (xx < wid)
        out = np.zeros(yy.shape, dtype=np.float64)
        out[inb] = plane[yy[inb], xx[inb]]
        return out

    v00 = tap(y0, x0)
    v01 = tap(y0, x0 + 1)
    v10 = tap(y0 + 1, x0)
    v11 = tap(y0 + 1, x0 + 1)
    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    return top * (1.0 - wy) + bot * wy


def bilinear_sample(f: np.ndarray, c: int, p: Point) -> float:
    """Bilinear read of channel c at feature-cell position p (x right, y down).

    Integer positions hit grid values exactly; positions outside the map
    read as zero, matching zero-padded convolution semantics.
    """
    f = _require_chw(f, "f")
    xs = np.asarray([p.x], dtype=np.float64)
    ys = np.asarray([p.y], dtype=np.float64)
    return float(_bilinear_plane(np.asarray(f[c], dtype=np.float64), xs, ys)[0])


def deform_conv_forward(f: np.ndarray, w: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Deformable convolution forward pass: each kernel tap samples the input
    bilinearly at its regular position plus a per-cell learned displacement.

    f:   (C_in, H, W) input features
    w:   (C_out, C_in, k, k) weights, k odd
    off: (2K, H, W) displacement field for the K = k*k taps, enumerated
         row-major (dy outer, dx inner) and interleaved (dy, dx) per tap

    Stride 1, zero padding k//2, so the output is (C_out, H, W).
    """
    f = _require_chw(f, "f")
    w = np.asarray(w, dtype=np.float64)
    off = _require_chw(off, "off")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"w: expected (C_out, C_in, k, k), got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if k % 2 != 1:
        raise ValueError(f"kernel size {k} must be odd")
    if c_in != f.shape[0]:
        raise ValueError(f"channel mismatch: f has {f.shape[0]}, w wants {c_in}")
    n_taps = k * k
    hgt, wid = f.shape[1], f.shape[2]
    if off.shape != (2 * n_taps, hgt, wid):
        raise ValueError(f"off: expected {(2 * n_taps, hgt, wid)}, got {off.shape}")

    pad = k // 2
    jj, ii = np.meshgrid(np.arange(wid, dtype=np.float64), np.arange(hgt, dtype=np.float64))
    out = np.zeros((c_out, hgt, wid), dtype=np.float64)
    planes = [np.asarray(f[ci], dtype=np.float64) for ci in range(c_in)]
    for t in range(n_taps):
        ky, kx = divmod(t, k)
        ys = ii + (ky - pad) + np.asarray(off[2 * t], dtype=np.float64)
        xs = jj + (kx - pad) + np.asarray(off[2 * t + 1], dtype=np.float64)
        for ci in range(c_in):
            sampled = _bilinear_plane(planes[ci], xs, ys)
            out += w[:, ci, ky, kx][:, None, None] * sampled[None, :, :]
    return out.astype(np.float32)


def deform_sampling_positions(
    off: np.ndarray, k: int, cell: tuple[int, int]
) -> np.ndarray:
    """Sampling positions (x, y) of all K taps at one output cell, in feature
    cells.  Shares the tap-enumeration convention with deform_conv_forward;
    used by the benchmark's offset-field visualization."""
    off = _require_chw(off, "off")
    n_taps = k * k
    if off.shape[0] != 2 * n_taps:
        raise ValueError(f"off has {off.shape[0]} channels, k={k} needs {2 * n_taps}")
    i, j = cell
    pad = k // 2
    pts = np.empty((n_taps, 2), dtype=np.float64)
    for t in range(n_taps):
        ky, kx = divmod(t, k)
        pts[t, 0] = j + (kx - pad) + float(off[2 * t + 1, i, j])
        pts[t, 1] = i + (ky - pad) + float(off[2 * t, i, j])
    return pts


def roi_align(
    f: np.ndarray, roi: BBox, stride: float, out_size: int = 14, samples: int = 2
) -> np.ndarray:
    """Average-pooling RoIAlign with continuous (non-rounded) RoI division.

    The RoI is given in image pixels and scaled by 1/stride into feature
    cells; each of the out_size x out_size output cells averages
    samples*samples bilinear reads at regular sub-cell positions.
    """
    f = _require_chw(f, "f")
    if out_size < 1 or samples < 1:
        raise ValueError("out_size and samples must be >= 1")
    x_lo = roi.tlx / stride
    y_lo = roi.tly / stride
    bw = (roi.brx - roi.tlx) / stride / out_size
    bh = (roi.bry - roi.tly) / stride / out_size
    frac = (np.arange(samples, dtype=np.float64) + 0.5) / samples
    ox = np.arange(out_size, dtype=np.float64)
    # positions[o, s] = lo + (o + frac[s]) * bin
    xs = x_lo + (ox[:, None] + frac[None, :]) * bw
    ys = y_lo + (ox[:, None] + frac[None, :]) * bh
    grid_x = np.broadcast_to(xs[None, :, None, :], (out_size, out_size, samples, samples))
    grid_y = np.broadcast_to(ys[:, None, :, None], (out_size, out_size, samples, samples))
    gx = np.ascontiguousarray(grid_x).reshape(-1)
    gy = np.ascontiguousarray(grid_y).reshape(-1)
    out = np.empty((f.shape[0], out_size, out_size), dtype=np.float32)
    for c in range(f.shape[0]):
        vals = _bilinear_plane(np.asarray(f[c], dtype=np.float64), gx, gy)
        vals = vals.reshape(out_size, out_size, samples * samples)
        out[c] = vals.mean(axis=2)
    return out


# ---------------------------------------------------------------------------
# losses


def _smooth_l1_elem(d: np.ndarray) -> np.ndarray:
    ad = np.abs(d)
    return np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)


def _smooth_l1_grad_elem(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def smooth_l1(pred: np.ndarray, gt: np.ndarray) -> float:
    """Smooth L1 with beta = 1, averaged over elements: 0.5 d^2 inside the
    unit interval, |d| - 0.5 outside."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(_smooth_l1_elem(pred - gt).mean())


def _pair_vector_loss(
    pred_tl: np.ndarray, gt_tl: np.ndarray, pred_br: np.ndarray, gt_br: np.ndarray
) -> float:
    # Per-corner 2-vectors: coordinates are summed (not averaged) within each
    # vector, then the per-object sums average over the N objects.
    arrs = []
    for name, a in (
        ("pred_tl", pred_tl),
        ("gt_tl", gt_tl),
        ("pred_br", pred_br),
        ("gt_br", gt_br),
    ):
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 2:
            raise ValueError(f"{name}: expected (N, 2), got {a.shape}")
        arrs.append(a)
    p_tl, g_tl, p_br, g_br = arrs
    n = p_tl.shape[0]
    if not (g_tl.shape[0] == p_br.shape[0] == g_br.shape[0] == n):
        raise ValueError("corner arrays disagree on N")
    if n == 0:
        raise ValueError("no ground-truth corners (N = 0)")
    per_obj = _smooth_l1_elem(p_tl - g_tl).sum(axis=1) + _smooth_l1_elem(p_br - g_br).sum(axis=1)
    return float(per_obj.mean())


def _pair_vector_loss_grad(
    pred_tl: np.ndarray, gt_tl: np.ndarray, pred_br: np.ndarray, gt_br: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    p_tl = np.asarray(pred_tl, dtype=np.float64)
    g_tl = np.asarray(gt_tl, dtype=np.float64)
    p_br = np.asarray(pred_br, dtype=np.float64)
    g_br = np.asarray(gt_br, dtype=np.float64)
    n = p_tl.shape[0]
    if n == 0:
        raise ValueError("no ground-truth corners (N = 0)")
    return (
        _smooth_l1_grad_elem(p_tl - g_tl) / n,
        _smooth_l1_grad_elem(p_br - g_br) / n,
    )


def centripetal_loss(
    pred_tl: np.ndarray, gt_tl: np.ndarray, pred_br: np.ndarray, gt_br: np.ndarray
) -> float:
    """Regression loss on the log-space corner-to-center shift vectors,
    evaluated only at ground-truth corner cells.

    Each object contributes smooth-L1 summed over the two coordinates of its
    top-left shift error plus the same for its bottom-right shift; the sum is
    averaged over the N objects.
    """
    return _pair_vector_loss(pred_tl, gt_tl, pred_br, gt_br)


def centripetal_loss_grad(
    pred_tl: np.ndarray, gt_tl: np.ndarray, pred_br: np.ndarray, gt_br: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of centripetal_loss w.r.t. the two prediction arrays."""
    return _pair_vector_loss_grad(pred_tl, gt_tl, pred_br, gt_br)


def guiding_shift_loss(
    pred_tl: np.ndarray, gt_tl: np.ndarray, pred_br: np.ndarray, gt_br: np.ndarray
) -> float:
    """Same reduction as centripetal_loss, applied to the guiding-shift
    vectors (linear heatmap-cell units) that supervise the offset field."""
    return _pair_vector_loss(pred_tl, gt_tl, pred_br, gt_br)


def guiding_shift_loss_grad(
    pred_tl: np.ndarray, gt_tl: np.ndarray, pred_br: np.ndarray, gt_br: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    return _pair_vector_loss_grad(pred_tl, gt_tl, pred_br, gt_br)


MASK_EPS = 1e-7


def mask_loss(pred_masks: np.ndarray, gt_masks: np.ndarray) -> float:
    """Mean binary cross-entropy over N proposal masks.

    pred values are probabilities, clamped to [MASK_EPS, 1 - MASK_EPS] before
    the logs; each proposal's pixels average first, then proposals average.
    """
    pred = np.asarray(pred_masks, dtype=np.float64)
    gt = np.asarray(gt_masks, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"expected matching (N, h, w) masks, got {pred.shape} vs {gt.shape}")
    if pred.shape[0] == 0:
        raise ValueError("no proposals (N = 0)")
    p = np.clip(pred, MASK_EPS, 1.0 - MASK_EPS)
    ce = -(gt * np.log(p) + (1.0 - gt) * np.log(1.0 - p))
    return float(ce.mean(axis=(1, 2)).mean())


def mask_loss_grad(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Gradient of mask_loss w.r.t. pred; valid where the clamp is inactive."""
    pred = np.asarray(pred_masks, dtype=np.float64)
    gt = np.asarray(gt_masks, dtype=np.float64)
    n = pred.shape[0]
    if n == 0:
        raise ValueError("no proposals (N = 0)")
    p = np.clip(pred, MASK_EPS, 1.0 - MASK_EPS)
    per_pixel = (-gt / p + (1.0 - gt) / (1.0 - p)) / (pred.shape[1] * pred.shape[2])
    active = (pred > MASK_EPS) & (pred < 1.0 - MASK_EPS)
    return np.where(active, per_pixel, 0.0) / n


DELTA_WEIGHT = 0.05


def total_loss(
    det: float,
    offset: float,
    guide: float,
    shift: float,
    mask: float,
    alpha: float = DELTA_WEIGHT,
) -> float:
    """Aggregate objective: det + offset + alpha*guide + shift + mask.

    det and offset are external scalars (their internals are out of scope
    here); the guide term is down-weighted by alpha, default 0.05.
    """
    for name, v in (("det", det), ("offset", offset), ("guide", guide),
                    ("shift", shift), ("mask", mask), ("alpha", alpha)):
        if not math.isfinite(v):
            raise ValueError(f"non-finite {name}: {v}")
    return det + offset + alpha * guide + shift + mask


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class GradCheck:
    """Result of a finite-difference gradient comparison."""

    max_rel_err: float
    rel_err: np.ndarray
    numeric: np.ndarray
    analytic: np.ndarray


def grad_check(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    h: float = 1e-4,
    skip: np.ndarray | None = None,
) -> GradCheck:
    """Compare an analytic gradient against central differences.

    f maps a flat float array to a scalar; grad returns the same-shaped
    gradient.  skip is an optional boolean mask marking coordinates to
    exclude from max_rel_err (e.g. points near a non-smooth kink, where
    central differences are meaningless).  Per-coordinate relative error is
    |num - ana| / max(|num|, |ana|, 1e-8).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    flat = x0.ravel()
    num = np.empty(flat.shape, dtype=np.float64)
    for idx in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2.0 * h)
    ana = np.asarray(grad(x0), dtype=np.float64).ravel()
    if ana.shape != num.shape:
        raise ValueError(f"gradient shape {ana.shape} does not match input {num.shape}")
    denom = np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-8)
    rel = np.abs(num - ana) / denom
    considered = rel if skip is None else rel[~np.asarray(skip).ravel()]
    max_err = float(considered.max()) if considered.size else 0.0
    return GradCheck(max_err, rel, num, ana)
