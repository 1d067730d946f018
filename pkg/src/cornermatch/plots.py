"""SVG figures for benchmark reports.

matplotlib is imported lazily so the core pipeline has no plotting
dependency at import time; the Agg backend keeps rendering headless.
"""

from __future__ import annotations

import numpy as np

from .kernels import deform_sampling_positions


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    return plt


def _noise_label(noise: dict) -> str:
    return (
        f"pos {noise['sigma_pos']:g}\ncs {noise['sigma_cs']:g}\n"
        f"coll {noise['collision_rate']:g}"
    )


def plot_benchmark_row(
    report: dict,
    row_index: int,
    offset_field: np.ndarray | None,
    out_path,
    kernel: int = 3,
    max_cells: int = 6,
) -> None:
    """One figure per grid row: AP curves over the whole noise grid with this
    row highlighted, plus the deformable sampling scatter for a given offset
    field (skipped when offset_field is None or has no active cells).

    offset_field is a (2*kernel^2, H, W) tap-offset map; cells whose offsets
    are non-zero (the corner cells, when derived from guiding shifts) are the
    ones worth drawing.
    """
    rows = report["grid"]
    if not 0 <= row_index < len(rows):
        raise ValueError(f"row {row_index} outside grid of {len(rows)}")
    plt = _pyplot()
    fig, (ax_ap, ax_pts) = plt.subplots(1, 2, figsize=(11.0, 4.4))

    xs = np.arange(len(rows))
    for strat in report["strategies"]:
        aps = [r["cells"][strat]["metrics"]["ap"] for r in rows]
        ax_ap.plot(xs, aps, marker="o", linewidth=1.4, label=strat)
    ax_ap.axvline(row_index, color="0.55", linestyle="--", linewidth=1.0)
    ax_ap.set_xticks(xs)
    ax_ap.set_xticklabels([_noise_label(r["noise"]) for r in rows], fontsize=7)
    ax_ap.set_ylim(0.0, 1.05)
    ax_ap.set_ylabel("AP @[.5:.95]")
    ax_ap.set_title(f"strategy AP across the noise grid (row {row_index} marked)")
    ax_ap.legend(fontsize=8, loc="lower left")

    ax_pts.set_title("deformable sampling positions")
    ax_pts.set_aspect("equal")
    drew = False
    if offset_field is not None:
        active = np.argwhere(np.abs(offset_field).sum(axis=0) > 0)
        for i, j in active[:max_cells]:
            pts = deform_sampling_positions(offset_field, kernel, (int(i), int(j)))
            ax_pts.scatter(pts[:, 0], pts[:, 1], s=14, alpha=0.8)
            ax_pts.plot([j], [i], marker="+", color="black", markersize=9)
            drew = True
    if not drew:
        ax_pts.text(0.5, 0.5, "no active offset cells", ha="center", va="center",
                    transform=ax_pts.transAxes, fontsize=9, color="0.4")
    else:
        ax_pts.invert_yaxis()  # row axis grows downward, like the maps
        ax_pts.set_xlabel("cell x")
        ax_pts.set_ylabel("cell y")

    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def guide_offset_field(guide: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Tap-offset map where every tap carries the cell's guiding shift, so
    the whole kernel window translates from the corner toward the center.
    guide is a (2, H, W) map with x in channel 0; taps take (dy, dx) pairs.
    """
    if guide.ndim != 3 or guide.shape[0] != 2:
        raise ValueError(f"guide must be (2, H, W), got {guide.shape}")
    n_taps = kernel * kernel
    _, hs, ws = guide.shape
    off = np.empty((2 * n_taps, hs, ws), dtype=guide.dtype)
    for t in range(n_taps):
        off[2 * t] = guide[1]  # dy
        off[2 * t + 1] = guide[0]  # dx
    return off
