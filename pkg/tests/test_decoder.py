import math

import numpy as np
import pytest

from cornermatch.decoder import (
    CornerCandidate,
    CornerMaps,
    _top_k_flat,
    decode_center,
    decode_corners,
)
from cornermatch.encoder import Scene, SceneObject, encode
from cornermatch.geometry import BBox, Point


def maps_for(scene, num_categories, stride=4, radius=0):
    """Target maps dressed up as predictions (tl bundle, br bundle)."""
    t = encode(scene, num_categories, stride=stride, radius=radius)
    return (
        CornerMaps(t.tl_heat, t.tl_offset, t.tl_shift),
        CornerMaps(t.br_heat, t.br_offset, t.br_shift),
    )


def test_corner_maps_shape_validation():
    heat = np.zeros((2, 8, 8))
    with pytest.raises(ValueError):
        CornerMaps(heat, np.zeros((2, 8, 7)), np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        CornerMaps(heat, np.zeros((2, 8, 8)), np.zeros((3, 8, 8)))
    with pytest.raises(ValueError):
        CornerMaps(heat, np.zeros((2, 8, 8)), np.zeros((2, 8, 8)), np.zeros((1, 4, 4)))


# ---------------------------------------------------------------------------
# top-k selection


def brute_top_k(flat, k):
    return np.lexsort((np.arange(flat.size), -flat))[:k]


def test_top_k_matches_brute_force(rng):
    for trial in range(60):
        n = int(rng.integers(5, 400))
        k = int(rng.integers(1, n + 1))
        style = trial % 3
        if style == 0:
            flat = rng.standard_normal(n)
        elif style == 1:
            # heavy plateau with a few peaks, the decoder's usual diet
            flat = np.full(n, 0.125)
            peaks = rng.choice(n, size=min(5, n), replace=False)
            flat[peaks] = rng.uniform(0.5, 1.0, size=peaks.size)
        else:
            flat = rng.choice([0.0, 0.25, 0.5], size=n)
        got = _top_k_flat(flat.astype(np.float32), k)
        np.testing.assert_array_equal(got, brute_top_k(flat.astype(np.float32), k))


def test_top_k_all_equal_prefers_low_indices():
    flat = np.full(100, 0.01, dtype=np.float32)
    np.testing.assert_array_equal(_top_k_flat(flat, 7), np.arange(7))


def test_top_k_sorted_by_score_then_index():
    flat = np.array([0.1, 0.9, 0.5, 0.9, 0.5], dtype=np.float32)
    np.testing.assert_array_equal(_top_k_flat(flat, 4), [1, 3, 2, 4])


# ---------------------------------------------------------------------------
# decoding ideal maps


def test_decode_recovers_corner_positions():
    box = (9.0, 10.0, 41.0, 74.0)
    scene = Scene(128, 128, (SceneObject(BBox(*box), 1),))
    tl_m, br_m = maps_for(scene, 3)
    tl, br = decode_corners(tl_m, br_m, k=1)
    assert len(tl) == 1 and len(br) == 1
    assert tl[0].kind == "tl" and br[0].kind == "br"
    assert tl[0].category == 1
    # offsets restore the exact sub-cell corner position
    assert (tl[0].pos.x, tl[0].pos.y) == pytest.approx((9.0, 10.0), abs=1e-5)
    assert (br[0].pos.x, br[0].pos.y) == pytest.approx((41.0, 74.0), abs=1e-5)
    assert tl[0].cell == (2, 2)
    assert br[0].cell == (18, 10)
    assert tl[0].embedding is None


def test_decode_peak_outscores_plateau():
    scene = Scene(64, 64, (SceneObject(BBox(8, 8, 32, 32), 0),))
    tl_m, br_m = maps_for(scene, 2)
    tl, _ = decode_corners(tl_m, br_m, k=5)
    assert tl[0].cell == (2, 2)
    assert tl[0].score > tl[1].score  # plateau ties trail the real peak


def test_decode_shift_read_at_unrefined_cell():
    scene = Scene(128, 128, (SceneObject(BBox(9, 10, 41, 74), 0),))
    t = encode(scene, 2, stride=4, radius=0)
    tl_m = CornerMaps(t.tl_heat, t.tl_offset, t.tl_shift)
    br_m = CornerMaps(t.br_heat, t.br_offset, t.br_shift)
    tl, _ = decode_corners(tl_m, br_m, k=1)
    assert tl[0].shift[0] == pytest.approx(float(t.tl_shift[0, 2, 2]), abs=0)
    assert tl[0].shift[1] == pytest.approx(float(t.tl_shift[1, 2, 2]), abs=0)


def test_decode_order_is_deterministic_on_ties():
    heat = np.zeros((2, 6, 6))
    offset = np.zeros((2, 6, 6))
    shift = np.zeros((2, 6, 6))
    m = CornerMaps(heat, offset, shift)
    tl, _ = decode_corners(m, m, k=4)
    # all-zero heat: softmax plateau, ties resolve in (category, i, j) order
    assert [c.cell for c in tl] == [(0, 0), (0, 1), (0, 2), (0, 3)]
    assert all(c.category == 0 for c in tl)
    scores = {c.score for c in tl}
    assert len(scores) == 1  # all equal on the plateau


def test_decode_k_validation_and_warning():
    m = CornerMaps(np.zeros((1, 4, 4)), np.zeros((2, 4, 4)), np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        decode_corners(m, m, k=0)
    with pytest.warns(UserWarning, match="top-k"):
        tl, _ = decode_corners(m, m, k=100)
    assert len(tl) == 16


def test_decode_embeddings_carried():
    heat = np.zeros((2, 4, 4))
    heat[0, 1, 1] = 5.0
    emb = np.zeros((2, 4, 4))
    emb[:, 1, 1] = (3.5, -1.25)
    m = CornerMaps(heat, np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), emb)
    tl, _ = decode_corners(m, m, k=1)
    assert tl[0].embedding == (3.5, -1.25)


def test_decode_spatial_axis():
    heat = np.zeros((2, 4, 4))
    heat[0, 1, 1] = 3.0
    heat[1, 2, 2] = 2.0
    m = CornerMaps(heat, np.zeros((2, 4, 4)), np.zeros((2, 4, 4)))
    tl, _ = decode_corners(m, m, k=2, axis="spatial")
    # per-channel normalization: each channel's peak dominates its own plateau
    assert {c.category for c in tl} == {0, 1}


# ---------------------------------------------------------------------------
# center decoding


def mk_candidate(kind, pos, shift):
    return CornerCandidate(
        kind=kind, cell=(0, 0), pos=Point(*pos), score=1.0, category=0, shift=shift
    )


def test_decode_center_log_tl():
    c = mk_candidate("tl", (8.0, 8.0), (math.log(4.0), math.log(8.0)))
    ct = decode_center(c, stride=4, mode="log")
    assert (ct.x, ct.y) == pytest.approx((24.0, 40.0), abs=1e-9)


def test_decode_center_log_br():
    c = mk_candidate("br", (40.0, 72.0), (math.log(4.0), math.log(8.0)))
    ct = decode_center(c, stride=4, mode="log")
    assert (ct.x, ct.y) == pytest.approx((24.0, 40.0), abs=1e-9)


def test_decode_center_zero_log_shift_moves_one_stride():
    c = mk_candidate("tl", (10.0, 10.0), (0.0, 0.0))
    ct = decode_center(c, stride=4)
    assert (ct.x, ct.y) == (14.0, 14.0)  # exp(0) = 1 cell, exactly


def test_decode_center_linear_signed():
    tl = mk_candidate("tl", (8.0, 8.0), (4.0, 8.0))
    assert decode_center(tl, stride=4, mode="linear") == Point(24.0, 40.0)
    br = mk_candidate("br", (40.0, 72.0), (-4.0, -8.0))
    assert decode_center(br, stride=4, mode="linear") == Point(24.0, 40.0)


def test_decode_center_bad_mode():
    with pytest.raises(ValueError):
        decode_center(mk_candidate("tl", (0, 0), (0.0, 0.0)), mode="polar")


def test_encode_decode_center_round_trip(rng):
    # log-encoded targets decoded from either corner land on the box center
    for _ in range(25):
        x0, y0 = rng.uniform(0, 40, 2)
        w, h = rng.uniform(3, 70, 2)
        box = BBox(x0, y0, x0 + w, y0 + h)
        scene = Scene(128, 128, (SceneObject(box, 0),))
        tl_m, br_m = maps_for(scene, 2)
        tl, br = decode_corners(tl_m, br_m, k=1)
        for cand in (tl[0], br[0]):
            ct = decode_center(cand, stride=4, mode="log")
            assert ct.x == pytest.approx((x0 + x0 + w) / 2, abs=1e-4)
            assert ct.y == pytest.approx((y0 + y0 + h) / 2, abs=1e-4)
