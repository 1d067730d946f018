import json
import struct

import numpy as np
import pytest

from cornermatch.tensorio import MAGIC, TensorFormatError, load_tensor, save_tensor


def test_round_trip(tmp_path, rng):
    arr = rng.standard_normal((3, 5, 7)).astype(np.float32)
    path = tmp_path / "t.ctsr"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.shape == (3, 5, 7)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_round_trip_preserves_exact_bits(tmp_path):
    arr = np.array(
        [[[0.1, -0.0, 1e-38], [3.0e38, 1.0, 2.0]]], dtype=np.float32
    )
    path = tmp_path / "bits.ctsr"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.tobytes() == arr.tobytes()


def test_save_casts_to_f32(tmp_path):
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    path = tmp_path / "c.ctsr"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr.astype(np.float32))


def test_save_rejects_wrong_rank(tmp_path):
    with pytest.raises(TensorFormatError):
        save_tensor(tmp_path / "r.ctsr", np.zeros((4, 4)))
    with pytest.raises(TensorFormatError):
        save_tensor(tmp_path / "r.ctsr", np.zeros((1, 2, 3, 4)))


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ctsr"
    p.write_bytes(b"NOPE12" + b"\x00" * 16)
    with pytest.raises(TensorFormatError, match="magic"):
        load_tensor(p)


def test_load_rejects_truncated_payload(tmp_path, rng):
    p = tmp_path / "trunc.ctsr"
    save_tensor(p, rng.standard_normal((2, 3, 3)).astype(np.float32))
    blob = p.read_bytes()
    p.write_bytes(blob[:-4])
    with pytest.raises(TensorFormatError, match="payload"):
        load_tensor(p)


def test_load_rejects_truncated_header(tmp_path):
    p = tmp_path / "th.ctsr"
    p.write_bytes(MAGIC + struct.pack("<I", 100) + b"{}")
    with pytest.raises(TensorFormatError, match="truncated"):
        load_tensor(p)


def test_load_rejects_wrong_dtype(tmp_path):
    header = json.dumps({"dtype": "f64", "shape": [1, 1, 1]}).encode()
    p = tmp_path / "d.ctsr"
    p.write_bytes(MAGIC + struct.pack("<I", len(header)) + header + b"\x00" * 8)
    with pytest.raises(TensorFormatError, match="dtype"):
        load_tensor(p)


def test_load_rejects_bad_shape(tmp_path):
    for shape in ([4, 4], [1, -1, 4], "nope"):
        header = json.dumps({"dtype": "f32", "shape": shape}).encode()
        p = tmp_path / "s.ctsr"
        p.write_bytes(MAGIC + struct.pack("<I", len(header)) + header)
        with pytest.raises(TensorFormatError, match="shape"):
            load_tensor(p)


def test_load_rejects_garbage_header(tmp_path):
    header = b"not json at all"
    p = tmp_path / "g.ctsr"
    p.write_bytes(MAGIC + struct.pack("<I", len(header)) + header)
    with pytest.raises(TensorFormatError, match="header"):
        load_tensor(p)


def test_loaded_tensor_is_writable(tmp_path):
    p = tmp_path / "w.ctsr"
    save_tensor(p, np.zeros((1, 2, 2), dtype=np.float32))
    back = load_tensor(p)
    back[0, 0, 0] = 5.0  # must not raise: loader returns an owning copy
    assert back[0, 0, 0] == 5.0


def test_zero_sized_tensor(tmp_path):
    p = tmp_path / "z.ctsr"
    save_tensor(p, np.zeros((0, 4, 4), dtype=np.float32))
    back = load_tensor(p)
    assert back.shape == (0, 4, 4)
