"""Binary tensor file format used by the CLI.

Layout, in order:
  - magic bytes b"CTSR1\\n"
  - unsigned 32-bit little-endian header length
  - UTF-8 JSON header, e.g. {"dtype":"f32","shape":[C,H,W]}
  - raw little-endian 32-bit floats, row-major

Only rank-3 f32 tensors are supported; that is the one carrier type the
pipeline needs (heatmaps, offset fields, shift maps).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTSR1\n"


class TensorFormatError(ValueError):
    """Raised when a tensor file does not follow the CTSR layout."""


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 3:
        raise TensorFormatError(f"expected rank-3 tensor, got shape {arr.shape}")
    header = json.dumps(
        {"dtype": "f32", "shape": list(arr.shape)}, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise TensorFormatError(f"{path}: bad magic, not a CTSR tensor file")
    off = len(MAGIC)
    if len(blob) < off + 4:
        raise TensorFormatError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise TensorFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: unreadable header: {exc}") from exc
    off += hlen
    if header.get("dtype") != "f32":
        raise TensorFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(d, int) and d >= 0 for d in shape)
    ):
        raise TensorFormatError(f"{path}: bad shape {shape!r}")
    count = int(np.prod(shape, dtype=np.int64))
    payload = blob[off:]
    if len(payload) != 4 * count:
        raise TensorFormatError(
            f"{path}: payload is {len(payload)} bytes, shape {shape} needs {4 * count}"
        )
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.reshape(shape).copy()
