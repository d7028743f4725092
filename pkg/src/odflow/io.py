"""Binary matrix container and checkpoint file formats.

Matrix files: an 8-byte magic ``b"ODFMAT\\x00"`` plus version byte, then
two little-endian uint32 (rows, cols), then the row-major float64 payload.

Checkpoints: magic ``b"ODFCKPT1"``, a little-endian uint64 manifest length,
the UTF-8 JSON manifest, then the float64 payload. The manifest carries a
``tensors`` list of ``{name, shape, offset}`` records (offset in bytes from
the start of the payload) plus arbitrary metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MATRIX_MAGIC = b"ODFMAT\x00"
MATRIX_VERSION = 1
CKPT_MAGIC = b"ODFCKPT1"


class FormatError(ValueError):
    pass


def encode_matrix(values: np.ndarray) -> bytes:
    a = np.ascontiguousarray(values, dtype="<f8")
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise FormatError("matrix container holds 1-D or 2-D arrays only")
    header = MATRIX_MAGIC + bytes([MATRIX_VERSION]) + struct.pack("<II", *a.shape)
    return header + a.tobytes()


def decode_matrix(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:7] != MATRIX_MAGIC:
        raise FormatError("not an odflow matrix file")
    if blob[7] != MATRIX_VERSION:
        raise FormatError(f"unsupported matrix version {blob[7]}")
    rows, cols = struct.unpack("<II", blob[8:16])
    payload = blob[16:]
    if len(payload) != rows * cols * 8:
        raise FormatError("payload size does not match header")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_matrix(path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_matrix(values))


def read_matrix(path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: dict) -> None:
    records = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        # asarray keeps 0-d scalars 0-d; tobytes is always C order
        a = np.asarray(arr, dtype="<f8")
        records.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = dict(meta)
    manifest["tensors"] = records
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise FormatError("not an odflow checkpoint")
    (n,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + n].decode("utf-8"))
    payload = memoryview(blob)[16 + n :]
    tensors = {}
    for rec in manifest.pop("tensors"):
        count = int(np.prod(rec["shape"], dtype=np.int64))
        start = rec["offset"]
        arr = np.frombuffer(payload[start : start + 8 * count], dtype="<f8")
        tensors[rec["name"]] = arr.reshape(rec["shape"]).astype(np.float64)
    return tensors, manifest
