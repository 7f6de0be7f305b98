"""Binary artifact formats: ``.f32m`` arrays and checkpoint containers.

``.f32m`` holds one 2-D float32 array: an 8-byte header of two
little-endian uint32 (rows, cols) followed by rows*cols little-endian
float32 values in row-major order.

A checkpoint is a single file: magic ``DV2S`` + uint32 format version,
a length-prefixed UTF-8 JSON metadata block (stage name, config hash,
seed, step count, recorded accuracies, ...), then a count of parameter
entries, each stored as a length-prefixed name, a uint32 ndim, the
uint32 dims, and the little-endian float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import PersistenceError, ValidationError

_CKPT_MAGIC = b"DV2S"
_CKPT_VERSION = 1


def write_f32m(path, arr) -> None:
    """Write a 2-D array as ``.f32m``."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValidationError(f"f32m arrays are 2-D, got shape {arr.shape}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(data.tobytes())
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def read_f32m(path) -> np.ndarray:
    """Read an ``.f32m`` file back into a float32 array of shape (rows, cols)."""
    try:
        with open(path, "rb") as fh:
            header = fh.read(8)
            if len(header) != 8:
                raise PersistenceError(f"truncated f32m header in {path}")
            rows, cols = struct.unpack("<II", header)
            payload = fh.read(4 * rows * cols)
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    if len(payload) != 4 * rows * cols:
        raise PersistenceError(f"truncated f32m payload in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()


def save_checkpoint(path, stage: str, metadata: dict, params: dict) -> None:
    """Write a checkpoint container.

    ``params`` maps parameter names to float32-coercible numpy arrays;
    entries are written in sorted name order so identical state always
    produces identical bytes.
    """
    meta = dict(metadata)
    meta["stage"] = stage
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<I", _CKPT_VERSION))
            fh.write(struct.pack("<I", len(meta_blob)))
            fh.write(meta_blob)
            fh.write(struct.pack("<I", len(params)))
            for name in sorted(params):
                arr = np.ascontiguousarray(params[name], dtype="<f4")
                name_b = name.encode("utf-8")
                fh.write(struct.pack("<H", len(name_b)))
                fh.write(name_b)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Read a checkpoint container, returning (metadata, params)."""
    path = Path(path)
    if not path.exists():
        raise PersistenceError(f"checkpoint not found: {path}")
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != _CKPT_MAGIC:
        raise PersistenceError(f"{path} is not a checkpoint container")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != _CKPT_VERSION:
        raise PersistenceError(f"unsupported checkpoint version {version} in {path}")
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    metadata = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (n_params,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            .reshape(shape)
            .copy()
        )
        off += 4 * count
    return metadata, params
