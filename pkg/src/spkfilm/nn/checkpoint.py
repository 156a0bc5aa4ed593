"""ATCK checkpoint files.

Layout (little-endian): magic ``ATCK``, u32 version, then blobs until EOF.
Each blob is u32 name length, UTF-8 name, u32 rank, rank x u32 dims and
prod(dims) float32 values. The resolved run configuration travels as a
blob named ``__runconfig__`` whose values are the UTF-8 bytes of the
config text.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"ATCK"
VERSION = 1
CONFIG_BLOB = "__runconfig__"


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str | None = None) -> None:
    blobs = dict(tensors)
    if config_text is not None:
        blobs[CONFIG_BLOB] = np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in blobs.items():
            arr = np.asarray(arr)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str | None]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos, tensors, config = 8, {}, None
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(raw):
                raise FormatError(f"{path}: truncated blob {name!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            if name == CONFIG_BLOB:
                config = arr.astype(np.uint8).tobytes().decode("utf-8")
            else:
                tensors[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    return tensors, config
