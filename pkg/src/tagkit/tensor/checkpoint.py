"""Binary checkpoint format.

Layout: ``b"TAGM"``, version (u32), then records until EOF, each being
name length (u32), UTF-8 name, rank (u32), rank x u64 dims and the
row-major payload as little-endian f64.  String tables are stored as a
rank-1 record whose payload values are the UTF-8 bytes of the
strings, each terminated by a newline.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TAGM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_strings(strings: list[str]) -> np.ndarray:
    for s in strings:
        if "\n" in s:
            raise CheckpointError(f"string table entry contains newline: {s!r}")
    return np.frombuffer("".join(s + "\n" for s in strings).encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_strings(arr: np.ndarray) -> list[str]:
    raw = bytes(arr.astype(np.uint8).tolist()).decode("utf-8")
    if raw and not raw.endswith("\n"):
        raise CheckpointError("unterminated string table")
    return raw.split("\n")[:-1]


def dumps(records: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in records.items():
        arr = np.asarray(arr, dtype=np.float64)
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (klen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + klen].decode("utf-8")
            pos += klen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save(path, records: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(records))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
