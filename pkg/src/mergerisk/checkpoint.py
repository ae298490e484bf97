"""Versioned checkpoint container for flat parameter vectors.

Binary layout: magic "MXB1", little-endian u32 entry count, then one record
per layout entry (u16 name length, utf-8 name, u8 ndim, ndim u32 dims,
u64 element offset into the payload), then the payload as little-endian f64.
A JSON sidecar (same path + ".json") carries architecture id, seed and
training provenance.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nets import Layout, ParameterVector

MAGIC = b"MXB1"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path: str | Path, params: ParameterVector,
                    sidecar: dict | None = None) -> None:
    path = Path(path)
    records = []
    off = 0
    for name, shape in params.layout:
        nb = name.encode("utf-8")
        records.append(struct.pack("<H", len(nb)) + nb
                       + struct.pack("<B", len(shape))
                       + struct.pack(f"<{len(shape)}I", *shape)
                       + struct.pack("<Q", off))
        off += int(np.prod(shape))
    payload = params.data.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(records)))
        for rec in records:
            fh.write(rec)
        fh.write(payload)
    if sidecar is not None:
        with open(str(path) + ".json", "w") as fh:
            json.dump(sidecar, fh, indent=1, sort_keys=True)


def load_checkpoint(path: str | Path) -> tuple[ParameterVector, dict | None]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    entries: list[tuple[str, tuple[int, ...], int]] = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        (off,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        entries.append((name, tuple(int(d) for d in dims), off))
    total = sum(int(np.prod(s)) for _, s, _ in entries)
    payload = raw[pos:]
    if len(payload) != total * 8:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, layout needs {total * 8}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    # offsets must tile the payload contiguously in order
    expect = 0
    for name, shape, off in entries:
        if off != expect:
            raise CheckpointError(f"{path}: entry {name!r} offset {off}, expected {expect}")
        expect += int(np.prod(shape))
    layout: Layout = tuple((name, shape) for name, shape, _ in entries)
    sidecar = None
    side_path = Path(str(path) + ".json")
    if side_path.exists():
        sidecar = json.loads(side_path.read_text())
    return ParameterVector(flat, layout), sidecar
