"""Single-file binary checkpoint.

Layout (all integers little-endian)::

    bytes 0-7    magic  b"DALCKPT\\0"
    bytes 8-15   uint64 header length N
    bytes 16..   N bytes of UTF-8 JSON, keys sorted
    then         float64 payload, arrays back to back in header order

The JSON header carries ``format_version``, the free-form ``meta`` object
(config, vocab, baselines, epoch, ...) and an ``arrays`` list of
``{"name", "shape", "offset", "count"}`` where ``offset``/``count`` are in
float64 elements relative to the payload start. Files are byte-identical
for identical content, and writes go through a temp file plus rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DALCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version} is not supported "
                              f"(expected {FORMAT_VERSION})")
    payload = np.frombuffer(raw, dtype="<f8", offset=16 + n)
    arrays = {}
    for e in header["arrays"]:
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]
