"""Versioned array container used for checkpoints and embedding archives.

Layout: 8-byte magic "TDSVKIT1", a little-endian uint64 header length, a
JSON header (format version, config snapshot, metadata, and an array index
mapping name -> dtype/shape/offset), then the raw little-endian payload.
Saves are canonical (sorted keys, fixed offsets), so load(save(x)) and
save(load(p)) are byte-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TDSVKIT1"
FORMAT_VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], config: dict | None = None,
                meta: dict | None = None):
    index = {}
    offset = 0
    names = sorted(arrays)
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        blob = arr.astype(dt, copy=False).tobytes()
        index[name] = {
            "dtype": dt.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config or {},
        "meta": meta or {},
        "arrays": index,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(hdr).to_bytes(8, "little"))
        fh.write(hdr)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path):
    """Returns (arrays dict, header dict).  Validates magic, version and
    that array extents are non-overlapping and inside the payload."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic (not a TDSVKIT1 container)")
    hlen = int.from_bytes(blob[8:16], "little")
    if 16 + hlen > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = blob[16 + hlen :]
    spans = []
    arrays = {}
    for name, info in header.get("arrays", {}).items():
        start, n = info["offset"], info["nbytes"]
        if start < 0 or start + n > len(payload):
            raise FormatError(f"{path}: array {name} outside payload")
        spans.append((start, start + n, name))
        arr = np.frombuffer(payload[start : start + n], dtype=np.dtype(info["dtype"]))
        arrays[name] = arr.reshape(info["shape"]).copy()
    spans.sort()
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise FormatError(f"{path}: arrays {n1} and {n2} overlap")
    return arrays, header
