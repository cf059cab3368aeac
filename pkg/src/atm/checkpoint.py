"""Versioned binary checkpoint container.

Layout: the magic string ``ATMCKPT1``, a little-endian uint32 manifest
length, a UTF-8 JSON manifest, then raw little-endian float32 payloads. The
manifest lists (name, shape, offset) per parameter plus the fully resolved
run config and free-form metadata, so a run is reproducible from its own
artifacts. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ATMCKPT1"


def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    config: dict | None = None, meta: dict | None = None):
    entries = []
    offset = 0
    payloads = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        payloads.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format_version": 1,
        "config": config or {},
        "meta": meta or {},
        "params": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for chunk in payloads:
            f.write(chunk)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Returns (arrays, config, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise FormatError(f"checkpoint too small to contain a header: {path}")
    if raw[:len(MAGIC)] != MAGIC:
        raise FormatError(f"bad magic in checkpoint {path}: expected {MAGIC!r}")
    (blob_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        manifest = json.loads(raw[start:start + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest in checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != 1:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    payload = raw[start + blob_len:]
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        if off + count * 4 > len(payload):
            raise FormatError(f"payload truncated at parameter {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            payload, dtype="<f4", count=count, offset=off).reshape(shape).copy()
    return arrays, manifest.get("config", {}), manifest.get("meta", {})
