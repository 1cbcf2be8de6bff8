"""Flat binary tensor blobs with a JSON sidecar header.

One `<name>.bin` file holds all tensors as little-endian float32, packed
back to back in sorted-name order. `<name>.bin.json` records shapes and
byte offsets plus a free-form `meta` dict. The writer is canonical
(sorted keys, fixed separators), so equal inputs produce byte-identical
files; checkpointing and the freeze-discipline checks rely on this.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InputError

FORMAT_TAG = "foley-bridge-tensors-v1"


def _as_f32(array) -> np.ndarray:
    if hasattr(array, "detach"):  # torch tensor
        array = array.detach().cpu().numpy()
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64), dtype=np.float64)
    return arr.astype("<f4")


def serialize_tensors(tensors: dict, meta: dict | None = None) -> tuple[bytes, str]:
    """Pack tensors into (blob bytes, header json string)."""
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _as_f32(tensors[name])
        raw = arr.tobytes()
        entries[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": FORMAT_TAG,
        "dtype": "float32",
        "byteorder": "little",
        "tensors": entries,
        "meta": meta or {},
    }
    header_str = json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n"
    return b"".join(chunks), header_str


def save_tensors(path: str | Path, tensors: dict, meta: dict | None = None) -> Path:
    """Write `path` (blob) and `path + '.json'` (header). Returns blob path."""
    path = Path(path)
    blob, header = serialize_tensors(tensors, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    Path(str(path) + ".json").write_text(header, encoding="utf-8")
    return path


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a blob written by `save_tensors`. Returns (tensors, meta)."""
    path = Path(path)
    header_path = Path(str(path) + ".json")
    if not path.exists() or not header_path.exists():
        raise InputError(f"tensor blob or header missing: {path}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    if header.get("format") != FORMAT_TAG:
        raise InputError(f"unrecognized tensor blob format in {header_path}")
    raw = path.read_bytes()
    out = {}
    for name, entry in header["tensors"].items():
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(raw[start : start + nbytes], dtype="<f4")
        out[name] = arr.reshape(entry["shape"]).copy()
    return out, header.get("meta", {})


def tensor_names(path: str | Path) -> list[str]:
    header_path = Path(str(path) + ".json")
    if not header_path.exists():
        raise InputError(f"tensor header missing: {header_path}")
    header = json.loads(header_path.read_text(encoding="utf-8"))
    return sorted(header["tensors"])
