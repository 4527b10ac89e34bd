"""Checkpoint files: named float64 arrays in one binary blob plus a JSON manifest.

A checkpoint `foo` is two files: `foo.bin` (raw little-endian float64 values,
arrays back to back in manifest order) and `foo.json` (array names, shapes,
offsets, and a free-form `meta` dict).  Arrays load back C-ordered.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import LoadError

FORMAT_TAG = "textgraph-checkpoint-v1"


def _stem(path) -> Path:
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write arrays (name -> ndarray) and meta; returns the manifest path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            fh.write(arr.astype("<f8", copy=False).tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
    manifest = {"format": FORMAT_TAG, "meta": meta or {}, "arrays": entries}
    manifest_path = stem.with_suffix(".json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta).  Raises LoadError on missing or inconsistent files."""
    stem = _stem(path)
    manifest_path = stem.with_suffix(".json")
    bin_path = stem.with_suffix(".bin")
    if not manifest_path.exists():
        raise LoadError(f"{manifest_path}: not found")
    if not bin_path.exists():
        raise LoadError(f"{bin_path}: not found")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as e:
            raise LoadError(f"{manifest_path}: bad JSON ({e})") from e
    if manifest.get("format") != FORMAT_TAG:
        raise LoadError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    flat = np.fromfile(bin_path, dtype="<f8")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        chunk = flat[entry["offset"]:entry["offset"] + n]
        if chunk.size != n:
            raise LoadError(f"{bin_path}: array '{entry['name']}' truncated")
        arrays[entry["name"]] = chunk.astype(np.float64).reshape(shape)
    expected = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in manifest["arrays"])
    if flat.size != expected:
        raise LoadError(f"{bin_path}: size {flat.size} values, manifest expects {expected}")
    return arrays, manifest.get("meta", {})
