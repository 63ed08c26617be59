"""Timestamp-free array serialization: JSON shape manifest + raw binary blob.

Zip-based formats embed modification times, which breaks byte-identical
reruns; this format holds nothing but shapes, dtypes and the data itself.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import IoFailure


def save_arrays(path_stem, arrays: dict) -> tuple[Path, Path]:
    """Write a flat name -> array mapping as <stem>.manifest.json + <stem>.bin."""
    stem = Path(path_stem)
    manifest = {}
    blob = bytearray()
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        shape = arr.shape  # before ascontiguousarray, which promotes 0-d to 1-d
        dtype = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes()
        manifest[name] = {"shape": list(shape), "dtype": dtype.str,
                          "offset": offset}
        blob.extend(raw)
        offset += len(raw)
    bin_path = stem.with_suffix(".bin")
    man_path = stem.with_suffix(".manifest.json")
    bin_path.write_bytes(bytes(blob))
    man_path.write_text(json.dumps({"format": "plumekit.arrays/1",
                                    "entries": manifest},
                                   indent=1, sort_keys=True) + "\n")
    return man_path, bin_path


def load_arrays(path_stem) -> dict:
    stem = Path(path_stem)
    try:
        meta = json.loads(stem.with_suffix(".manifest.json").read_text())
        raw = stem.with_suffix(".bin").read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if meta.get("format") != "plumekit.arrays/1":
        raise IoFailure(f"unknown array container format {meta.get('format')!r}")
    out = {}
    for name, entry in meta["entries"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(raw, dtype=entry["dtype"], count=count,
                                  offset=entry["offset"]).reshape(shape).copy()
    return out
