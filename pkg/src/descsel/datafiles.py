"""On-disk formats: .tds descriptor grids, dataset directories, checkpoints.

A .tds file is a single descriptor grid:

    bytes 0..3   magic b"TDS1"
    bytes 4..15  little-endian uint32 h, w, d
    payload      h*w*d little-endian float32, row-major

A dataset directory holds classes.json (list of class names, index = class id)
and one subdirectory per class containing <sample>.tds files.  An optional
masks.json maps "<class>/<sample>" to a flat 0/1 list of length h*w marking
which descriptors lie on the signal region; it is diagnostic only and never
consumed by training.

Checkpoints are JSON: arrays stored as base64 of their little-endian bytes
with dtype and shape alongside, so files are portable and diffable.
"""

from __future__ import annotations

import base64
import json
import os
import struct

import numpy as np

from .descriptors import DescriptorSet, LabeledSample
from .errors import DataFormatError

TDS_MAGIC = b"TDS1"
_HEADER = struct.Struct("<III")


def write_tds(path: str, grid: np.ndarray) -> None:
    """Write an (h, w, d) float grid as a .tds file."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise DataFormatError(f"descriptor grid must be rank 3, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise DataFormatError("descriptor grid contains non-finite values")
    h, w, d = grid.shape
    payload = np.ascontiguousarray(grid, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TDS_MAGIC)
        f.write(_HEADER.pack(h, w, d))
        f.write(payload.tobytes())


def read_tds(path: str) -> np.ndarray:
    """Read a .tds file back to an (h, w, d) float32 grid."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != TDS_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}")
    h, w, d = _HEADER.unpack_from(raw, 4)
    if h < 1 or w < 1 or d < 1:
        raise DataFormatError(f"{path}: degenerate dimensions {(h, w, d)}")
    expected = 16 + 4 * h * w * d
    if len(raw) != expected:
        raise DataFormatError(f"{path}: payload is {len(raw) - 16} bytes, expected {expected - 16}")
    grid = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, d)
    if not np.all(np.isfinite(grid)):
        raise DataFormatError(f"{path}: non-finite values in payload")
    return grid.astype(np.float32)


def read_tds_set(path: str) -> DescriptorSet:
    grid = read_tds(path)
    h, w, d = grid.shape
    return DescriptorSet(grid.reshape(h * w, d), h, w)


def save_dataset(root: str, samples_by_class: dict, masks: dict = None,
                 force: bool = False) -> None:
    """Write {class_name: [grid, ...]} as a dataset directory."""
    if os.path.exists(root) and os.listdir(root) and not force:
        raise DataFormatError(f"{root} exists and is not empty (use force to overwrite)")
    os.makedirs(root, exist_ok=True)
    names = sorted(samples_by_class)
    with open(os.path.join(root, "classes.json"), "w") as f:
        json.dump(names, f, indent=0, sort_keys=True)
        f.write("\n")
    for name in names:
        cdir = os.path.join(root, name)
        os.makedirs(cdir, exist_ok=True)
        for i, grid in enumerate(samples_by_class[name]):
            write_tds(os.path.join(cdir, f"{i:04d}.tds"), grid)
    if masks:
        serializable = {key: np.asarray(v).astype(int).ravel().tolist()
                        for key, v in masks.items()}
        with open(os.path.join(root, "masks.json"), "w") as f:
            json.dump(serializable, f, sort_keys=True)
            f.write("\n")


def load_dataset(root: str):
    """Load a dataset directory -> (samples, class_names).

    samples is a list of LabeledSample grouped by class id then sample order;
    class ids follow the order recorded in classes.json.
    """
    idx_path = os.path.join(root, "classes.json")
    if not os.path.isdir(root):
        raise DataFormatError(f"{root} is not a directory")
    if not os.path.exists(idx_path):
        raise DataFormatError(f"{root}: missing classes.json")
    try:
        with open(idx_path) as f:
            names = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{root}: classes.json is not valid JSON: {e}") from e
    if not isinstance(names, list) or not names or not all(isinstance(n, str) for n in names):
        raise DataFormatError(f"{root}: classes.json must be a non-empty list of names")
    samples = []
    for class_id, name in enumerate(names):
        cdir = os.path.join(root, name)
        if not os.path.isdir(cdir):
            raise DataFormatError(f"{root}: class directory {name!r} missing")
        files = sorted(fn for fn in os.listdir(cdir) if fn.endswith(".tds"))
        if not files:
            raise DataFormatError(f"{root}: class {name!r} has no .tds samples")
        for fn in files:
            ds = read_tds_set(os.path.join(cdir, fn))
            samples.append(LabeledSample(ds, class_id))
    dims = {(s.descriptor_set.height, s.descriptor_set.width, s.descriptor_set.d)
            for s in samples}
    if len(dims) > 1:
        raise DataFormatError(f"{root}: inconsistent grid shapes across samples: {sorted(dims)}")
    return samples, names


def load_masks(root: str):
    """Load masks.json if present, else None."""
    path = os.path.join(root, "masks.json")
    if not os.path.exists(path):
        return None
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{root}: masks.json is not valid JSON: {e}") from e
    return {key: np.asarray(v, dtype=bool) for key, v in raw.items()}


def _encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    payload = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
    return {"dtype": str(a.dtype), "shape": list(a.shape),
            "data": base64.b64encode(payload.tobytes()).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    try:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        raw = base64.b64decode(entry["data"])
        a = np.frombuffer(raw, dtype=dtype).reshape(shape)
    except (KeyError, ValueError, TypeError) as e:
        raise DataFormatError(f"malformed checkpoint array entry: {e}") from e
    return a.astype(np.dtype(entry["dtype"]))


def save_checkpoint(path: str, arrays: dict, metadata: dict = None) -> None:
    """Write named arrays plus JSON-serializable metadata."""
    doc = {
        "format": "descsel-checkpoint-v1",
        "metadata": metadata or {},
        "arrays": {name: _encode_array(a) for name, a in sorted(arrays.items())},
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(path: str):
    """Read a checkpoint -> (arrays, metadata)."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: not valid JSON: {e}") from e
    except OSError as e:
        raise DataFormatError(f"{path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != "descsel-checkpoint-v1":
        raise DataFormatError(f"{path}: not a descsel checkpoint")
    arrays = {name: _decode_array(entry) for name, entry in doc.get("arrays", {}).items()}
    return arrays, doc.get("metadata", {})
