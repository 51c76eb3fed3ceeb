"""Tensor container format.

File layout:
  [u64 LE manifest length][manifest JSON utf-8][blob]
where the blob starts with the magic string "RFTF1" followed by the data
area. The manifest carries a format version and a tensor table mapping
name -> {dtype, shape, offset, length}; offsets are relative to the data
area (after the magic), non-overlapping, sorted, and cover it exactly.
Unknown manifest fields are ignored for forward compatibility.

Entries of dtype "packed" hold an opaque serialized PackedTensor; plain
entries are raw little-endian f32/f64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RFTF1"
FORMAT_VERSION = 1
EXTENSION = ".rftf"

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def save_tensors(path, tensors: dict, extra_manifest: dict | None = None):
    """Write named tensors (numpy arrays or raw ``bytes`` for packed entries).

    ``tensors`` maps name -> np.ndarray, or name -> (b"...", shape) for
    opaque packed payloads. Output bytes are a deterministic function of
    the inputs.
    """
    table = {}
    chunks = []
    offset = 0
    for name, value in tensors.items():
        if not name:
            raise ValueError("tensor names must be nonempty")
        if isinstance(value, tuple):
            raw, shape = value
            entry = {"dtype": "packed", "shape": [int(d) for d in shape],
                     "offset": offset, "length": len(raw)}
        else:
            arr = np.asarray(value)
            if arr.dtype not in _DTYPE_NAMES:
                raise ValueError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            dname = _DTYPE_NAMES[arr.dtype]
            raw = np.ascontiguousarray(arr).astype(_DTYPES[dname]).tobytes()
            entry = {"dtype": dname, "shape": list(arr.shape),
                     "offset": offset, "length": len(raw)}
        table[name] = entry
        chunks.append(raw)
        offset += len(raw)

    manifest = {"format_version": FORMAT_VERSION, "tensors": table}
    if extra_manifest:
        manifest.update(extra_manifest)
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        fh.write(MAGIC)
        for raw in chunks:
            fh.write(raw)


def _read_manifest(blob: bytes, path):
    if len(blob) < 8:
        raise FormatError(f"{path}: file too short for a manifest header")
    (mlen,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + mlen + len(MAGIC):
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    magic_at = 8 + mlen
    if blob[magic_at:magic_at + len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: missing {MAGIC!r} magic at blob start")
    return manifest, blob[magic_at + len(MAGIC):]


def load_tensors(path, with_manifest: bool = False):
    """Load a container; packed entries come back as (bytes, shape) tuples.

    Validates the magic, the offset table (sorted, non-overlapping, exact
    coverage) and per-tensor lengths; failures name the offending tensor.
    """
    blob = Path(path).read_bytes()
    manifest, data = _read_manifest(blob, path)
    if "tensors" not in manifest or not isinstance(manifest["tensors"], dict):
        raise FormatError(f"{path}: manifest has no tensor table")

    entries = []
    for name, entry in manifest["tensors"].items():
        try:
            dtype = entry["dtype"]
            shape = tuple(int(d) for d in entry["shape"])
            off = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: tensor {name!r} has a malformed entry: {exc}") from exc
        entries.append((off, length, name, dtype, shape))

    entries.sort()
    cursor = 0
    for off, length, name, dtype, shape in entries:
        if off != cursor:
            kind = "overlapping" if off < cursor else "gapped"
            raise FormatError(f"{path}: tensor {name!r} has {kind} offset {off} (expected {cursor})")
        if dtype in _DTYPES:
            want = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
            if length != want:
                raise FormatError(
                    f"{path}: tensor {name!r} length {length} does not match shape {shape}"
                )
        elif dtype != "packed":
            raise FormatError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
        if off + length > len(data):
            raise FormatError(f"{path}: tensor {name!r} extends past end of blob (truncated file)")
        cursor = off + length
    if cursor != len(data):
        raise FormatError(f"{path}: blob has {len(data) - cursor} unaccounted trailing bytes")

    out = {}
    for off, length, name, dtype, shape in entries:
        raw = data[off:off + length]
        if dtype == "packed":
            out[name] = (raw, shape)
        else:
            out[name] = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape).copy()
    if with_manifest:
        return out, manifest
    return out
