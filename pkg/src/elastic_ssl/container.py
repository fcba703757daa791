"""Versioned binary container for checkpoints and feature dumps.

Layout: 4-byte magic ``ESCF``, little-endian uint32 format version, little-
endian uint64 header length, UTF-8 JSON header, raw payload.  The header
carries a free-form ``meta`` block and a ``tensors`` table mapping each name
to dtype, shape, and payload offset.  Tensors are stored little-endian;
float32 for all learned state, int64 permitted for labels and counters.
Writes are canonical (sorted names, sorted JSON keys), so identical contents
produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ESCF"
FORMAT_VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "i8": np.dtype("<i8")}


class ContainerError(ValueError):
    """Malformed container bytes."""


class ContainerVersionError(ContainerError):
    """Container written by an unknown (newer) format version."""


def _as_array(value) -> np.ndarray:
    array = np.asarray(value)
    if array.dtype == np.float32:
        return array.astype("<f4", copy=False)
    if array.dtype == np.int64:
        return array.astype("<i8", copy=False)
    if np.issubdtype(array.dtype, np.floating):
        return array.astype("<f4")
    if np.issubdtype(array.dtype, np.integer):
        return array.astype("<i8")
    raise ContainerError(f"unsupported dtype {array.dtype}")


def write_container(path: "str | Path", meta: dict, tensors: dict) -> None:
    """Serialize `tensors` (name -> array-like) with a JSON `meta` block."""
    path = Path(path)
    table = {}
    payload_parts = []
    offset = 0
    for name in sorted(tensors):
        array = _as_array(tensors[name])
        if not array.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would silently promote 0-d arrays to 1-d.
            array = np.ascontiguousarray(array)
        raw = array.tobytes()
        table[name] = {
            "dtype": "f4" if array.dtype == np.dtype("<f4") else "i8",
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        payload_parts.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta, "tensors": table}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for part in payload_parts:
            fh.write(part)


def read_container(path: "str | Path") -> tuple[dict, dict]:
    """Read back (meta, tensors); inverse of write_container, bit-exact."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ContainerError(f"{path} is not a container file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version > FORMAT_VERSION:
        raise ContainerVersionError(
            f"{path} uses format version {version}; this build reads <= {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    if header_end > len(blob):
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: bad header: {exc}") from exc
    tensors = {}
    payload = blob[header_end:]
    for name, entry in header["tensors"].items():
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContainerError(f"{path}: unknown dtype {entry['dtype']!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ContainerError(f"{path}: truncated payload for {name!r}")
        array = np.frombuffer(payload[start : start + nbytes], dtype=dtype)
        tensors[name] = array.reshape(entry["shape"]).copy()
    return header["meta"], tensors


def write_feature_dump(path: "str | Path", meta: dict, features: dict) -> None:
    """Store per-image features: keys are (image id, feature name) pairs."""
    tensors = {
        f"{int(image_id):08d}/{feature_name}": value
        for (image_id, feature_name), value in features.items()
    }
    write_container(path, {**meta, "kind": "features"}, tensors)


def read_feature_dump(path: "str | Path") -> tuple[dict, dict]:
    meta, tensors = read_container(path)
    features = {}
    for key, value in tensors.items():
        image_id, _, feature_name = key.partition("/")
        features[(int(image_id), feature_name)] = value
    return meta, features
