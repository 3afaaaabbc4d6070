"""Flat binary container for named float64 arrays.

Layout (all integers little-endian)::

    magic      4 bytes   b"CMNG"
    version    uint16
    hlen       uint32    length of the JSON header in bytes
    header     hlen bytes UTF-8 JSON: {"arrays": [{"name", "shape"}, ...], "meta": {...}}
    payload    float64 little-endian, arrays concatenated in header order, row-major

Every write is paired with a ``<file>.json`` sidecar manifest holding the
same metadata plus array shapes, so a checkpoint can be inspected without
parsing the binary part.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import DataError
from .nn import MlpParams

MAGIC = b"CMNG"
FORMAT_VERSION = 1


def save_arrays(path, arrays, meta=None):
    """Write ``{name: array}`` plus JSON-able ``meta``; returns the sha256 of the file."""
    path = Path(path)
    entries = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    path.write_bytes(blob)
    sidecar = {"format": "cmonge-arrays", "version": FORMAT_VERSION, "arrays": entries, "meta": meta or {}}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return hashlib.sha256(blob).hexdigest()


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns ``(arrays, meta)``."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a parameter container (bad magic)")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    header = json.loads(blob[10 : 10 + hlen])
    offset = 10 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise DataError(f"{path}: truncated payload at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} trailing bytes")
    return arrays, header["meta"]


def mlp_to_arrays(params, prefix):
    out = {}
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.{k}.weight"] = W
        out[f"{prefix}.{k}.bias"] = b
    return out


def mlp_from_arrays(arrays, prefix, activation="gelu"):
    weights, biases = [], []
    k = 0
    while f"{prefix}.{k}.weight" in arrays:
        weights.append(arrays[f"{prefix}.{k}.weight"])
        biases.append(arrays[f"{prefix}.{k}.bias"])
        k += 1
    if not weights:
        raise DataError(f"no layers named {prefix!r} in container")
    return MlpParams(weights, biases, activation)


def save_mlp(path, params, seed=None):
    meta = {"kind": "mlp", "sizes": params.sizes, "activation": params.activation, "seed": seed}
    return save_arrays(path, mlp_to_arrays(params, "mlp"), meta)


def load_mlp(path):
    arrays, meta = load_arrays(path)
    return mlp_from_arrays(arrays, "mlp", meta.get("activation", "gelu"))


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
