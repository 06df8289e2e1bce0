"""Deterministic binary artifact container and parameter fingerprints.

Layout (all integers little-endian):

    bytes 0:4    magic ``XLRK``
    bytes 4:8    uint32 format version (currently 1)
    bytes 8:16   uint64 header byte length H
    bytes 16:16+H  UTF-8 JSON header with sorted keys:
                   {"kind": str, "meta": {...}, "arrays": [{name, dtype, shape}]}
    remainder    each array's raw C-order bytes, in manifest order

The container holds no timestamps, so identical content always yields
byte-identical files.  Writes go through a temp file and ``os.replace``
so readers never observe partial output.
"""

import hashlib
import json
import os
import struct

import numpy as np

from .errors import ContractError

MAGIC = b"XLRK"
VERSION = 1


def canonical_json(obj) -> str:
    """Stable serialization used for headers and fingerprints."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_artifact(path, kind: str, meta: dict, arrays: dict) -> None:
    """Write named float64/int64 arrays plus a JSON meta block atomically."""
    manifest = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        )
        blobs.append(arr.tobytes())
    header = canonical_json({"kind": kind, "meta": meta, "arrays": manifest}).encode()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def read_artifact(path, expect_kind: str = None):
    """Read a container; returns (kind, meta, {name: array})."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not an artifact file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise ContractError(f"{path}: unsupported artifact version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ContractError(f"{path}: expected a {expect_kind} artifact, found {kind}")
    arrays = {}
    off = 16 + hlen
    for item in header["arrays"]:
        dt = np.dtype(item["dtype"])
        n = int(np.prod(item["shape"], dtype=np.int64)) if item["shape"] else 1
        nbytes = n * dt.itemsize
        arr = np.frombuffer(raw[off : off + nbytes], dtype=dt).reshape(item["shape"])
        arrays[item["name"]] = arr.copy()  # own, writable memory
        off += nbytes
    if off != len(raw):
        raise ContractError(f"{path}: trailing bytes after array payload")
    return kind, header["meta"], arrays


def fingerprint(config_meta: dict, vocab, theta: np.ndarray) -> str:
    """16-hex-char digest binding a parameter vector to its config and vocab."""
    h = hashlib.sha256()
    h.update(canonical_json(config_meta).encode())
    h.update(b"\0")
    h.update(canonical_json(list(vocab)).encode())
    h.update(b"\0")
    h.update(np.ascontiguousarray(theta, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]
