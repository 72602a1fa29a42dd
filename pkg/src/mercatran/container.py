"""Binary container: magic bytes, a JSON manifest, then raw little-endian arrays.

Layout::

    magic (5 bytes) | manifest length (uint32 LE) | manifest (UTF-8 JSON) | payload

The manifest's ``tensors`` list gives each array's name, dtype, shape and byte
offset relative to the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import CorruptFile

_LEN = struct.Struct("<I")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4", "int64": "<i8", "uint8": "u1"}


def pack(magic: bytes, manifest: dict, arrays: dict) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        tensors.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    full = dict(manifest)
    full["tensors"] = tensors
    head = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([magic, _LEN.pack(len(head)), head] + chunks)


def unpack(magic: bytes, blob: bytes) -> tuple[dict, dict]:
    if blob[: len(magic)] != magic:
        raise CorruptFile(f"bad magic, expected {magic!r}")
    pos = len(magic)
    if len(blob) < pos + _LEN.size:
        raise CorruptFile("truncated header")
    (hlen,) = _LEN.unpack_from(blob, pos)
    pos += _LEN.size
    if len(blob) < pos + hlen:
        raise CorruptFile("truncated manifest")
    try:
        manifest = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile("unreadable manifest") from exc
    pos += hlen
    payload = memoryview(blob)[pos:]
    arrays = {}
    total = 0
    for t in manifest.get("tensors", []):
        dt = np.dtype(_DTYPES[t["dtype"]])
        count = int(np.prod(t["shape"], dtype=np.int64))
        if count * dt.itemsize != t["nbytes"] or t["offset"] + t["nbytes"] > len(payload):
            raise CorruptFile(f"tensor {t['name']} exceeds payload")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=t["offset"]).reshape(t["shape"])
        arrays[t["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        total += t["nbytes"]
    if total != len(payload):
        raise CorruptFile("payload length does not match manifest")
    return manifest, arrays


def write(path, magic: bytes, manifest: dict, arrays: dict) -> None:
    blob = pack(magic, manifest, arrays)
    atomic_write_bytes(path, blob)


def read(path, magic: bytes) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return unpack(magic, fh.read())


def atomic_write_bytes(path, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
