"""MTRN1 checkpoint files.

Layout: ``b"MTRN1"``, a uint32 manifest length, the JSON manifest (tensor
names, shapes, dtypes, byte offsets, config echo, free-form extras), then
little-endian float32 payloads.
"""
from __future__ import annotations

import numpy as np

from .. import container
from ..errors import CorruptFile, ShapeMismatch

MAGIC = b"MTRN1"


def save(path, params: dict, config: dict, extra: dict | None = None, moments: dict | None = None) -> None:
    """Write parameters (and optional optimizer moments) as float32."""
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float32) for k, v in params.items()}
    for kind, table in (moments or {}).items():
        for k, v in table.items():
            arrays[f"{kind}/{k}"] = np.asarray(v, dtype=np.float32)
    manifest = {"format": "MTRN1", "version": 1, "config": config, "extra": extra or {}}
    container.write(path, MAGIC, manifest, arrays)


def load(path, expected_shapes: dict | None = None) -> tuple[dict, dict, dict, dict]:
    """Return ``(config, params, moments, extra)``; validates shapes when given."""
    manifest, arrays = container.read(path, MAGIC)
    if manifest.get("format") != "MTRN1":
        raise CorruptFile("not an MTRN1 checkpoint")
    params, moments = {}, {}
    for name, arr in arrays.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
        else:
            moments.setdefault(kind, {})[key] = arr
    if expected_shapes is not None:
        check_shapes(params, expected_shapes)
    return manifest["config"], params, moments, manifest.get("extra", {})


def check_shapes(params: dict, expected_shapes: dict) -> None:
    if set(expected_shapes) != set(params):
        missing = sorted(set(expected_shapes) - set(params))
        extra_names = sorted(set(params) - set(expected_shapes))
        raise ShapeMismatch(f"checkpoint tensors differ from config: missing={missing[:5]} extra={extra_names[:5]}")
    for k, shape in expected_shapes.items():
        if tuple(params[k].shape) != tuple(shape):
            raise ShapeMismatch(f"{k}: checkpoint {params[k].shape} vs config {tuple(shape)}")
