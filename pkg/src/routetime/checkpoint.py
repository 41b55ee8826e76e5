"""Versioned binary container for named float64 parameters.

Byte layout (documented contract, little-endian throughout):

    magic line   b"RTCK1\\n"
    header line  UTF-8 JSON + b"\\n": {"version": 1, "meta": {...},
                 "params": [{"name": str, "shape": [int, ...]}, ...]}
    payload      for each param, in header order, the row-major float64
                 values as raw little-endian bytes (8 bytes per value)

Identical params and meta always serialise to identical bytes, so
checkpoint files can be compared bit-for-bit.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ParseError, ShapeError

MAGIC = b"RTCK1\n"


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = sorted(params)
    header = {
        "version": 1,
        "meta": meta or {},
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            arr = np.ascontiguousarray(params[n], dtype="<f8")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (params, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ParseError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: unreadable checkpoint header: {exc}") from exc
        if header.get("version") != 1:
            raise ParseError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ParseError(f"{path}: truncated payload for '{entry['name']}'")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after declared parameters")
    return params, header.get("meta", {})


def audit_shapes(params: dict[str, np.ndarray], expected: dict[str, tuple]) -> None:
    """Raise if the loaded parameter set does not match the expected shapes."""
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ShapeError(f"parameter set mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise ShapeError(f"parameter '{name}' has shape {params[name].shape}, "
                             f"expected {tuple(shape)}")
