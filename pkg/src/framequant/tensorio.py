"""On-disk formats: PMQT binary tensors, JSON bounds, JSONL loss logs.

All writes go through a temp file and an atomic rename, so interrupted
runs never leave corrupt outputs. Tensor payloads are little-endian
float32; the in-memory side is float64 and converts at this boundary.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .distill import LossReport
from .quantize import FrameQuantScheme, QuantParams
from .tensor import Tensor

__all__ = [
    "TensorFormatError",
    "BoundsFormatError",
    "read_tensor",
    "write_tensor",
    "read_bounds",
    "write_bounds",
    "read_loss_log",
    "write_loss_log",
]

MAGIC = b"PMQT"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIBBH")  # magic, version, dtype, ndim, reserved


class TensorFormatError(ValueError):
    pass


class BoundsFormatError(ValueError):
    pass


def _atomic_write_bytes(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".pmq-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path: str, t: Tensor) -> None:
    dims = t.shape
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, len(dims), 0)
    dims_bytes = struct.pack(f"<{len(dims)}Q", *dims)
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    _atomic_write_bytes(path, header + dims_bytes + payload)


def read_tensor(path: str) -> Tensor:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise TensorFormatError("size mismatch: truncated header")
    magic, version, dtype, ndim, reserved = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TensorFormatError("not a PMQT file")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    dims_end = _HEADER.size + 8 * ndim
    if len(blob) < dims_end:
        raise TensorFormatError("size mismatch: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", blob, _HEADER.size)
    count = 1
    for d in dims:
        if d == 0:
            raise TensorFormatError("zero-extent dimension")
        count *= d
    expected = dims_end + 4 * count
    if len(blob) != expected:
        raise TensorFormatError(
            f"size mismatch: expected {expected} bytes, got {len(blob)}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=dims_end, count=count)
    return Tensor(values.astype(np.float64).reshape(dims))


def write_bounds(path: str, schemes: dict[str, FrameQuantScheme]) -> None:
    doc = {
        "version": 1,
        "sites": [
            {
                "name": s.site_name,
                "bits": s.bits,
                "per_frame": s.per_frame,
                "bounds": [{"lb": p.lb, "ub": p.ub} for p in s.params],
            }
            for s in schemes.values()
        ],
    }
    _atomic_write_bytes(path, (json.dumps(doc, indent=2) + "\n").encode())


def read_bounds(path: str) -> dict[str, FrameQuantScheme]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise BoundsFormatError(f"invalid bounds file: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise BoundsFormatError("unsupported bounds file version")
    sites = doc.get("sites")
    if not isinstance(sites, list):
        raise BoundsFormatError("bounds file missing 'sites' list")
    out: dict[str, FrameQuantScheme] = {}
    for entry in sites:
        try:
            name = entry["name"]
            bits = int(entry["bits"])
            per_frame = bool(entry["per_frame"])
            bounds = entry["bounds"]
            params = tuple(
                QuantParams(lb=float(b["lb"]), ub=float(b["ub"]), bits=bits)
                for b in bounds
            )
            scheme = FrameQuantScheme(
                site_name=name, per_frame=per_frame, params=params
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BoundsFormatError(f"invalid site entry: {exc}") from None
        if name in out:
            raise BoundsFormatError(f"duplicate site {name!r}")
        out[name] = scheme
    return out


def write_loss_log(path: str, reports) -> None:
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in reports]
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode() if lines else b"")


def read_loss_log(path: str) -> list[LossReport]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(LossReport.from_dict(json.loads(line)))
    return out
