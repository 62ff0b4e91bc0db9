"""Single-file checkpoint container.

Layout (all little-endian):

    magic   4 bytes  b"RMOE"
    version u32
    crc32   u32      checksum over the tensor payload
    hlen    u64      header length in bytes
    header  hlen     UTF-8 JSON: {"config": {...}, "tensors": [{name, shape}]}
    payload          tensor values, float64, concatenated in header order

Tensors are written in sorted-name order, so identical parameters produce
identical files byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"RMOE"
VERSION = 1


class IntegrityError(RuntimeError):
    """Checkpoint is missing, truncated, or fails its checksum."""


def save_checkpoint(path, params: dict[str, Tensor], config: dict) -> None:
    names = sorted(params)
    tensors = [{"name": n, "shape": list(params[n].shape)} for n in names]
    payload = b"".join(
        np.ascontiguousarray(params[n].data, dtype="<f8").tobytes() for n in names
    )
    header = json.dumps(
        {"config": config, "tensors": tensors}, sort_keys=True
    ).encode("utf-8")
    blob = (
        MAGIC
        + struct.pack("<II", VERSION, zlib.crc32(payload) & 0xFFFFFFFF)
        + struct.pack("<Q", len(header))
        + header
        + payload
    )
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.exists():
        raise IntegrityError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise IntegrityError(f"bad checkpoint magic in {p}")
    version, crc = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    header_end = 20 + hlen
    if len(raw) < header_end:
        raise IntegrityError(f"truncated checkpoint header in {p}")
    header = json.loads(raw[20:header_end].decode("utf-8"))
    payload = raw[header_end:]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise IntegrityError(f"checksum mismatch in {p}")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise IntegrityError(f"truncated tensor payload in {p}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    return header["config"], tensors


def restore_parameters(params: dict[str, Tensor], tensors: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter dict by name."""
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise IntegrityError(
            f"parameter names disagree with checkpoint (missing {missing[:3]}, "
            f"extra {extra[:3]})"
        )
    for name, t in params.items():
        if tuple(t.shape) != tensors[name].shape:
            raise IntegrityError(
                f"shape mismatch for {name}: model {t.shape}, "
                f"checkpoint {tensors[name].shape}"
            )
        t.data = tensors[name].copy()


__all__ = ["MAGIC", "VERSION", "IntegrityError", "save_checkpoint", "load_checkpoint", "restore_parameters"]
