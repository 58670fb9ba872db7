"""Versioned little-endian checkpoint files.

Layout: magic ``DKCK``, u32 format version, 32-byte SHA-256 of the network
spec, u8-length numeric mode, u32 tensor count, then per tensor: u16-length
UTF-8 name, u8 dtype code, u8 ndim, u32 extents, raw data. Parameters come
first in graph order, followed by the BN running statistics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from densekit.errors import DataError

MAGIC = b"DKCK"
VERSION = 1
_DT = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def spec_hash(spec) -> bytes:
    text = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).digest()


def named_state(graph) -> list:
    """(name, array) for parameters then running statistics."""
    out = [(name, p.data) for name, p in graph.named_parameters()]
    seen = set()
    for st in graph.bn_states():
        base = st.gamma.name.rsplit(".", 1)[0]
        if base in seen:
            continue
        seen.add(base)
        out.append((f"{base}.running_mean", st.running_mean))
        out.append((f"{base}.running_var", st.running_var))
    return out


def save_checkpoint(graph, path, mode: str) -> Path:
    path = Path(path)
    items = named_state(graph)
    parts = [MAGIC, struct.pack("<I", VERSION), spec_hash(graph.spec)]
    m = mode.encode()
    parts += [struct.pack("<B", len(m)), m, struct.pack("<I", len(items))]
    for name, arr in items:
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", _CODE[arr.dtype], arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DT[_CODE[arr.dtype]]).tobytes())
    path.write_bytes(b"".join(parts))
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e.strerror}")
    try:
        if raw[:4] != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != VERSION:
            raise DataError(f"{path}: checkpoint version {version} is not supported")
        digest = raw[8:40]
        (ml,) = struct.unpack_from("<B", raw, 40)
        mode = raw[41:41 + ml].decode()
        off = 41 + ml
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nl].decode()
            off += nl
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt = _DT[code]
            size = int(np.prod(shape)) * dt.itemsize
            if off + size > len(raw):
                raise DataError(f"{path}: truncated at tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
            off += size
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint ({e})")
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes after the last tensor")
    return {"spec_hash": digest, "mode": mode, "tensors": tensors}


def load_checkpoint(graph, path) -> str:
    """Restore weights and running statistics into ``graph``; returns the numeric mode."""
    ck = read_checkpoint(path)
    if ck["spec_hash"] != spec_hash(graph.spec):
        raise DataError(f"{path}: checkpoint was written for a different network spec")
    tensors = ck["tensors"]
    for name, arr in named_state(graph):
        if name not in tensors:
            raise DataError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != arr.shape:
            raise DataError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {arr.shape}")
        arr[...] = tensors[name]
    return ck["mode"]
