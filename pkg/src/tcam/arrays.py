"""Single-file named-array container (``.arrs``).

Layout::

    b"ARRS1\\n"                      6 bytes magic
    index_len                        8 bytes, little-endian uint64
    index                            index_len bytes of UTF-8 JSON
    buffers                          raw little-endian C-order buffers

The index is a JSON list of ``{"name", "dtype", "shape", "offset", "nbytes"}``
objects; ``offset`` is counted from the first byte after the index. ``dtype``
is one of ``float32``, ``float64``, ``uint8``, ``int64``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ARRS1\n"
_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "uint8": np.dtype("u1"),
    "int64": np.dtype("<i8"),
}


class ContainerError(ValueError):
    pass


def _dtype_name(dt: np.dtype) -> str:
    for name, ref in _DTYPES.items():
        if np.dtype(dt).newbyteorder("<") == ref or np.dtype(dt) == ref:
            return name
    raise ContainerError(f"unsupported dtype {dt}")


def save_arrays(path, named_arrays: Mapping[str, np.ndarray]) -> None:
    """Write ``named_arrays`` to ``path`` atomically."""
    index, chunks, offset = [], [], 0
    for name, arr in named_arrays.items():
        a = np.asarray(arr)
        dname = _dtype_name(a.dtype)
        buf = np.ascontiguousarray(a, dtype=_DTYPES[dname]).tobytes()
        index.append(
            {"name": str(name), "dtype": dname, "shape": list(a.shape),
             "offset": offset, "nbytes": len(buf)}
        )
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps(index, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def _read_index(fh) -> tuple[list[dict], int]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise ContainerError("bad magic: not an .arrs container")
    raw = fh.read(8)
    if len(raw) != 8:
        raise ContainerError("truncated header")
    (n,) = struct.unpack("<Q", raw)
    try:
        index = json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt index: {exc}") from None
    if not isinstance(index, list):
        raise ContainerError("corrupt index: expected a list")
    return index, len(MAGIC) + 8 + n


def load_arrays(path, names=None) -> dict[str, np.ndarray]:
    """Read all arrays, or only those listed in ``names``."""
    with open(path, "rb") as fh:
        index, base = _read_index(fh)
        wanted = None if names is None else set(names)
        out = {}
        for entry in index:
            if wanted is not None and entry["name"] not in wanted:
                continue
            try:
                dt = _DTYPES[entry["dtype"]]
            except KeyError:
                raise ContainerError(f"unknown dtype {entry['dtype']!r}") from None
            shape = tuple(int(s) for s in entry["shape"])
            expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if expected != entry["nbytes"]:
                raise ContainerError(
                    f"shape mismatch for {entry['name']!r}: {shape} needs "
                    f"{expected} bytes, index says {entry['nbytes']}"
                )
            fh.seek(base + entry["offset"])
            buf = fh.read(entry["nbytes"])
            if len(buf) != entry["nbytes"]:
                raise ContainerError(f"truncated buffer for {entry['name']!r}")
            out[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    if wanted is not None and wanted - out.keys():
        raise KeyError(f"arrays not in container: {sorted(wanted - out.keys())}")
    return out


def load_array(path, name: str) -> np.ndarray:
    return load_arrays(path, [name])[name]
