"""NGC1 tensor container.

Layout::

    b"NGC1" | u64 little-endian header length | UTF-8 JSON header | payload

The header is a JSON object holding caller metadata plus a ``tensors``
directory (name, shape, byte offset into the payload). Payloads are
little-endian float32, row-major, packed in directory order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NGC1"
_DTYPE = np.dtype("<f4")


class ContainerError(ValueError):
    pass


def dumps(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.array(arr, dtype=_DTYPE, order="C")  # ascontiguousarray would lift 0-d to 1-d
        if not np.all(np.isfinite(a)):
            raise ContainerError(f"tensor {name!r} holds non-finite values")
        directory.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = dict(meta)
    if "tensors" in header:
        raise ContainerError("'tensors' is a reserved header key")
    header["tensors"] = directory
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(chunks)


def loads(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise ContainerError("bad magic; not an NGC1 container")
    if len(buf) < 12:
        raise ContainerError("truncated container header")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    payload = memoryview(buf)[12 + hlen:]
    tensors = {}
    for entry in header.pop("tensors"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        end = start + count * _DTYPE.itemsize
        if end > len(payload):
            raise ContainerError(f"tensor {entry['name']!r} runs past end of payload")
        tensors[entry["name"]] = np.frombuffer(payload[start:end], dtype=_DTYPE).reshape(shape).copy()
    return header, tensors


def save(path: str | os.PathLike, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(meta, tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
