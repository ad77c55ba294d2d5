"""Binary container files for checkpoints and ridge statistics.

Layout: a 7-byte magic (format name + version digit + NUL), a little-endian
u32 header length, a UTF-8 JSON header, then raw little-endian tensor payloads
back to back. The header carries arbitrary metadata plus a ``tensors``
directory listing name, shape, dtype, and byte offset (relative to the end of
the header) for every payload, in payload order. Headers are serialized with
sorted keys so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    MagicMismatchError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

MODEL_MAGIC = b"MOEUP1\0"
STATS_MAGIC = b"RSTAT1\0"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def write_container(path, magic: bytes, meta: dict, tensors) -> None:
    """Write ``tensors`` (iterable of (name, ndarray)) under ``magic``.

    ``meta`` must be JSON-serializable and must not already contain a
    ``tensors`` key; the directory is generated here.
    """
    if len(magic) != 7 or magic[-1:] != b"\0":
        raise CheckpointError(f"bad magic constant {magic!r}")
    if "tensors" in meta:
        raise CheckpointError("meta must not predeclare a 'tensors' directory")
    directory = []
    payloads = []
    offset = 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        directory.append(
            {"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset}
        )
        payloads.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["tensors"] = directory
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def read_container(path, magic: bytes):
    """Read a container written by :func:`write_container`.

    Returns ``(meta, tensors)`` where ``meta`` is the header without the
    directory and ``tensors`` maps name to ndarray. Distinguishes wrong format
    (magic mismatch), right format but wrong version digit, and short files.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 11:
        raise TruncatedFileError(f"{path}: file shorter than fixed prefix")
    got = data[:7]
    if got != magic:
        if got[:5] == magic[:5] and got[-1:] == b"\0":
            raise VersionMismatchError(
                f"{path}: format version {got[5:6]!r}, expected {magic[5:6]!r}"
            )
        raise MagicMismatchError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (header_len,) = struct.unpack("<I", data[7:11])
    header_end = 11 + header_len
    if len(data) < header_end:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(data[11:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    directory = header.pop("tensors", None)
    if directory is None:
        raise CheckpointError(f"{path}: header has no tensor directory")
    tensors = {}
    for entry in directory:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype tag {entry['dtype']!r}")
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = header_end + int(entry["offset"])
        end = start + n * dtype.itemsize
        if end > len(data):
            raise TruncatedFileError(f"{path}: payload for {name!r} truncated")
        arr = np.frombuffer(data[start:end], dtype=dtype).reshape(shape)
        tensors[name] = arr.copy()
    return header, tensors


def require_shape(name: str, arr: np.ndarray, shape) -> np.ndarray:
    """Assert a loaded tensor has the expected shape; used by loaders."""
    if tuple(arr.shape) != tuple(shape):
        raise ShapeMismatchError(
            f"tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}"
        )
    return arr
