"""NSLF tensor container.

Layout::

    b"NSLF" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload

The manifest is a JSON array of ``{name, dtype, shape, byte_offset, byte_len,
crc32}`` entries; offsets are relative to the start of the payload and every
payload is little-endian, row-major. Free-form metadata travels as an extra
``u8`` tensor named ``__metadata__`` holding UTF-8 JSON, so it is covered by
the same checksum as the numeric data.
"""
import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"NSLF"
VERSION = 1
METADATA_KEY = "__metadata__"

_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
    "i64": np.dtype("<i8"),
}
_HEADER = struct.Struct("<4sIQ")


class ContainerError(ValueError):
    """Raised when a container cannot be written or read back intact."""


def _dtype_code(arr):
    if arr.dtype == np.bool_:
        return "u8"
    for code, dt in _DTYPES.items():
        if arr.dtype.newbyteorder("<") == dt or arr.dtype == dt:
            return code
    raise ContainerError(f"unsupported dtype {arr.dtype}; use one of {sorted(_DTYPES)}")


def dumps_metadata(metadata):
    return json.dumps(metadata, sort_keys=True, separators=(",", ":"), allow_nan=False)


def save_container(path, tensors, metadata=None):
    """Write ``tensors`` (mapping name -> array) and ``metadata`` to ``path``.

    Output is a deterministic function of the inputs, so identical inputs give
    byte-identical files.
    """
    tensors = dict(tensors)
    if METADATA_KEY in tensors:
        raise ContainerError(f"tensor name {METADATA_KEY!r} is reserved")
    if metadata is not None:
        blob = dumps_metadata(metadata).encode("utf-8")
        tensors[METADATA_KEY] = np.frombuffer(blob, dtype=np.uint8)

    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        if not isinstance(name, str) or not name:
            raise ContainerError(f"invalid tensor name {name!r}")
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes(order="C")
        manifest.append({
            "name": name,
            "dtype": code,
            "shape": [int(s) for s in arr.shape],
            "byte_offset": offset,
            "byte_len": len(data),
            "crc32": zlib.crc32(data) & 0xFFFFFFFF,
        })
        chunks.append(data)
        offset += len(data)

    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for chunk in chunks:
            fh.write(chunk)


def load_container(path):
    """Read a container; returns ``(tensors, metadata)``.

    Raises :class:`ContainerError` on bad magic/version, truncation, or a
    checksum mismatch.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ContainerError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    start = _HEADER.size + mlen
    if len(raw) < start:
        raise ContainerError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable manifest: {exc}") from exc

    payload = memoryview(raw)[start:]
    tensors = {}
    for entry in manifest:
        name = entry["name"]
        if name in tensors:
            raise ContainerError(f"{path}: duplicate tensor {name!r}")
        lo, n = entry["byte_offset"], entry["byte_len"]
        if lo + n > len(payload):
            raise ContainerError(
                f"{path}: tensor {name!r} truncated (needs bytes {lo}..{lo + n}, "
                f"payload has {len(payload)})"
            )
        data = bytes(payload[lo:lo + n])
        if zlib.crc32(data) & 0xFFFFFFFF != entry["crc32"]:
            raise ContainerError(f"{path}: checksum mismatch in tensor {name!r} at offset {lo}")
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise ContainerError(f"{path}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != n:
            raise ContainerError(f"{path}: shape {shape} inconsistent with {n} bytes for {name!r}")
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(shape).copy()

    metadata = None
    if METADATA_KEY in tensors:
        metadata = json.loads(tensors.pop(METADATA_KEY).tobytes().decode("utf-8"))
    return tensors, metadata
