"""
Little-endian chunked binary containers shared by the table (ABT1) and
aggregate (AGG1) formats.

A chunk is: 4-byte ASCII tag, u64 payload length, payload, u32 CRC32 of the
payload. Array payloads are a sequence of named arrays, each stored as
name, dtype string, shape and raw little-endian bytes.
"""

import io
import json
import struct
import zlib
from typing import BinaryIO

import numpy as np


class ChunkFormatError(Exception):
    """Raised when a container is truncated, corrupt or malformed."""


_CHUNK_HEAD = struct.Struct("<4sQ")
_CRC = struct.Struct("<I")


def write_chunk(stream: BinaryIO, tag: bytes, payload: bytes) -> None:
    if len(tag) != 4:
        raise ValueError(f"Chunk tag must be 4 bytes, got {tag!r}")
    stream.write(_CHUNK_HEAD.pack(tag, len(payload)))
    stream.write(payload)
    stream.write(_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF))


def read_chunk(stream: BinaryIO) -> tuple[bytes, bytes] | None:
    """Returns (tag, payload), or None at a clean end of stream."""
    head = stream.read(_CHUNK_HEAD.size)
    if not head:
        return None
    if len(head) < _CHUNK_HEAD.size:
        raise ChunkFormatError("Truncated chunk header")
    tag, length = _CHUNK_HEAD.unpack(head)
    payload = stream.read(length)
    if len(payload) != length:
        raise ChunkFormatError(f"Truncated chunk {tag!r}: expected {length} bytes, got {len(payload)}")
    crc_bytes = stream.read(_CRC.size)
    if len(crc_bytes) != _CRC.size:
        raise ChunkFormatError(f"Missing checksum for chunk {tag!r}")
    (crc,) = _CRC.unpack(crc_bytes)
    if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise ChunkFormatError(f"Checksum mismatch in chunk {tag!r}")
    return tag, payload


def pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, array in arrays.items():
        array = np.ascontiguousarray(array)
        dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
        array = array.astype(dtype, copy=False)
        name_b = name.encode("utf-8")
        dtype_b = dtype.str.encode("ascii")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", len(dtype_b)))
        buf.write(dtype_b)
        buf.write(struct.pack("<B", array.ndim))
        buf.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        buf.write(array.tobytes(order="C"))
    return buf.getvalue()


def unpack_arrays(payload: bytes) -> dict[str, np.ndarray]:
    view = memoryview(payload)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise ChunkFormatError("Array block overruns its chunk")
        part = view[offset:offset + n]
        offset += n
        return part

    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (dtype_len,) = struct.unpack("<B", take(1))
        dtype = np.dtype(bytes(take(dtype_len)).decode("ascii"))
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape)
        arrays[name] = data.copy()
    return arrays


def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def unpack_json(payload: bytes):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ChunkFormatError(f"Malformed JSON block: {e}")
