import io

import numpy as np
import pytest

from src.utils.binio import ChunkFormatError, pack_arrays, pack_json, read_chunk, unpack_arrays, unpack_json, write_chunk


def test_chunk_stream():
    buf = io.BytesIO()
    write_chunk(buf, b"HEAD", b"hello")
    write_chunk(buf, b"DATA", b"")
    buf.seek(0)
    assert read_chunk(buf) == (b"HEAD", b"hello")
    assert read_chunk(buf) == (b"DATA", b"")
    assert read_chunk(buf) is None


def test_chunk_tag_length():
    with pytest.raises(ValueError):
        write_chunk(io.BytesIO(), b"TOOLONG", b"")


def test_truncated_and_corrupt_chunks():
    buf = io.BytesIO()
    write_chunk(buf, b"DATA", b"0123456789")
    raw = buf.getvalue()
    with pytest.raises(ChunkFormatError):
        read_chunk(io.BytesIO(raw[:-6]))
    corrupt = bytearray(raw)
    corrupt[14] ^= 0xFF
    with pytest.raises(ChunkFormatError):
        read_chunk(io.BytesIO(bytes(corrupt)))


def test_arrays_keep_dtype_and_shape():
    arrays = {
        "keys": np.array([3, 1, 4], dtype=np.int64),
        "grid": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
        "big_endian": np.array([1.5, 2.5], dtype=">f8"),
        "empty": np.zeros((0, 15)),
    }
    back = unpack_arrays(pack_arrays(arrays))
    assert list(back) == list(arrays)
    assert back["grid"].dtype == np.float32 and back["grid"].shape == (2, 3, 4)
    assert back["empty"].shape == (0, 15)
    np.testing.assert_array_equal(back["big_endian"], [1.5, 2.5])


def test_array_overrun():
    payload = pack_arrays({"a": np.arange(8)})
    with pytest.raises(ChunkFormatError):
        unpack_arrays(payload[:-4])


def test_json_blocks():
    assert unpack_json(pack_json({"b": 1, "a": [1, 2]})) == {"a": [1, 2], "b": 1}
    with pytest.raises(ChunkFormatError):
        unpack_json(b"{not json")
