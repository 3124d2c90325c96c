"""Container round-trip and malformed-file handling."""

import struct

import numpy as np
import pytest

from patchlens.errors import FormatError
from patchlens.tgw import MAGIC, read_tgw, write_tgw


def test_roundtrip_all_dtypes(tmp_path):
    path = tmp_path / "t.tgw"
    tensors = {
        "a.f32": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b.i8": np.array([-128, 0, 127], dtype=np.int8),
        "c.i32": np.array([[-5], [9]], dtype=np.int32),
        "d.u32": np.array([7], dtype=np.uint32),
    }
    write_tgw(path, tensors)
    back = read_tgw(path)
    assert list(back) == list(tensors)
    for name in tensors:
        assert back[name].dtype == tensors[name].dtype
        assert np.array_equal(back[name], tensors[name])


def test_write_is_byte_deterministic(tmp_path):
    tensors = {"x": np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32)}
    write_tgw(tmp_path / "a.tgw", tensors)
    write_tgw(tmp_path / "b.tgw", tensors)
    assert (tmp_path / "a.tgw").read_bytes() == (tmp_path / "b.tgw").read_bytes()


def test_float64_downcast(tmp_path):
    write_tgw(tmp_path / "t.tgw", {"x": np.array([1.5], dtype=np.float64)})
    assert read_tgw(tmp_path / "t.tgw")["x"].dtype == np.dtype("<f4")


def test_empty_file_bad_magic(tmp_path):
    path = tmp_path / "empty.tgw"
    path.write_bytes(b"")
    with pytest.raises(FormatError, match="bad magic"):
        read_tgw(path)


def test_wrong_magic(tmp_path):
    path = tmp_path / "bad.tgw"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError, match="bad magic"):
        read_tgw(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.tgw"
    write_tgw(path, {"x": np.zeros((4, 4), dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FormatError, match="truncated"):
        read_tgw(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "t.tgw"
    name = b"x"
    blob = MAGIC + struct.pack("<I", 1) + struct.pack("<H", 1) + name \
        + struct.pack("<BB", 99, 1) + struct.pack("<I", 0)
    path.write_bytes(blob)
    with pytest.raises(FormatError, match="dtype code"):
        read_tgw(path)


def test_trailing_garbage(tmp_path):
    path = tmp_path / "t.tgw"
    write_tgw(path, {"x": np.zeros(2, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(FormatError, match="trailing"):
        read_tgw(path)
