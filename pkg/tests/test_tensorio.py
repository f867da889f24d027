import struct

import numpy as np
import pytest

from robustsplat import tensorio


def roundtrip(tmp_path, arr):
    path = tmp_path / "t.bin"
    tensorio.write_tensor(path, arr)
    return tensorio.read_tensor(path)


@pytest.mark.parametrize("shape", [(7,), (3, 4), (2, 3, 4), (2, 2, 2, 2)])
def test_float32_roundtrip_lossless(tmp_path, shape):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=shape).astype(np.float32)
    out = roundtrip(tmp_path, arr)
    assert out.dtype == np.float32
    assert out.shape == arr.shape
    assert np.array_equal(out, arr)


def test_float64_roundtrip_lossless(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.normal(size=(5, 6))
    out = roundtrip(tmp_path, arr)
    assert out.dtype == np.float64
    assert np.array_equal(out, arr)


def test_special_values_survive(tmp_path):
    arr = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-45], dtype=np.float32)
    out = roundtrip(tmp_path, arr)
    assert np.array_equal(out.view(np.uint32), arr.view(np.uint32))


def test_header_layout_is_little_endian_u32(tmp_path):
    arr = np.array([1.5, -2.0], dtype=np.float32)
    path = tmp_path / "t.bin"
    tensorio.write_tensor(path, arr)
    expected = b"SLS1" + struct.pack("<II", 1, 1) + struct.pack("<I", 2) + arr.tobytes()
    assert path.read_bytes() == expected


def test_loaded_array_is_writable(tmp_path):
    out = roundtrip(tmp_path, np.ones((2, 2), dtype=np.float32))
    out[0, 0] = 5.0
    assert out[0, 0] == 5.0


def test_rejects_integer_arrays(tmp_path):
    with pytest.raises(tensorio.TensorFormatError):
        tensorio.write_tensor(tmp_path / "t.bin", np.arange(4))


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "t.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(tensorio.TensorFormatError):
        tensorio.read_tensor(path)


def test_rejects_truncation_and_trailing(tmp_path):
    path = tmp_path / "t.bin"
    tensorio.write_tensor(path, np.ones(3, dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-2])
    with pytest.raises(tensorio.TensorFormatError):
        tensorio.read_tensor(path)
    path.write_bytes(blob + b"\x00")
    with pytest.raises(tensorio.TensorFormatError):
        tensorio.read_tensor(path)


def test_rejects_unknown_dtype_code(tmp_path):
    path = tmp_path / "t.bin"
    blob = b"SLS1" + struct.pack("<II", 9, 1) + struct.pack("<I", 1) + b"\x00" * 4
    path.write_bytes(blob)
    with pytest.raises(tensorio.TensorFormatError):
        tensorio.read_tensor(path)


def test_bundle_roundtrip_preserves_names_and_order(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {
        "means": rng.normal(size=(10, 2)),
        "colors": rng.random(size=(10, 3)).astype(np.float32),
        "step": np.array([3000.0]),
    }
    path = tmp_path / "b.bin"
    tensorio.write_bundle(path, tensors)
    out = tensorio.read_bundle(path)
    assert list(out) == list(tensors)
    for name in tensors:
        assert np.array_equal(out[name], tensors[name])
        assert out[name].dtype == np.asarray(tensors[name]).dtype


def test_bundle_rejects_tensor_file(tmp_path):
    path = tmp_path / "t.bin"
    tensorio.write_tensor(path, np.ones(2, dtype=np.float32))
    with pytest.raises(tensorio.TensorFormatError):
        tensorio.read_bundle(path)
