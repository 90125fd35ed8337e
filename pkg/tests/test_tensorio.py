import numpy as np
import pytest

from mexflow import tensorio


def test_round_trip_f32(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.mxtn"
    tensorio.save_tensor(path, arr, dtype=np.float32)
    again = tensorio.load_tensor(path)
    assert again.dtype == np.float32
    np.testing.assert_array_equal(arr, again)


def test_round_trip_f64_exact(tmp_path):
    arr = np.random.default_rng(1).normal(size=(7,))
    path = tmp_path / "t.mxtn"
    tensorio.save_tensor(path, arr, dtype=np.float64)
    np.testing.assert_array_equal(tensorio.load_tensor(path), arr)


def test_header_layout(tmp_path):
    path = tmp_path / "t.mxtn"
    tensorio.save_tensor(path, np.zeros((2, 3), dtype=np.float32), dtype=np.float32)
    raw = path.read_bytes()
    assert raw[:4] == b"MXTN"
    assert raw[4] == 1  # version
    assert raw[5] == 0  # f32
    assert raw[6] == 2  # rank
    assert int.from_bytes(raw[7:11], "little") == 2
    assert int.from_bytes(raw[11:15], "little") == 3
    assert len(raw) == 15 + 2 * 3 * 4


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.mxtn"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(tensorio.TensorFormatError, match="magic"):
        tensorio.load_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.mxtn"
    tensorio.save_tensor(path, np.zeros((4, 4)), dtype=np.float32)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(tensorio.TensorFormatError, match="payload"):
        tensorio.load_tensor(path)


def test_params_round_trip(tmp_path):
    params = {
        "layer1/w": np.random.default_rng(2).normal(size=(4, 3)),
        "layer1/b": np.zeros(3),
    }
    tensorio.save_params(tmp_path / "ckpt", params, dtype=np.float64)
    again = tensorio.load_params(tmp_path / "ckpt")
    assert set(again) == set(params)
    for k in params:
        np.testing.assert_array_equal(params[k], again[k])
