import numpy as np
import pytest

from sidl import checkpoint


def test_fnv_reference_vectors():
    # published FNV-1a 64 test vectors
    assert checkpoint.fnv1a64(b"") == 0xCBF29CE484222325
    assert checkpoint.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert checkpoint.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_roundtrip(tmp_path, rng):
    arrays = {"b.w": rng.normal(size=(3, 2)), "a": np.array(2.5), "c": np.arange(4.0)}
    path = tmp_path / "x.sidl"
    checkpoint.save(path, arrays)
    back = checkpoint.load(path)
    assert sorted(back) == sorted(arrays)
    for k in arrays:
        assert np.array_equal(back[k], arrays[k]) and back[k].shape == np.shape(arrays[k])
    blob = path.read_bytes()
    assert blob[:4] == b"SIDL"
    assert checkpoint.encode(arrays) == blob


def test_corruption_detected(tmp_path):
    blob = bytearray(checkpoint.encode({"w": np.ones(3)}))
    blob[20] ^= 1
    with pytest.raises(checkpoint.ChecksumError):
        checkpoint.decode(bytes(blob))
    with pytest.raises(ValueError):
        checkpoint.decode(b"NOPE" + bytes(blob[4:]))


def test_params_checksum_sensitive():
    a = [np.zeros(3)]
    assert checkpoint.params_checksum(a) == checkpoint.params_checksum([np.zeros(3)])
    assert checkpoint.params_checksum(a) != checkpoint.params_checksum([np.array([0, 0, 1e-300])])
