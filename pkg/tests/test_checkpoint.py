"""Binary checkpoint format: round-trips, determinism, corruption handling."""

import struct

import numpy as np
import pytest

from narem.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


@pytest.fixture
def payload():
    rng = np.random.default_rng(0)
    config = {"kind": "test", "layers": 2}
    arrays = {"a.w": rng.normal(size=(3, 4)), "b.w": rng.normal(size=(1, 7))}
    return config, arrays


def test_round_trip_bit_exact(tmp_path, payload):
    config, arrays = payload
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, arrays)
    config2, arrays2 = load_checkpoint(path)
    assert config2 == config
    assert set(arrays2) == set(arrays)
    for name in arrays:
        assert arrays2[name].dtype == np.float64
        assert np.array_equal(arrays2[name], arrays[name])


def test_same_content_same_bytes(tmp_path, payload):
    config, arrays = payload
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, config, arrays)
    save_checkpoint(b, config, dict(reversed(list(arrays.items()))))
    assert a.read_bytes() == b.read_bytes()  # entries are written in sorted order


def test_header_fields(tmp_path, payload):
    config, arrays = payload
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, arrays)
    raw = path.read_bytes()
    assert raw[:8] == b"NAREMCKP"
    assert struct.unpack_from("<I", raw, 8)[0] == 1


def test_rejects_non_matrix(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "m.ckpt", {}, {"v": np.zeros(3)})


def test_bad_magic(tmp_path, payload):
    config, arrays = payload
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, arrays)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_bad_version(tmp_path, payload):
    config, arrays = payload
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, arrays)
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 8, 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_trailing_garbage(tmp_path, payload):
    config, arrays = payload
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, config, arrays)
    path.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_empty_arrays_ok(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"only": "config"}, {})
    config, arrays = load_checkpoint(path)
    assert config == {"only": "config"}
    assert arrays == {}
