import struct

import numpy as np
import pytest

from gradmark.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from gradmark.nn import build_model, mlp_config, svhn_preset


def test_round_trip_is_bit_exact(tmp_path):
    m = build_model(mlp_config((6, 6, 1), (5,), 3, seed=4))
    m.metadata = {"lambda": 0.01, "note": "x"}
    save_checkpoint(m, tmp_path / "m.gsck")
    again = load_checkpoint(tmp_path / "m.gsck")
    assert again.config.to_dict() == m.config.to_dict()
    assert again.metadata == m.metadata
    for name in m.params:
        assert again.params[name].tobytes() == m.params[name].tobytes()


def test_conv_model_round_trip():
    m = build_model(svhn_preset(width=0.125, input_shape=(6, 6, 3)))
    again = loads(dumps(m))
    assert set(again.params) == set(m.params)


def test_serialisation_is_canonical():
    m = build_model(mlp_config((4, 4, 1), (3,), 2, seed=1))
    assert dumps(m) == dumps(m.copy())
    assert dumps(m)[:4] == b"GSCK"


@pytest.mark.parametrize("position", [10, 40, -10])
def test_corruption_is_detected(position):
    blob = bytearray(dumps(build_model(mlp_config((4, 4, 1), (3,), 2))))
    blob[position] ^= 0xFF
    with pytest.raises(CheckpointError):
        loads(bytes(blob))


def test_truncation_and_magic_are_detected():
    blob = dumps(build_model(mlp_config((4, 4, 1), (3,), 2)))
    with pytest.raises(CheckpointError):
        loads(blob[:-20])
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"XXXX" + blob[4:])


def test_unknown_version_is_rejected():
    import zlib

    blob = dumps(build_model(mlp_config((4, 4, 1), (3,), 2)))
    body = blob[:4] + struct.pack("<I", 99) + blob[8:-4]
    with pytest.raises(CheckpointError, match="version"):
        loads(body + struct.pack("<I", zlib.crc32(body)))


def test_loaded_model_predicts_identically(rng):
    m = build_model(mlp_config((4, 4, 1), (3,), 2, seed=2))
    x = rng.uniform(size=(3, 4, 4, 1))
    np.testing.assert_array_equal(loads(dumps(m)).predict(x), m.predict(x))
