import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from salt import checkpoint as C
from salt.errors import (BadMagicError, CheckpointError, ShapeMismatchError, TruncatedError,
                         VersionMismatchError)

TENSORS = {
    "encoder.w": np.arange(12, dtype=np.float32).reshape(3, 4),
    "encoder.b": np.array([1.5, -2.0], dtype=np.float64),
    "head.idx": np.array([[3]], dtype=np.int64),
}
CONFIG = {"stage": "stage1", "step": 7, "model": {"width": 72}}


def test_round_trip_and_identical_bytes(tmp_path):
    a = C.save_checkpoint(tmp_path / "a.ckpt", TENSORS, CONFIG)
    b = C.save_checkpoint(tmp_path / "b.ckpt", dict(reversed(list(TENSORS.items()))), dict(CONFIG))
    assert a.read_bytes() == b.read_bytes()
    config, tensors = C.load_checkpoint(a)
    assert config == CONFIG
    for k, v in TENSORS.items():
        assert tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(tensors[k], v)
    assert not list(tmp_path.glob("*.tmp"))


def test_header_layout():
    blob = C.encode_checkpoint(TENSORS, CONFIG)
    assert blob[:8] == b"SALTCKPT"
    version, cfg_len = struct.unpack("<II", blob[8:16])
    assert version == C.FORMAT_VERSION
    assert blob[16:16 + cfg_len] == b'{"model":{"width":72},"stage":"stage1","step":7}'


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64]), hnp.array_shapes(min_dims=0, max_dims=3)))
def test_arbitrary_arrays_round_trip(arr):
    _, out = C.decode_checkpoint(C.encode_checkpoint({"x.y": arr}, {}))
    np.testing.assert_array_equal(out["x.y"], arr)
    assert out["x.y"].shape == arr.shape


def test_big_endian_input_is_stored_little_endian():
    arr = np.arange(3, dtype=">f8")
    _, out = C.decode_checkpoint(C.encode_checkpoint({"a": arr}, {}))
    np.testing.assert_array_equal(out["a"], arr)


def test_distinct_corruption_errors():
    blob = C.encode_checkpoint(TENSORS, CONFIG)
    cases = {
        "bad-magic": b"NOTACKPT" + blob[8:],
        "bad-version": blob[:8] + struct.pack("<I", 99) + blob[12:],
        "truncated": blob[:-5],
    }
    expected = {"bad-magic": BadMagicError, "bad-version": VersionMismatchError, "truncated": TruncatedError}
    for code, data in cases.items():
        with pytest.raises(expected[code]) as info:
            C.decode_checkpoint(data)
        assert info.value.code == code
        assert isinstance(info.value, CheckpointError)
    for cut in (0, 3, 12, 40, 100):
        with pytest.raises(CheckpointError):
            C.decode_checkpoint(blob[:cut])


def test_shape_mismatch_against_expected(tmp_path):
    path = C.save_checkpoint(tmp_path / "c.ckpt", TENSORS, CONFIG)
    C.load_checkpoint(path, {"encoder.w": (3, 4)})
    with pytest.raises(ShapeMismatchError) as info:
        C.load_checkpoint(path, {"encoder.w": (4, 3)})
    assert info.value.code == "shape-mismatch"
    with pytest.raises(ShapeMismatchError):
        C.load_checkpoint(path, {"encoder.missing": (1,)})


def test_flatten_unflatten():
    groups = {"encoder": {"a.b": np.ones(2)}, "predictor": {"c": np.zeros(1)}}
    flat = C.flatten(groups)
    assert sorted(flat) == ["encoder.a.b", "predictor.c"]
    assert C.unflatten(flat)["encoder"]["a.b"] is groups["encoder"]["a.b"]
