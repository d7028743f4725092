import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odflow.io import (
    FormatError,
    decode_matrix,
    encode_matrix,
    read_checkpoint,
    read_matrix,
    write_checkpoint,
    write_matrix,
)


@settings(max_examples=50)
@given(arrays(np.float64, st.tuples(st.integers(0, 6), st.integers(0, 6)), elements=st.floats(-1e6, 1e6)))
def test_matrix_round_trip(a):
    np.testing.assert_array_equal(decode_matrix(encode_matrix(a)), a)


def test_matrix_layout():
    blob = encode_matrix(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert blob[:7] == b"ODFMAT\x00"
    assert blob[7] == 1
    assert int.from_bytes(blob[8:12], "little") == 2
    assert len(blob) == 16 + 4 * 8
    assert np.frombuffer(blob[16:], "<f8").tolist() == [1.0, 2.0, 3.0, 4.0]


def test_matrix_format_errors():
    blob = encode_matrix(np.eye(2))
    with pytest.raises(FormatError):
        decode_matrix(b"NOTMAT" + blob[6:])
    with pytest.raises(FormatError):
        decode_matrix(blob[:-8])


def test_matrix_files(tmp_path):
    a = np.arange(9.0).reshape(3, 3)
    write_matrix(tmp_path / "m.odm", a)
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.odm"), a)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a/W": np.arange(6.0).reshape(2, 3), "a/s": np.array(0.25), "b": np.zeros(0)}
    write_checkpoint(tmp_path / "c.ckpt", tensors, {"kind": "x", "config": {"n": 3}})
    back, meta = read_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"kind": "x", "config": {"n": 3}}
    assert set(back) == set(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].shape == tensors[k].shape


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "x")
