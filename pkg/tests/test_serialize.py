import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmt import serialize
from cmt.errors import MagicError, SerializationError, TruncatedError, VersionError


def test_round_trip_preserves_bits(tmp_path):
    r = np.random.default_rng(0)
    tensors = {"a": r.standard_normal((2, 3)).astype(np.float32), "b.c": r.standard_normal(5)}
    path = tmp_path / "t.cmtw"
    serialize.save_tensors(path, tensors)
    back = serialize.load_tensors(path)
    assert list(back) == ["a", "b.c"]
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert back[k].tobytes() == tensors[k].tobytes()


def test_layout_header():
    blob = serialize.encode({"x": np.zeros((1, 2), np.float64)})
    assert blob[:4] == b"CMTW"
    assert struct.unpack("<II", blob[4:12]) == (1, 1)
    (nlen,) = struct.unpack("<I", blob[12:16])
    assert blob[16:16 + nlen] == b"x"
    code, rank = blob[17], blob[18]
    assert (code, rank) == (1, 2)
    assert struct.unpack("<2Q", blob[19:35]) == (1, 2)


def test_spec_record_round_trip():
    blob = serialize.encode({}, {"spec": {"name": "n"}})
    spec, tensors = serialize.decode(blob, with_spec=True)
    assert spec == {"spec": {"name": "n"}} and tensors == {}


def test_bad_magic_names_expected_bytes():
    blob = b"ABCD" + serialize.encode({})[4:]
    with pytest.raises(MagicError, match="CMTW"):
        serialize.decode(blob, with_spec=False)


def test_version_mismatch():
    blob = serialize.MAGIC + struct.pack("<I", 99) + struct.pack("<I", 0)
    with pytest.raises(VersionError, match="99"):
        serialize.decode(blob, with_spec=False)


@pytest.mark.parametrize("cut", [3, 7, 11, 20, 40])
def test_truncation_is_structured(cut):
    blob = serialize.encode({"weights": np.ones((3, 3), np.float32)})
    with pytest.raises(TruncatedError):
        serialize.decode(blob[:cut], with_spec=False)


def test_trailing_bytes_rejected():
    with pytest.raises(SerializationError, match="trailing"):
        serialize.decode(serialize.encode({}) + b"\0", with_spec=False)


def test_unsupported_dtype():
    with pytest.raises(SerializationError, match="dtype"):
        serialize.encode({"i": np.arange(3)})


def test_errors_are_os_errors():
    assert issubclass(TruncatedError, OSError) and issubclass(MagicError, SerializationError)


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.cmtw"

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(serialize.os, "replace", boom)
    with pytest.raises(OSError):
        serialize.save_tensors(target, {"a": np.ones(2)})
    assert list(tmp_path.iterdir()) == []


@settings(max_examples=40, deadline=None)
@given(arrays(st.sampled_from([np.float32, np.float64]), st.lists(st.integers(1, 4), min_size=0, max_size=4),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_property(arr):
    spec, back = serialize.decode(serialize.encode({"t": arr}, {"k": 1}), with_spec=True)
    assert spec == {"k": 1}
    assert back["t"].shape == arr.shape and back["t"].tobytes() == arr.tobytes()
