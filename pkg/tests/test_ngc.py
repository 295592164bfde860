import json
import struct

import numpy as np
import pytest

from nerfgraph import ngc


def test_roundtrip_preserves_order_shapes_and_meta(tmp_path):
    tensors = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5], dtype=np.float32),
               "scalar": np.array(2.0, dtype=np.float32)}
    path = tmp_path / "x.ngc"
    ngc.save(path, {"kind": "test", "n": 3}, tensors)
    meta, back = ngc.load(path)
    assert meta == {"kind": "test", "n": 3}
    assert list(back) == ["b", "a", "scalar"]
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].dtype == np.float32 and back[k].shape == tensors[k].shape


def test_byte_layout():
    buf = ngc.dumps({"k": 1}, {"w": np.array([1.0, -2.0], dtype=np.float32)})
    assert buf[:4] == b"NGC1"
    (hlen,) = struct.unpack("<Q", buf[4:12])
    header = json.loads(buf[12:12 + hlen])
    assert header["tensors"] == [{"name": "w", "shape": [2], "offset": 0}]
    np.testing.assert_array_equal(np.frombuffer(buf[12 + hlen:], dtype="<f4"), [1.0, -2.0])


def test_float64_input_is_stored_as_float32():
    _, back = ngc.loads(ngc.dumps({}, {"x": np.array([0.1])}))
    assert back["x"].dtype == np.float32 and back["x"][0] == np.float32(0.1)


@pytest.mark.parametrize("bad", [b"XXXX" + bytes(20), b"NGC1\x00"])
def test_rejects_corrupt_headers(bad):
    with pytest.raises(ngc.ContainerError):
        ngc.loads(bad)


def test_rejects_truncated_payload():
    buf = ngc.dumps({}, {"x": np.ones(10, dtype=np.float32)})
    with pytest.raises(ngc.ContainerError, match="past end"):
        ngc.loads(buf[:-4])


def test_rejects_non_finite_and_reserved_key():
    with pytest.raises(ngc.ContainerError, match="non-finite"):
        ngc.dumps({}, {"x": np.array([np.nan])})
    with pytest.raises(ngc.ContainerError, match="reserved"):
        ngc.dumps({"tensors": 1}, {})
