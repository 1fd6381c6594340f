"""Container format: bit-exact round trips and malformed-file rejection."""

import struct

import numpy as np
import pytest

from dwgl.checkpoint import MAGIC, VERSION, load_tensors, save_tensors
from dwgl.errors import FormatError


def _sample_tensors():
    rng = np.random.default_rng(123)
    return {
        "stem.weight": rng.normal(size=(8, 3, 3, 3)).astype(np.float32),
        "stem.bias": rng.normal(size=8).astype(np.float32),
        "scalar": np.asarray([3.5], dtype=np.float32),
        "deep/ütf-name": rng.normal(size=(2, 1, 2, 1, 2)).astype(np.float32),
    }


def test_round_trip_bit_exact(tmp_path):
    path = tmp_path / "model.dwgl"
    tensors = _sample_tensors()
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)  # order preserved
    for name, arr in tensors.items():
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()


def test_double_round_trip_identical_bytes(tmp_path):
    p1, p2 = tmp_path / "a.dwgl", tmp_path / "b.dwgl"
    tensors = _sample_tensors()
    save_tensors(p1, tensors)
    save_tensors(p2, load_tensors(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "one.dwgl"
    save_tensors(path, {"t": np.asarray([[1.0, 2.0]], dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    version, count = struct.unpack_from("<II", raw, 4)
    assert (version, count) == (VERSION, 1)
    (nlen,) = struct.unpack_from("<H", raw, 12)
    assert raw[14:14 + nlen] == b"t"
    rank = raw[14 + nlen]
    assert rank == 2
    assert struct.unpack_from("<2I", raw, 15 + nlen) == (1, 2)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.dwgl"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError) as ei:
        load_tensors(path)
    assert ei.value.details["offset"] == 0


def test_truncations_report_offsets(tmp_path):
    path = tmp_path / "ok.dwgl"
    save_tensors(path, _sample_tensors())
    raw = path.read_bytes()
    trunc = tmp_path / "trunc.dwgl"
    for cut in (2, 6, 13, len(raw) - 5):
        trunc.write_bytes(raw[:cut])
        with pytest.raises(FormatError) as ei:
            load_tensors(trunc)
        assert "offset" in ei.value.details
        assert ei.value.details["offset"] <= cut


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "extra.dwgl"
    save_tensors(path, {"t": np.zeros(2, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_tensors(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "v9.dwgl"
    save_tensors(path, {})
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as ei:
        load_tensors(path)
    assert ei.value.details["version"] == 99
