import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stenomil import formats
from stenomil.formats import FormatError


def test_volume_layout_by_hand():
    vol = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    buf = formats.volume_to_bytes(vol, (0.3, 0.3, 0.3))
    expected = b"MPRVOL1\0" + struct.pack("<7d", 3, 1, 2, 3, 0.3, 0.3, 0.3) + struct.pack("<6f", *range(6))
    assert buf == expected


def test_volume_round_trip(tmp_path):
    vol = np.random.default_rng(0).normal(size=(7, 40, 40)).astype(np.float32)
    formats.write_volume(tmp_path / "a.vol", vol, (2.0, 0.8, 0.8))
    back, spacing = formats.read_volume(tmp_path / "a.vol")
    assert np.array_equal(back, vol) and np.array_equal(spacing, [2.0, 0.8, 0.8])


def test_mask_round_trip(tmp_path):
    mask = np.random.default_rng(1).random((3, 5, 5)) > 0.5
    formats.write_mask(tmp_path / "m.mask", mask, 1.0)
    back, _ = formats.read_mask(tmp_path / "m.mask")
    assert back.dtype == bool and np.array_equal(back, mask)


def test_volume_bad_magic_and_truncation():
    buf = formats.volume_to_bytes(np.zeros((2, 2)), 1.0)
    with pytest.raises(FormatError):
        formats.volume_from_bytes(b"XXXXXXXX" + buf[8:])
    with pytest.raises(FormatError):
        formats.volume_from_bytes(buf[:-1])


def test_artery_encodings_layout(tmp_path):
    enc = np.random.default_rng(2).normal(size=(3, 1024)).astype(np.float32)
    formats.write_artery_encodings(tmp_path / "e.bin", enc)
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:8] == b"ARTENC1\0" and struct.unpack_from("<Q", raw, 8) == (3,)
    assert len(raw) == 16 + 3 * 1024 * 4
    assert np.array_equal(formats.read_artery_encodings(tmp_path / "e.bin"), enc)
    with pytest.raises(FormatError):
        formats.write_artery_encodings(tmp_path / "bad.bin", np.zeros((3, 1000)))


def test_myo_features_layout(tmp_path):
    feat = np.arange(512, dtype=np.float32)
    formats.write_myo_features(tmp_path / "f.bin", feat)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == b"MYOFEA1\0" and len(raw) == 8 + 2048
    assert np.array_equal(formats.read_myo_features(tmp_path / "f.bin"), feat)
    with pytest.raises(FormatError):
        formats.write_myo_features(tmp_path / "bad.bin", np.zeros(511))


def test_checkpoint_layout_by_hand():
    state = {"w": np.array([[1.0, 2.0]], dtype=np.float32), "step": np.array(7, dtype=np.int64)}
    payload_w = struct.pack("<2f", 1.0, 2.0)
    payload_s = struct.pack("<q", 7)
    expected = (
        b"MILCKPT1" + struct.pack("<II", 1, 2)
        + struct.pack("<I", 1) + b"w" + struct.pack("<BI", 0, 2) + struct.pack("<2Q", 1, 2) + payload_w
        + struct.pack("<I", 4) + b"step" + struct.pack("<BI", 2, 0) + payload_s
        + hashlib.blake2b(payload_w + payload_s, digest_size=8).digest()
    )
    assert formats.checkpoint_to_bytes(state) == expected


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(
    st.text(min_size=1, max_size=12),
    hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=4)),
    max_size=5,
))
def test_checkpoint_round_trip_bitwise(state):
    back = formats.checkpoint_from_bytes(formats.checkpoint_to_bytes(state))
    assert list(back) == list(state)
    for k in state:
        assert back[k].dtype == state[k].dtype and back[k].shape == state[k].shape
        assert back[k].tobytes() == state[k].tobytes()


def test_checkpoint_detects_corruption():
    buf = bytearray(formats.checkpoint_to_bytes({"a": np.ones(4, np.float32)}))
    buf[-12] ^= 1  # flip a payload bit
    with pytest.raises(FormatError, match="checksum"):
        formats.checkpoint_from_bytes(bytes(buf))
    with pytest.raises(FormatError):
        formats.checkpoint_from_bytes(bytes(buf[:20]))


def test_checkpoint_rejects_unsupported_dtype():
    with pytest.raises(FormatError):
        formats.checkpoint_to_bytes({"b": np.ones(2, dtype=bool)})


def test_meta_round_trip(tmp_path):
    formats.write_meta(tmp_path / "meta", {"a": 1, "b": 0.1 + 0.2, "c": "x"})
    meta = formats.read_meta(tmp_path / "meta")
    assert meta == {"a": "1", "b": repr(0.1 + 0.2), "c": "x"}
    assert float(meta["b"]) == 0.1 + 0.2


@pytest.mark.parametrize("reader,magic", [
    (formats.checkpoint_from_bytes, b"MILCKPT1"),
    (formats.volume_from_bytes, b"MPRVOL1\0"),
])
@pytest.mark.parametrize("tail", [b"", b"\x01", b"garbage"])
def test_truncated_headers_raise_format_error(reader, magic, tail):
    with pytest.raises(FormatError):
        reader(magic + tail)
