"""Binary and text file formats.

``.vol`` / ``.mask``
    ``MPRVOL1\\0``, then rank, extents and voxel spacing (mm) as float64 LE,
    then the float32 LE voxel payload in row-major order.
``artery_enc.bin``
    ``ARTENC1\\0``, artery count as uint64 LE, then ``N x 1024`` float32 LE.
``myo_feat.bin``
    ``MYOFEA1\\0`` then 512 float32 LE.
checkpoints
    ``MILCKPT1``, uint32 format version, uint32 record count, then per record:
    uint32 name length, UTF-8 name, uint8 dtype code, uint32 rank, uint64
    extents, LE payload.  Trailer: uint64 checksum (first 8 bytes of
    BLAKE2b) over the concatenated payload bytes.
``meta``
    plain ``key=value`` lines.
"""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

VOL_MAGIC = b"MPRVOL1\0"
ARTENC_MAGIC = b"ARTENC1\0"
MYOFEA_MAGIC = b"MYOFEA1\0"
CKPT_MAGIC = b"MILCKPT1"
CKPT_VERSION = 1

ARTERY_FEATURES = 1024
MYO_FEATURES = 512

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class FormatError(ValueError):
    """A file does not match its declared layout."""


def _check_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")


# -- volumes ------------------------------------------------------------------

def volume_to_bytes(volume: np.ndarray, spacing) -> bytes:
    volume = np.asarray(volume)
    spacing = np.broadcast_to(np.asarray(spacing, dtype="<f8"), (volume.ndim,))
    head = np.concatenate([[volume.ndim], volume.shape, spacing]).astype("<f8")
    return VOL_MAGIC + head.tobytes() + np.ascontiguousarray(volume, dtype="<f4").tobytes()


def volume_from_bytes(buf: bytes, path="<bytes>") -> tuple[np.ndarray, np.ndarray]:
    _check_magic(buf, VOL_MAGIC, path)
    off = len(VOL_MAGIC)
    if len(buf) < off + 8:
        raise FormatError(f"{path}: truncated volume header")
    rank = int(np.frombuffer(buf, "<f8", 1, off)[0])
    off += 8
    if not 0 <= rank <= 8 or len(buf) < off + 16 * rank:
        raise FormatError(f"{path}: bad volume header (rank {rank})")
    shape = tuple(int(v) for v in np.frombuffer(buf, "<f8", rank, off))
    off += 8 * rank
    spacing = np.frombuffer(buf, "<f8", rank, off).copy()
    off += 8 * rank
    n = int(np.prod(shape))
    if len(buf) - off != 4 * n:
        raise FormatError(f"{path}: payload has {len(buf) - off} bytes, expected {4 * n}")
    data = np.frombuffer(buf, "<f4", n, off).reshape(shape).copy()
    return data, spacing


def write_volume(path, volume: np.ndarray, spacing) -> None:
    Path(path).write_bytes(volume_to_bytes(volume, spacing))


def read_volume(path) -> tuple[np.ndarray, np.ndarray]:
    return volume_from_bytes(Path(path).read_bytes(), path)


def write_mask(path, mask: np.ndarray, spacing) -> None:
    write_volume(path, np.asarray(mask, dtype=np.float32), spacing)


def read_mask(path) -> tuple[np.ndarray, np.ndarray]:
    data, spacing = read_volume(path)
    return data > 0.5, spacing


# -- encodings ------------------------------------------------------------------

def write_artery_encodings(path, enc: np.ndarray) -> None:
    enc = np.asarray(enc)
    if enc.ndim != 2 or enc.shape[1] != ARTERY_FEATURES:
        raise FormatError(f"artery encodings must be N x {ARTERY_FEATURES}, got {enc.shape}")
    Path(path).write_bytes(ARTENC_MAGIC + struct.pack("<Q", enc.shape[0]) + enc.astype("<f4").tobytes())


def read_artery_encodings(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _check_magic(buf, ARTENC_MAGIC, path)
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated artery encodings")
    (n,) = struct.unpack_from("<Q", buf, 8)
    if len(buf) != 16 + 4 * n * ARTERY_FEATURES:
        raise FormatError(f"{path}: truncated artery encodings")
    return np.frombuffer(buf, "<f4", n * ARTERY_FEATURES, 16).reshape(n, ARTERY_FEATURES).copy()


def write_myo_features(path, feat: np.ndarray) -> None:
    feat = np.asarray(feat).reshape(-1)
    if feat.size != MYO_FEATURES:
        raise FormatError(f"myocardium features must have {MYO_FEATURES} values, got {feat.size}")
    Path(path).write_bytes(MYOFEA_MAGIC + feat.astype("<f4").tobytes())


def read_myo_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _check_magic(buf, MYOFEA_MAGIC, path)
    if len(buf) != 8 + 4 * MYO_FEATURES:
        raise FormatError(f"{path}: truncated myocardium features")
    return np.frombuffer(buf, "<f4", MYO_FEATURES, 8).copy()


# -- checkpoints ------------------------------------------------------------------

def checkpoint_to_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    digest = hashlib.blake2b(digest_size=8)
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(payload)
        digest.update(payload)
    parts.append(digest.digest())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes, path="<bytes>") -> dict[str, np.ndarray]:
    _check_magic(buf, CKPT_MAGIC, path)
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    digest = hashlib.blake2b(digest_size=8)
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BI", buf, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            dt = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            payload = buf[off : off + nbytes]
            if len(payload) != nbytes:
                raise FormatError(f"{path}: truncated record {name!r}")
            off += nbytes
            digest.update(payload)
            out[name] = np.frombuffer(payload, dt).reshape(shape).copy()
    except (struct.error, KeyError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    if buf[off:] != digest.digest():
        raise FormatError(f"{path}: checksum mismatch")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return checkpoint_from_bytes(Path(path).read_bytes(), path)


# -- key=value text ---------------------------------------------------------------

def write_meta(path, meta: Mapping[str, object]) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_meta(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed line {line!r}")
        out[key.strip()] = val.strip()
    return out
