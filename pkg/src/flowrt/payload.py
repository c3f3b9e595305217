"""Binary payload codec used for file-based parameter passing.

Layout of an encoded payload::

    magic     4 bytes  b"TFRT"
    version   1 byte   (currently 1)
    type_tag  1 byte   0=i64 scalar, 1=f64 scalar, 2=f64 vector,
                       3=f64 row-major matrix, 4=i64 vector, 5=opaque bytes
    shape     0-2 little-endian u64 dims (scalars none; vectors/bytes one;
                       matrices two)
    payload   raw little-endian data
    checksum  8 bytes  FNV-1a over every preceding byte

decode(encode(v)) is bit-exact for every supported type; the checksum is
verified before anything else is parsed, so any single-byte corruption of a
well-formed payload surfaces as ChecksumMismatch.

On top of the codec sit dump_value/load_value, the envelope the runtime uses
to move arbitrary task arguments and results: native codec types pass through
unchanged, everything else rides inside an opaque-bytes payload with a 1-byte
marker (0 = caller-supplied bytes, 1 = pickled object).
"""

from __future__ import annotations

import pickle
import struct

import numpy as np

from .errors import (
    BadMagic,
    ChecksumMismatch,
    TruncatedPayload,
    UnknownTypeTag,
    UnsupportedType,
)

MAGIC = b"TFRT"
FORMAT_VERSION = 1

TAG_I64 = 0
TAG_F64 = 1
TAG_F64_VEC = 2
TAG_F64_MAT = 3
TAG_I64_VEC = 4
TAG_BYTES = 5

_NDIMS = {TAG_I64: 0, TAG_F64: 0, TAG_F64_VEC: 1, TAG_F64_MAT: 2,
          TAG_I64_VEC: 1, TAG_BYTES: 1}

_I64_MIN = -(1 << 63)
_I64_MAX = (1 << 63) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of ``data``."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


def _header(tag: int, dims: tuple[int, ...]) -> bytes:
    return MAGIC + bytes([FORMAT_VERSION, tag]) + b"".join(
        struct.pack("<Q", d) for d in dims)


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<Q", fnv1a64(body))


def encode(value) -> bytes:
    """Encode a supported value into the binary payload format."""
    if isinstance(value, bool) or isinstance(value, np.bool_):
        # bool is a subclass of int but has no tag of its own
        raise UnsupportedType("bool is not a codec-native type")
    if isinstance(value, (int, np.integer)):
        v = int(value)
        if not _I64_MIN <= v <= _I64_MAX:
            raise UnsupportedType(f"integer out of i64 range: {v}")
        return _seal(_header(TAG_I64, ()) + struct.pack("<q", v))
    if isinstance(value, (float, np.floating)):
        return _seal(_header(TAG_F64, ()) + struct.pack("<d", float(value)))
    if isinstance(value, (bytes, bytearray)):
        raw = bytes(value)
        return _seal(_header(TAG_BYTES, (len(raw),)) + raw)
    if isinstance(value, np.ndarray):
        if value.dtype == np.float64 and value.ndim == 1:
            raw = np.ascontiguousarray(value).tobytes()
            return _seal(_header(TAG_F64_VEC, (value.shape[0],)) + raw)
        if value.dtype == np.float64 and value.ndim == 2:
            raw = np.ascontiguousarray(value).tobytes()
            return _seal(_header(TAG_F64_MAT, value.shape) + raw)
        if value.dtype == np.int64 and value.ndim == 1:
            raw = np.ascontiguousarray(value).tobytes()
            return _seal(_header(TAG_I64_VEC, (value.shape[0],)) + raw)
        raise UnsupportedType(
            f"array dtype/ndim not supported: {value.dtype}/{value.ndim}")
    raise UnsupportedType(f"no type tag for {type(value).__name__}")


def decode(data: bytes):
    """Decode a payload produced by encode(); exact inverse.

    The checksum is verified over the full buffer before the header is
    trusted.
    """
    if len(data) < len(MAGIC) + 2 + 8:
        raise TruncatedPayload(f"payload of {len(data)} bytes is too short")
    body, trailer = data[:-8], data[-8:]
    if fnv1a64(body) != struct.unpack("<Q", trailer)[0]:
        raise ChecksumMismatch("payload checksum does not match contents")
    if body[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {body[:4]!r}")
    if body[4] != FORMAT_VERSION:
        raise UnknownTypeTag(f"unsupported format version {body[4]}")
    tag = body[5]
    if tag not in _NDIMS:
        raise UnknownTypeTag(f"unknown type tag {tag}")
    ndims = _NDIMS[tag]
    off = 6 + 8 * ndims
    if len(body) < off:
        raise TruncatedPayload("shape fields truncated")
    dims = struct.unpack_from(f"<{ndims}Q", body, 6) if ndims else ()
    payload = body[off:]

    if tag == TAG_I64:
        _expect(payload, 8)
        return struct.unpack("<q", payload)[0]
    if tag == TAG_F64:
        _expect(payload, 8)
        return struct.unpack("<d", payload)[0]
    if tag == TAG_BYTES:
        _expect(payload, dims[0])
        return payload
    if tag == TAG_F64_VEC:
        _expect(payload, 8 * dims[0])
        return np.frombuffer(payload, dtype="<f8").copy()
    if tag == TAG_I64_VEC:
        _expect(payload, 8 * dims[0])
        return np.frombuffer(payload, dtype="<i8").copy()
    # TAG_F64_MAT
    rows, cols = dims
    _expect(payload, 8 * rows * cols)
    return np.frombuffer(payload, dtype="<f8").copy().reshape(rows, cols)


def _expect(payload: bytes, n: int) -> None:
    if len(payload) != n:
        raise TruncatedPayload(
            f"payload length {len(payload)} != declared {n}")


# -- value envelope ----------------------------------------------------------

_RAW_BYTES = 0
_PICKLED = 1


def _is_native(value) -> bool:
    if isinstance(value, (bool, np.bool_)):
        return False
    if isinstance(value, (int, float, np.integer, np.floating)):
        return True
    if isinstance(value, np.ndarray):
        return (value.ndim, value.dtype) in (
            (1, np.dtype(np.float64)), (2, np.dtype(np.float64)),
            (1, np.dtype(np.int64)))
    return False


def dump_value(value) -> bytes:
    """Marshal an arbitrary task value into codec bytes."""
    if _is_native(value):
        return encode(value)
    if isinstance(value, (bytes, bytearray)):
        return encode(bytes([_RAW_BYTES]) + bytes(value))
    try:
        blob = pickle.dumps(value, protocol=pickle.HIGHEST_PROTOCOL)
    except Exception as exc:
        raise UnsupportedType(
            f"value of type {type(value).__name__} is neither codec-native "
            f"nor picklable: {exc}") from exc
    return encode(bytes([_PICKLED]) + blob)


def load_value(data: bytes):
    """Inverse of dump_value."""
    value = decode(data)
    if isinstance(value, bytes):
        if not value:
            raise TruncatedPayload("opaque payload missing envelope marker")
        marker, rest = value[0], value[1:]
        if marker == _RAW_BYTES:
            return rest
        if marker == _PICKLED:
            return pickle.loads(rest)
        raise UnknownTypeTag(f"unknown envelope marker {marker}")
    return value
