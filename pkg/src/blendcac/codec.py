"""Canonical byte encoding for everything that is hashed or signed.

A record is the concatenation of its fields in declared order. Every field
is written as a 4-byte big-endian length followed by the payload:

* ``int``   -> 8-byte big-endian unsigned
* ``bool``  -> 1 byte, ``0x00`` or ``0x01``
* ``bytes`` -> raw (addresses are 20 raw bytes, digests 32)
* ``str``   -> UTF-8
* ``list`` / ``tuple`` -> the nested record of its items

Decoding is strict: lengths must consume the buffer exactly and fixed-width
values must have their exact width.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Union

from .errors import DecodeError

Field = Union[bytes, int, bool, str, list, tuple]

_LEN = struct.Struct(">I")
_U64 = struct.Struct(">Q")

U64_MAX = 2**64 - 1


def digest(data: bytes) -> bytes:
    """256-bit one-way hash used for ids, tx ids and block hashes."""
    return hashlib.sha3_256(data).digest()


def encode_field(value: Field) -> bytes:
    if isinstance(value, bool):
        payload = b"\x01" if value else b"\x00"
    elif isinstance(value, int):
        if not 0 <= value <= U64_MAX:
            raise ValueError(f"integer out of u64 range: {value}")
        payload = _U64.pack(value)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        payload = bytes(value)
    elif isinstance(value, str):
        payload = value.encode("utf-8")
    elif isinstance(value, (list, tuple)):
        payload = pack(*value)
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")
    return _LEN.pack(len(payload)) + payload


def pack(*fields: Field) -> bytes:
    return b"".join(encode_field(f) for f in fields)


def pack_seq(items: Iterable[Field]) -> bytes:
    return pack(*items)


def unpack(data: bytes, count: int | None = None) -> list[bytes]:
    """Split a record into raw field payloads."""
    out: list[bytes] = []
    pos, end = 0, len(data)
    while pos < end:
        if end - pos < 4:
            raise DecodeError("truncated length prefix")
        (n,) = _LEN.unpack_from(data, pos)
        pos += 4
        if n > end - pos:
            raise DecodeError("field length exceeds buffer")
        out.append(bytes(data[pos:pos + n]))
        pos += n
    if count is not None and len(out) != count:
        raise DecodeError(f"expected {count} fields, found {len(out)}")
    return out


def as_u64(raw: bytes) -> int:
    if len(raw) != 8:
        raise DecodeError("integer field must be 8 bytes")
    return _U64.unpack(raw)[0]


def as_bool(raw: bytes) -> bool:
    if raw == b"\x00":
        return False
    if raw == b"\x01":
        return True
    raise DecodeError("boolean field must be 0x00 or 0x01")


def as_str(raw: bytes) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid utf-8") from exc


def as_fixed(raw: bytes, width: int) -> bytes:
    if len(raw) != width:
        raise DecodeError(f"expected {width}-byte field, got {len(raw)}")
    return raw
