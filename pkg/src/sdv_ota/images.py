"""Byte formats for simulated images and composed container+model payloads.

Image layout::

    magic (8 bytes) | version length (1 byte) | version ascii | body length (u32 BE) | body

Composed layout: for each part (container first, then model) a u32 BE length
prefix followed by the part bytes. Nothing may trail the second part.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .core import SemanticVersion, parse_version
from .errors import ValidationError, VersionError

MAGIC = b"SDVIMG01"
_U32 = struct.Struct(">I")


class FormatError(ValidationError):
    pass


@dataclass(frozen=True)
class Image:
    version: SemanticVersion
    body: bytes


def pack_image(version: SemanticVersion, body: bytes) -> bytes:
    tag = str(version).encode("ascii")
    return MAGIC + bytes([len(tag)]) + tag + _U32.pack(len(body)) + body


def unpack_image(data: bytes) -> Image:
    if len(data) < len(MAGIC) + 1 or data[: len(MAGIC)] != MAGIC:
        raise FormatError("bad image magic")
    pos = len(MAGIC)
    tag_len = data[pos]
    pos += 1
    tag = data[pos : pos + tag_len]
    pos += tag_len
    if len(tag) != tag_len or len(data) < pos + _U32.size:
        raise FormatError("truncated image header")
    try:
        version = parse_version(tag.decode("ascii"))
    except (UnicodeDecodeError, VersionError) as exc:
        raise FormatError(f"bad image version tag: {exc}") from None
    (body_len,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    if len(data) - pos != body_len:
        raise FormatError(f"declared body length {body_len} does not match {len(data) - pos}")
    return Image(version, data[pos:])


def pack_parts(container: bytes, model: bytes) -> bytes:
    return _U32.pack(len(container)) + container + _U32.pack(len(model)) + model


def unpack_parts(data: bytes) -> tuple[bytes, bytes]:
    parts = []
    pos = 0
    for _ in range(2):
        if len(data) < pos + _U32.size:
            raise FormatError("truncated length prefix")
        (n,) = _U32.unpack_from(data, pos)
        pos += _U32.size
        if len(data) < pos + n:
            raise FormatError("length prefix runs past end of payload")
        parts.append(data[pos : pos + n])
        pos += n
    if pos != len(data):
        raise FormatError("trailing bytes after model part")
    return parts[0], parts[1]


def generate_body(size: int, seed: int | str) -> bytes:
    """Reproducible pseudo-random bytes for scenario payloads."""
    if size < 0:
        raise ValueError("size must be non-negative")
    return hashlib.shake_256(f"payload:{seed}".encode()).digest(size) if size else b""
