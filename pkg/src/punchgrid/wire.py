"""Binary wire format: length-prefixed frames and columnar table buffers.

Every byte that crosses a connection in this package is a Frame:

    ┌───────────┬─────────┬──────────┬───────────┬─────────┬──────────────┬─────────┐
    │ magic 4B  │ ver 1B  │ type 1B  │ src 4B    │ tag 4B  │ payload 8B   │ payload │
    │ "PGRD"    │ =1      │ MsgType  │ u32 LE    │ u32 LE  │ len, u64 LE  │ bytes   │
    └───────────┴─────────┴──────────┴───────────┴─────────┴──────────────┴─────────┘

Header is exactly 22 bytes; all integers little-endian.  Collective payloads
are buffer sets: each buffer prefixed by its u64 LE length, concatenated in
order.  Tables travel as a schema block followed by one buffer per numeric
column and two (offsets + data) per string column.  protocol.md documents the
same layout byte-for-byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import TYPE_CHECKING

import numpy as np

from .errors import (
    BadMagic,
    FrameError,
    LengthMismatch,
    MalformedSchemaBlock,
    TrailingBytes,
    Truncated,
    UnknownMsgType,
    UnsupportedType,
)

if TYPE_CHECKING:
    from .table import Partition

MAGIC = b"PGRD"
VERSION = 1
HEADER_LEN = 22
_HEADER = struct.Struct("<4sBBIIQ")

U32_MAX = 0xFFFFFFFF


class MsgType(IntEnum):
    DATA = 0
    PING = 1
    PONG = 2
    REGISTER = 3
    PEER_ADDR = 4
    KV_CMD = 5
    KV_REPLY = 6


class TypeTag(IntEnum):
    INT64 = 0
    FLOAT64 = 1
    UTF8 = 2


@dataclass(frozen=True)
class Frame:
    """One wire message. ``payload_len`` is implied by ``payload``."""

    msg_type: MsgType
    src_rank: int
    tag: int = 0
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.src_rank <= U32_MAX:
            raise ValueError(f"src_rank out of u32 range: {self.src_rank}")
        if not 0 <= self.tag <= U32_MAX:
            raise ValueError(f"tag out of u32 range: {self.tag}")

    @property
    def wire_size(self) -> int:
        return HEADER_LEN + len(self.payload)


def encode_frame(frame: Frame) -> bytes:
    header = _HEADER.pack(
        MAGIC, VERSION, int(frame.msg_type), frame.src_rank, frame.tag, len(frame.payload)
    )
    return header + frame.payload


def decode_header(data: bytes) -> tuple[MsgType, int, int, int]:
    """Parse and validate a 22-byte header; returns (type, src, tag, payload_len)."""
    if len(data) < HEADER_LEN:
        raise Truncated(f"header needs {HEADER_LEN} bytes, got {len(data)}")
    magic, version, msg_type, src_rank, tag, payload_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise UnknownMsgType(f"unknown msg_type {msg_type}") from None
    return msg_type, src_rank, tag, payload_len


def decode_frame(data: bytes) -> Frame:
    """Inverse of encode_frame over a buffer holding exactly one frame."""
    msg_type, src_rank, tag, payload_len = decode_header(data)
    end = HEADER_LEN + payload_len
    if len(data) < end:
        raise Truncated(f"payload promises {payload_len} bytes, got {len(data) - HEADER_LEN}")
    if len(data) > end:
        raise TrailingBytes(f"{len(data) - end} extra bytes after frame")
    return Frame(msg_type, src_rank, tag, bytes(data[HEADER_LEN:end]))


# --- buffer sets ---

_U64 = struct.Struct("<Q")


def encode_buffers(buffers: list[bytes]) -> bytes:
    """Concatenate buffers, each prefixed by its u64 LE length."""
    parts = []
    for buf in buffers:
        parts.append(_U64.pack(len(buf)))
        parts.append(bytes(buf))
    return b"".join(parts)


def decode_buffers(data: bytes) -> list[bytes]:
    buffers = []
    pos = 0
    total = len(data)
    while pos < total:
        if pos + 8 > total:
            raise Truncated("buffer length prefix cut short")
        (n,) = _U64.unpack_from(data, pos)
        pos += 8
        if pos + n > total:
            raise Truncated(f"buffer promises {n} bytes, got {total - pos}")
        buffers.append(bytes(data[pos : pos + n]))
        pos += n
    return buffers


# --- columnar table serialization ---

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def _encode_schema_block(schema) -> bytes:
    parts = [_U32.pack(len(schema.columns))]
    for name, tag in schema.columns:
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise UnsupportedType(f"column name too long: {len(encoded)} bytes")
        parts.append(_U16.pack(len(encoded)))
        parts.append(encoded)
        parts.append(bytes([int(tag)]))
    return b"".join(parts)


def _decode_schema_block(block: bytes) -> list[tuple[str, TypeTag]]:
    if len(block) < 4:
        raise MalformedSchemaBlock("schema block shorter than column count")
    (ncols,) = _U32.unpack_from(block, 0)
    pos = 4
    columns = []
    for _ in range(ncols):
        if pos + 2 > len(block):
            raise MalformedSchemaBlock("schema block cut short in name length")
        (name_len,) = _U16.unpack_from(block, pos)
        pos += 2
        if pos + name_len + 1 > len(block):
            raise MalformedSchemaBlock("schema block cut short in name or tag")
        try:
            name = block[pos : pos + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedSchemaBlock(f"column name not UTF-8: {exc}") from None
        pos += name_len
        raw_tag = block[pos]
        pos += 1
        try:
            tag = TypeTag(raw_tag)
        except ValueError:
            raise MalformedSchemaBlock(f"unknown type tag {raw_tag}") from None
        columns.append((name, tag))
    if pos != len(block):
        raise MalformedSchemaBlock(f"{len(block) - pos} trailing bytes in schema block")
    return columns


def serialize_partition(part: "Partition") -> list[bytes]:
    """Partition -> buffer set.

    Buffer 0 is the schema block; then per column one buffer of packed
    little-endian values (INT64/FLOAT64) or an offsets buffer of (N+1) u64
    values followed by the concatenated UTF-8 data (UTF8).
    """
    buffers = [_encode_schema_block(part.schema)]
    for (name, tag), col in zip(part.schema.columns, part.columns):
        if tag == TypeTag.INT64:
            buffers.append(np.asarray(col, dtype=np.int64).astype("<i8").tobytes())
        elif tag == TypeTag.FLOAT64:
            buffers.append(np.asarray(col, dtype=np.float64).astype("<f8").tobytes())
        elif tag == TypeTag.UTF8:
            encoded = [s.encode("utf-8") for s in col]
            offsets = np.zeros(len(encoded) + 1, dtype="<u8")
            if encoded:
                np.cumsum([len(b) for b in encoded], out=offsets[1:])
            buffers.append(offsets.tobytes())
            buffers.append(b"".join(encoded))
        else:  # pragma: no cover - TypeTag is closed
            raise UnsupportedType(f"cannot serialize column {name!r} with tag {tag}")
    return buffers


def deserialize_partition(buffers: list[bytes]) -> "Partition":
    """Exact inverse of serialize_partition."""
    from .table import Partition, Schema

    if not buffers:
        raise MalformedSchemaBlock("empty buffer set")
    columns_meta = _decode_schema_block(buffers[0])
    expected = 1 + sum(2 if tag == TypeTag.UTF8 else 1 for _, tag in columns_meta)
    if len(buffers) != expected:
        raise MalformedSchemaBlock(
            f"schema declares {len(columns_meta)} columns needing {expected} buffers, got {len(buffers)}"
        )
    pos = 1
    length: int | None = None
    columns = []
    for name, tag in columns_meta:
        if tag in (TypeTag.INT64, TypeTag.FLOAT64):
            raw = buffers[pos]
            pos += 1
            if len(raw) % 8:
                raise LengthMismatch(f"column {name!r}: buffer of {len(raw)} bytes not a multiple of 8")
            dtype = "<i8" if tag == TypeTag.INT64 else "<f8"
            col = np.frombuffer(raw, dtype=dtype)
            n = len(col)
            columns.append(col)
        else:
            offsets_raw, data = buffers[pos], buffers[pos + 1]
            pos += 2
            if len(offsets_raw) < 8 or len(offsets_raw) % 8:
                raise LengthMismatch(f"column {name!r}: offsets buffer of {len(offsets_raw)} bytes")
            offsets = np.frombuffer(offsets_raw, dtype="<u8")
            if offsets[0] != 0:
                raise LengthMismatch(f"column {name!r}: first offset {offsets[0]} != 0")
            if np.any(np.diff(offsets.astype(np.int64)) < 0):
                raise LengthMismatch(f"column {name!r}: offsets not monotone non-decreasing")
            if int(offsets[-1]) != len(data):
                raise LengthMismatch(
                    f"column {name!r}: last offset {int(offsets[-1])} != data length {len(data)}"
                )
            n = len(offsets) - 1
            try:
                col = tuple(
                    data[int(offsets[i]) : int(offsets[i + 1])].decode("utf-8") for i in range(n)
                )
            except UnicodeDecodeError as exc:
                raise LengthMismatch(f"column {name!r}: data not UTF-8: {exc}") from None
            columns.append(col)
        if length is None:
            length = n
        elif n != length:
            raise LengthMismatch(f"column {name!r} has {n} rows, expected {length}")
    return Partition(Schema(columns_meta), columns)
