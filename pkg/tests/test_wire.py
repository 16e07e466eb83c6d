"""Frame and columnar-buffer wire format tests."""

import random
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from punchgrid.errors import (
    BadMagic,
    LengthMismatch,
    MalformedSchemaBlock,
    TrailingBytes,
    Truncated,
    UnknownMsgType,
)
from punchgrid.table import Partition, Schema
from punchgrid.wire import (
    HEADER_LEN,
    Frame,
    MsgType,
    TypeTag,
    decode_buffers,
    decode_frame,
    deserialize_partition,
    encode_buffers,
    encode_frame,
    serialize_partition,
)


def test_header_is_22_bytes():
    assert HEADER_LEN == 22


def test_ping_frame_layout():
    raw = encode_frame(Frame(MsgType.PING, src_rank=3, tag=0, payload=b""))
    assert len(raw) == 22
    assert raw[:4] == b"PGRD"
    assert raw[4] == 1  # version
    assert raw[5] == 1  # PING
    assert raw[6:10] == (3).to_bytes(4, "little")
    assert raw[-8:] == b"\x00" * 8  # payload_len == 0


def test_data_frame_layout():
    raw = encode_frame(Frame(MsgType.DATA, src_rank=0, tag=7, payload=b"\xab"))
    assert len(raw) == 23
    assert raw[-1] == 0xAB
    assert raw[10:14] == (7).to_bytes(4, "little")
    assert raw[14:22] == (1).to_bytes(8, "little")


def test_decode_inverts_encode():
    f = Frame(MsgType.KV_CMD, src_rank=12, tag=999, payload=b"INCR j/rank_ctr")
    assert decode_frame(encode_frame(f)) == f


def test_decode_bad_magic():
    raw = b"XXXX" + encode_frame(Frame(MsgType.PING, 0))[4:]
    with pytest.raises(BadMagic):
        decode_frame(raw)


def test_decode_unknown_msg_type():
    raw = bytearray(encode_frame(Frame(MsgType.PING, 0)))
    raw[5] = 250
    with pytest.raises(UnknownMsgType):
        decode_frame(bytes(raw))


def test_decode_truncated_payload():
    header = struct.pack("<4sBBIIQ", b"PGRD", 1, 0, 0, 0, 100)
    with pytest.raises(Truncated):
        decode_frame(header + b"0123456789")


def test_decode_short_header():
    with pytest.raises(Truncated):
        decode_frame(b"PGRD\x01")


def test_decode_trailing_bytes():
    raw = encode_frame(Frame(MsgType.DATA, 0, 0, b"x")) + b"junk"
    with pytest.raises(TrailingBytes):
        decode_frame(raw)


def test_frame_round_trip_randomized():
    # >= 10^4 trials; payload sizes mostly small with some up to 1 MiB
    rng = random.Random(0x5EED)
    types = list(MsgType)
    for trial in range(10_000):
        size = rng.randrange(0, 513) if trial % 100 else rng.randrange(0, 1 << 20)
        f = Frame(
            msg_type=rng.choice(types),
            src_rank=rng.randrange(0, 1 << 32),
            tag=rng.randrange(0, 1 << 32),
            payload=rng.randbytes(size),
        )
        encoded = encode_frame(f)
        assert len(encoded) == 22 + size
        assert decode_frame(encoded) == f


def test_buffer_set_round_trip():
    bufs = [b"", b"a", b"hello world", b"\x00" * 17]
    assert decode_buffers(encode_buffers(bufs)) == bufs


def test_buffer_set_truncated():
    raw = encode_buffers([b"abcdef"])
    with pytest.raises(Truncated):
        decode_buffers(raw[:-2])


# --- partition serialization ---

INT64 = TypeTag.INT64
FLOAT64 = TypeTag.FLOAT64
UTF8 = TypeTag.UTF8


def test_empty_partition_two_buffers():
    p = Partition(Schema([("k", INT64)]), [[]])
    bufs = serialize_partition(p)
    assert len(bufs) == 2
    assert bufs[1] == b""
    assert deserialize_partition(bufs) == p


def test_int64_little_endian_bytes():
    p = Partition(Schema([("k", INT64)]), [[1, 2]])
    bufs = serialize_partition(p)
    assert bufs[1] == bytes.fromhex("0100000000000000" "0200000000000000")


def test_schema_block_layout():
    p = Partition(Schema([("ab", UTF8)]), [("x",)])
    block = serialize_partition(p)[0]
    # u32 count, u16 name length, name bytes, tag byte
    assert block == (1).to_bytes(4, "little") + (2).to_bytes(2, "little") + b"ab" + bytes([2])


def test_utf8_offsets_layout():
    p = Partition(Schema([("s", UTF8)]), [("", "ab", "c")])
    bufs = serialize_partition(p)
    offsets = np.frombuffer(bufs[1], dtype="<u8")
    assert list(offsets) == [0, 0, 2, 3]
    assert bufs[2] == b"abc"


def test_serialization_deterministic():
    p1 = Partition(Schema([("k", INT64), ("s", UTF8)]), [[5, 6], ("x", "yy")])
    p2 = Partition(Schema([("k", INT64), ("s", UTF8)]), [[5, 6], ("x", "yy")])
    assert encode_buffers(serialize_partition(p1)) == encode_buffers(serialize_partition(p2))


def test_missing_column_buffer_is_malformed():
    p = Partition(Schema([("a", INT64), ("b", INT64)]), [[1], [2]])
    bufs = serialize_partition(p)
    with pytest.raises(MalformedSchemaBlock):
        deserialize_partition(bufs[:-1])


def test_non_monotone_offsets_rejected():
    schema_block = serialize_partition(Partition(Schema([("s", UTF8)]), [("ab", "c")]))[0]
    bad_offsets = np.array([0, 3, 1], dtype="<u8").tobytes()
    with pytest.raises(LengthMismatch):
        deserialize_partition([schema_block, bad_offsets, b"abc"])


def test_column_length_disagreement_rejected():
    schema_block = serialize_partition(
        Partition(Schema([("a", INT64), ("b", INT64)]), [[1], [2]])
    )[0]
    one_row = np.array([1], dtype="<i8").tobytes()
    two_rows = np.array([1, 2], dtype="<i8").tobytes()
    with pytest.raises(LengthMismatch):
        deserialize_partition([schema_block, one_row, two_rows])


names = st.text(alphabet=st.characters(codec="utf-8"), min_size=1, max_size=12)


@st.composite
def partitions(draw, max_rows=60):
    ncols = draw(st.integers(1, 4))
    col_names = draw(
        st.lists(names, min_size=ncols, max_size=ncols, unique=True)
    )
    tags = draw(st.lists(st.sampled_from(list(TypeTag)), min_size=ncols, max_size=ncols))
    n = draw(st.integers(0, max_rows))
    cols = []
    for tag in tags:
        if tag == INT64:
            cols.append(draw(st.lists(st.integers(-(2**63), 2**63 - 1), min_size=n, max_size=n)))
        elif tag == FLOAT64:
            cols.append(
                draw(st.lists(st.floats(allow_nan=True, allow_infinity=True), min_size=n, max_size=n))
            )
        else:
            cols.append(tuple(draw(st.lists(st.text(max_size=8), min_size=n, max_size=n))))
    return Partition(Schema(list(zip(col_names, tags))), cols)


@settings(max_examples=200, deadline=None)
@given(partitions())
def test_partition_round_trip_property(p):
    assert deserialize_partition(serialize_partition(p)) == p


def test_partition_round_trip_ten_thousand_rows():
    rng = np.random.default_rng(7)
    n = 10_000
    p = Partition(
        Schema([("i", INT64), ("f", FLOAT64), ("s", UTF8)]),
        [
            rng.integers(-(2**62), 2**62, size=n, dtype=np.int64),
            rng.standard_normal(n),
            tuple(f"row-{i}" for i in range(n)),
        ],
    )
    assert deserialize_partition(serialize_partition(p)) == p
