"""Columnar tables and the distributed dataframe shard.

A Partition is one rank's shard: an ordered set of equal-length columns
(int64 / float64 numpy arrays, tuples of str for UTF8).  Partitions are
treated as frozen after construction and are safe to share read-only.

The distributed join repartitions both sides by FNV-1a 64 of the key bytes
modulo the world size, exchanges buckets with all-to-all, and runs a local
sort-merge join on what arrives, so every output key lives on the rank its
hash selects.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    LengthMismatch,
    SchemaMismatch,
    SchemaNameCollision,
    UnsupportedKeyType,
)
from .wire import TypeTag, decode_buffers, deserialize_partition, encode_buffers, serialize_partition

FNV_OFFSET_BASIS = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@dataclass(frozen=True)
class Schema:
    """Ordered (name, TypeTag) pairs; names unique, at least one column."""

    columns: tuple[tuple[str, TypeTag], ...]

    def __init__(self, columns: Iterable[tuple[str, TypeTag]]):
        cols = tuple((str(name), TypeTag(tag)) for name, tag in columns)
        if not cols:
            raise ValueError("schema must have at least one column")
        names = [name for name, _ in cols]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate column names in {names}")
        object.__setattr__(self, "columns", cols)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.columns)

    @property
    def tags(self) -> tuple[TypeTag, ...]:
        return tuple(tag for _, tag in self.columns)

    def __len__(self) -> int:
        return len(self.columns)


def _coerce_column(tag: TypeTag, values) -> np.ndarray | tuple[str, ...]:
    if tag == TypeTag.INT64:
        return np.ascontiguousarray(values, dtype=np.int64)
    if tag == TypeTag.FLOAT64:
        return np.ascontiguousarray(values, dtype=np.float64)
    return tuple(values)


class Partition:
    """One equal-length column set under a schema."""

    __slots__ = ("schema", "columns", "num_rows")

    def __init__(self, schema: Schema, columns: Sequence):
        if len(columns) != len(schema):
            raise LengthMismatch(
                f"schema has {len(schema)} columns, got {len(columns)} column arrays"
            )
        coerced = tuple(_coerce_column(tag, col) for (_, tag), col in zip(schema.columns, columns))
        lengths = {len(col) for col in coerced}
        if len(lengths) > 1:
            raise LengthMismatch(f"column lengths disagree: {sorted(lengths)}")
        self.schema = schema
        self.columns = coerced
        self.num_rows = lengths.pop() if lengths else 0

    @classmethod
    def empty(cls, schema: Schema) -> "Partition":
        return cls(schema, [[] for _ in schema.columns])

    def row(self, i: int) -> tuple:
        return tuple(
            col[i] if isinstance(col, tuple) else col[i].item() for col in self.columns
        )

    def rows(self) -> list[tuple]:
        return [self.row(i) for i in range(self.num_rows)]

    def take(self, indices: np.ndarray) -> "Partition":
        """New partition with the given rows, in the given order."""
        out = []
        for col in self.columns:
            if isinstance(col, tuple):
                out.append(tuple(col[int(i)] for i in indices))
            else:
                out.append(col[indices])
        return Partition(self.schema, out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Partition):
            return NotImplemented
        if self.schema != other.schema or self.num_rows != other.num_rows:
            return False
        for (_, tag), a, b in zip(self.schema.columns, self.columns, other.columns):
            if tag == TypeTag.UTF8:
                if a != b:
                    return False
            elif tag == TypeTag.FLOAT64:
                # bit-exact, so NaN payloads survive round-trip comparisons
                if a.tobytes() != b.tobytes():
                    return False
            else:
                if not np.array_equal(a, b):
                    return False
        return True

    def __repr__(self) -> str:
        return f"Partition({self.schema.names}, rows={self.num_rows})"


@dataclass
class DistributedTable:
    """This rank's shard of a table partitioned across world_size ranks."""

    local: Partition
    world_size: int
    rank: int


def concat(parts: Sequence[Partition]) -> Partition:
    """Concatenate partitions with identical schemas, preserving argument order."""
    if not parts:
        raise ValueError("concat needs at least one partition")
    schema = parts[0].schema
    for p in parts[1:]:
        if p.schema != schema:
            raise SchemaMismatch(f"cannot concat {p.schema.columns} onto {schema.columns}")
    if len(parts) == 1:
        return parts[0]
    out = []
    for i, (_, tag) in enumerate(schema.columns):
        if tag == TypeTag.UTF8:
            merged: tuple = ()
            for p in parts:
                merged = merged + p.columns[i]
            out.append(merged)
        else:
            out.append(np.concatenate([p.columns[i] for p in parts]))
    return Partition(schema, out)


def fnv1a64(keys) -> np.ndarray:
    """Vectorized FNV-1a 64 over the 8 little-endian bytes of each int64 key."""
    k = np.ascontiguousarray(keys, dtype=np.int64).view(np.uint64)
    h = np.full(k.shape, FNV_OFFSET_BASIS, dtype=np.uint64)
    mask = np.uint64(0xFF)
    for shift in range(0, 64, 8):
        h = (h ^ ((k >> np.uint64(shift)) & mask)) * FNV_PRIME
    return h


def _require_int64_key(part: Partition, key_col: int, side: str) -> None:
    tag = part.schema.columns[key_col][1]
    if tag != TypeTag.INT64:
        raise UnsupportedKeyType(f"{side} key column {key_col} has tag {tag.name}, need INT64")


def hash_partition(part: Partition, key_col: int, num_buckets: int) -> list[Partition]:
    """Split rows into num_buckets by fnv1a64(key) mod buckets, keeping row order."""
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    _require_int64_key(part, key_col, "input")
    if num_buckets == 1:
        return [part]
    buckets = (fnv1a64(part.columns[key_col]) % np.uint64(num_buckets)).astype(np.int64)
    order = np.argsort(buckets, kind="stable")
    bounds = np.searchsorted(buckets[order], np.arange(num_buckets + 1))
    return [part.take(order[bounds[b] : bounds[b + 1]]) for b in range(num_buckets)]


def _join_output_schema(left: Schema, right: Schema, key_col: int) -> tuple[Schema, list[int]]:
    names = list(left.names)
    cols: list[tuple[str, TypeTag]] = list(left.columns)
    right_indices = []
    for i, (name, tag) in enumerate(right.columns):
        if i == key_col:
            continue
        out_name = name
        if out_name in names:
            out_name = out_name + "_r"
        if out_name in names:
            raise SchemaNameCollision(f"column {name!r} collides even after _r suffix")
        names.append(out_name)
        cols.append((out_name, tag))
        right_indices.append(i)
    return Schema(cols), right_indices


def local_join(left: Partition, right: Partition, key_col: int) -> Partition:
    """Inner sort-merge join on an int64 key column.

    Output rows are every (left, right) pair with equal keys, ordered by key
    ascending, then left row order, then right row order.  The right key
    column is dropped; colliding right names get an ``_r`` suffix.
    """
    _require_int64_key(left, key_col, "left")
    _require_int64_key(right, key_col, "right")
    out_schema, right_indices = _join_output_schema(left.schema, right.schema, key_col)

    lk = left.columns[key_col]
    rk = right.columns[key_col]
    lperm = np.argsort(lk, kind="stable")
    rperm = np.argsort(rk, kind="stable")
    l_uniq, l_start, l_count = np.unique(lk[lperm], return_index=True, return_counts=True)
    r_uniq, r_start, r_count = np.unique(rk[rperm], return_index=True, return_counts=True)
    common, l_pos, r_pos = np.intersect1d(
        l_uniq, r_uniq, assume_unique=True, return_indices=True
    )

    if len(common) == 0:
        return Partition.empty(out_schema)

    a = l_count[l_pos]          # left multiplicity per common key
    b = r_count[r_pos]          # right multiplicity per common key
    sizes = a * b
    total = int(sizes.sum())
    starts = np.zeros(len(sizes), dtype=np.int64)
    np.cumsum(sizes[:-1], out=starts[1:])
    block = np.repeat(np.arange(len(sizes)), sizes)
    within = np.arange(total, dtype=np.int64) - starts[block]
    li = lperm[l_start[l_pos][block] + within // b[block]]
    ri = rperm[r_start[r_pos][block] + within % b[block]]

    gathered_left = left.take(li)
    gathered_right = right.take(ri)
    out_cols = list(gathered_left.columns) + [gathered_right.columns[i] for i in right_indices]
    return Partition(out_schema, out_cols)


# Distinct payload channels for the two all-to-all rounds of a join.
JOIN_LEFT_CHANNEL = 0
JOIN_RIGHT_CHANNEL = 1


def distributed_join(comm, left: DistributedTable, right: DistributedTable, key_col: int) -> DistributedTable:
    """Hash-partition both sides, exchange buckets via all-to-all, join locally.

    The result shard on each rank is the complete global inner join restricted
    to keys whose hash lands on that rank.
    """
    w = comm.world_size
    for name, table in (("left", left), ("right", right)):
        if table.world_size != w or table.rank != comm.rank:
            raise ValueError(
                f"{name} table is sharded for rank {table.rank}/{table.world_size}, "
                f"communicator is rank {comm.rank}/{w}"
            )
    my_left = _exchange(comm, left.local, key_col, JOIN_LEFT_CHANNEL)
    my_right = _exchange(comm, right.local, key_col, JOIN_RIGHT_CHANNEL)
    joined = local_join(my_left, my_right, key_col)
    return DistributedTable(joined, w, comm.rank)


def _exchange(comm, part: Partition, key_col: int, channel: int) -> Partition:
    buckets = hash_partition(part, key_col, comm.world_size)
    out = [encode_buffers(serialize_partition(b)) for b in buckets]
    received = comm.alltoallv(out, channel=channel)
    return concat([deserialize_partition(decode_buffers(blob)) for blob in received])


# --- CSV fixtures (bench and tests only) ---

def write_csv(part: Partition, path) -> None:
    """Write a partition with a leading schema line, then header, then rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# schema: " + ",".join(f"{n}:{t.name}" for n, t in part.schema.columns) + "\n")
        writer = csv.writer(fh)
        writer.writerow(part.schema.names)
        for i in range(part.num_rows):
            writer.writerow([_format_value(v) for v in part.row(i)])


def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv(path) -> Partition:
    """Inverse of write_csv."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        schema_line = fh.readline().strip()
        prefix = "# schema: "
        if not schema_line.startswith(prefix):
            raise ValueError(f"missing schema line in {path}")
        cols = []
        for item in schema_line[len(prefix):].split(","):
            name, _, tagname = item.rpartition(":")
            cols.append((name, TypeTag[tagname]))
        schema = Schema(cols)
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != schema.names:
            raise ValueError(f"header {header} does not match schema names {schema.names}")
        raw_cols: list[list] = [[] for _ in cols]
        for row in reader:
            for i, ((_, tag), cell) in enumerate(zip(cols, row)):
                if tag == TypeTag.INT64:
                    raw_cols[i].append(int(cell))
                elif tag == TypeTag.FLOAT64:
                    raw_cols[i].append(float(cell))
                else:
                    raw_cols[i].append(cell)
    return Partition(schema, raw_cols)
