"""Independent reference implementations used to freeze expected test values.

Everything here is deliberately written against the row/byte-level definitions
(no numpy vectorization, no shared code with the package) so the main
implementations are checked against a separate path.
"""

import struct

_M64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64_bytes(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _M64
    return h


def fnv1a64_key(key: int) -> int:
    return fnv1a64_bytes(struct.pack("<q", key))


def bucket_of(key: int, num_buckets: int) -> int:
    return fnv1a64_key(key) % num_buckets


def nested_loop_join(left_rows, right_rows, key_col):
    """Literal nested-loop inner join over row tuples, left-major order.

    Output rows are left columns followed by right columns minus the key.
    """
    out = []
    for lrow in left_rows:
        k = lrow[key_col]
        for rrow in right_rows:
            if rrow[key_col] == k:
                out.append(tuple(lrow) + tuple(v for c, v in enumerate(rrow) if c != key_col))
    return out


def indexed_nested_loop_join(left_rows, right_rows, key_col):
    """Same output as nested_loop_join, with the inner scan pre-indexed by key.

    Used where the quadratic scan would dominate the test budget; row-for-row
    identical to nested_loop_join (verified by its own test).
    """
    by_key: dict = {}
    for rrow in right_rows:
        by_key.setdefault(rrow[key_col], []).append(rrow)
    out = []
    for lrow in left_rows:
        for rrow in by_key.get(lrow[key_col], ()):
            out.append(tuple(lrow) + tuple(v for c, v in enumerate(rrow) if c != key_col))
    return out


def splitmix64_reference(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4B5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64
