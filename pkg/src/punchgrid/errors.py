"""Exception hierarchy shared by all punchgrid modules.

Leaf classes carry the names used throughout the public API so callers can
catch precisely the failure they care about (e.g. ``HolePunchFailed`` vs
``Timeout``) without string matching.
"""

from __future__ import annotations


class PunchgridError(Exception):
    """Base class for every error raised by this package."""


# --- wire / framing ---

class FrameError(PunchgridError):
    """Malformed frame on the wire."""


class BadMagic(FrameError):
    pass


class UnknownMsgType(FrameError):
    pass


class Truncated(FrameError):
    """Fewer bytes available than the header promises."""


class TrailingBytes(FrameError):
    """Extra bytes after a complete frame where exactly one was expected."""


# --- columnar serialization ---

class SerializationError(PunchgridError):
    pass


class UnsupportedType(SerializationError):
    pass


class MalformedSchemaBlock(SerializationError):
    pass


class LengthMismatch(SerializationError):
    """Column lengths disagree, or string offsets are inconsistent."""


# --- table operations ---

class TableError(PunchgridError):
    pass


class UnsupportedKeyType(TableError):
    pass


class SchemaMismatch(TableError):
    pass


class SchemaNameCollision(TableError):
    pass


# --- transport / network ---

class TransportError(PunchgridError):
    pass


class BindFailed(TransportError):
    pass


class AddressInUse(TransportError):
    pass


class PeerClosed(TransportError):
    """The remote end closed or the connection broke (e.g. NAT expiry)."""


class Timeout(PunchgridError, TimeoutError):
    """An operation did not complete within its deadline."""


class DeadlockDetected(PunchgridError):
    """All simulated tasks are blocked with no pending timers."""


# --- bootstrap / coordination ---

class KvError(PunchgridError):
    """The key-value server rejected a command."""


class WorldFull(PunchgridError):
    """More rank requests than the declared world size."""


class LockHeld(PunchgridError):
    """Caller already holds a lock of this name."""


# --- rendezvous / hole punching ---

class DuplicateRank(PunchgridError):
    """Same (job, rank) registered from two different source addresses."""


class HolePunchFailed(PunchgridError):
    """No direct connection could be established within the retry budget."""

    def __init__(self, peer_rank: int, reason: str = ""):
        self.peer_rank = peer_rank
        msg = f"hole punch to rank {peer_rank} failed"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


# --- communicator ---

class CommError(PunchgridError):
    pass


class SizeMismatch(CommError):
    """allgather called with unequal contribution sizes."""


class OutstandingRequests(CommError):
    """finalize called while non-blocking requests are still pending."""


class CommClosed(CommError):
    """Operation attempted on a finalized communicator."""


# --- benchmarks ---

class NoData(PunchgridError):
    """Aggregation requested for a parallelism level with no successful trials."""


class DivideByZero(PunchgridError):
    """Speedup requested against a zero execution time."""
