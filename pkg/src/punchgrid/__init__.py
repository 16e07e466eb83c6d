"""punchgrid: message passing for NAT-bound workers, with BSP collectives,
a distributed join, a simulated-NAT test harness, and scaling benchmarks."""

from . import errors
from .comm import CommConfig, Communicator, comm_init
from .rendezvous import RetryPolicy, punch_connect
from .table import (
    DistributedTable,
    Partition,
    Schema,
    concat,
    distributed_join,
    fnv1a64,
    hash_partition,
    local_join,
)
from .transport import PeerAddress, TcpEnv
from .wire import Frame, MsgType, TypeTag, decode_frame, encode_frame

__all__ = [
    "errors",
    "CommConfig",
    "Communicator",
    "comm_init",
    "RetryPolicy",
    "punch_connect",
    "DistributedTable",
    "Partition",
    "Schema",
    "concat",
    "distributed_join",
    "fnv1a64",
    "hash_partition",
    "local_join",
    "PeerAddress",
    "TcpEnv",
    "Frame",
    "MsgType",
    "TypeTag",
    "decode_frame",
    "encode_frame",
]

__version__ = "0.1.0"
