"""The communicator: bootstrap + rendezvous init, point-to-point messaging,
and the BSP collectives.

Initialization claims a rank from the KV counter, registers with the
rendezvous server from the listening port, hole-punches a full mesh, and
runs an implicit barrier so no rank returns before every rank is connected.

Message matching is FIFO per (source rank, tag).  Tags at or above
0xFFFF0000 are reserved for collective internals; user tags live below.
PING/PONG keepalives are emitted toward every peer while an operation is
blocked waiting and are filtered out before matching, so long barriers do
not let NAT mappings idle out.  Self-addressed messages short-circuit in
memory.

Collectives are linear (gather to rank 0, fan out from the root): world
sizes here are small enough that deterministic ordering is worth more than
log-depth trees.  The all-to-all runs W-1 pairwise steps; within a step the
lower rank of each send pair sends first and the higher receives first,
which keeps every blocking send matched with an already-posted receive.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .bootstrap import KvClient, WorkerRegistration, next_rank, put_endpoint, validate_job_id
from .errors import (
    CommClosed,
    OutstandingRequests,
    PeerClosed,
    SizeMismatch,
    Timeout,
)
from .rendezvous import PunchSession, RendezvousClient, RetryPolicy
from .transport import PeerAddress, TcpEnv
from .wire import Frame, MsgType, decode_buffers, encode_buffers

TAG_INTERNAL_BASE = 0xFFFF0000
TAG_BARRIER_GATHER = TAG_INTERNAL_BASE + 1
TAG_BARRIER_RELEASE = TAG_INTERNAL_BASE + 2
TAG_BCAST = TAG_INTERNAL_BASE + 3
TAG_GATHER = TAG_INTERNAL_BASE + 4
TAG_A2A_BASE = TAG_INTERNAL_BASE + 0x100  # + channel, one per concurrent all-to-all round

_U64 = struct.Struct("<Q")


@dataclass
class CommConfig:
    connect_retry: RetryPolicy = field(default_factory=RetryPolicy)
    keepalive_interval: Optional[float] = 0.2  # None disables keepalive
    op_timeout: float = 60.0

    def __post_init__(self):
        if self.keepalive_interval is not None and self.keepalive_interval <= 0:
            self.keepalive_interval = None
        if self.keepalive_interval is not None and self.keepalive_interval >= self.op_timeout:
            raise ValueError("keepalive_interval must be smaller than op_timeout")


class Request:
    """Handle for a pending non-blocking operation."""

    __slots__ = ("comm", "kind", "peer", "tag", "done", "value", "error")

    def __init__(self, comm: "Communicator", kind: str, peer: int, tag: int):
        self.comm = comm
        self.kind = kind
        self.peer = peer
        self.tag = tag
        self.done = False
        self.value: Optional[bytes] = None
        self.error: Optional[Exception] = None

    @property
    def state(self) -> str:
        if not self.done:
            return "pending"
        return "failed" if self.error is not None else "complete"

    def wait(self, timeout: Optional[float] = None) -> Optional[bytes]:
        return self.comm.wait(self, timeout)

    def __repr__(self):
        return f"Request({self.kind} peer={self.peer} tag={self.tag} {self.state})"


class Communicator:
    def __init__(self, env, job: str, rank: int, world_size: int, peers: dict, listener, config: CommConfig):
        self.env = env
        self.job = job
        self.rank = rank
        self.world_size = world_size
        self.config = config
        self._peers = peers  # rank -> connection
        self._listener = listener
        self._buffered: dict[tuple[int, int], deque[bytes]] = {}
        self._waiting: dict[tuple[int, int], deque[Request]] = {}
        self._outstanding: set[Request] = set()
        self._closed = False
        self._next_keepalive = self._keepalive_reset()

    @property
    def peers(self) -> dict:
        return dict(self._peers)

    # --- plumbing ---

    def _check_open(self):
        if self._closed:
            raise CommClosed("communicator is finalized")

    def _check_user_tag(self, tag: int):
        if not 0 <= tag < TAG_INTERNAL_BASE:
            raise ValueError(f"user tags must be below {TAG_INTERNAL_BASE:#x}, got {tag:#x}")

    def _conn(self, peer: int):
        try:
            return self._peers[peer]
        except KeyError:
            raise ValueError(f"rank {peer} is not a peer of rank {self.rank}") from None

    def _deliver_local(self, src: int, tag: int, payload: bytes):
        key = (src, tag)
        waiters = self._waiting.get(key)
        if waiters:
            req = waiters.popleft()
            self._complete(req, payload)
        else:
            self._buffered.setdefault(key, deque()).append(payload)

    def _complete(self, req: Request, payload: Optional[bytes], error: Optional[Exception] = None):
        req.value = payload
        req.error = error
        req.done = True
        self._outstanding.discard(req)

    def _dispatch(self, conn, frame: Frame):
        if frame.msg_type == MsgType.PING:
            try:
                conn.try_send_frame(Frame(MsgType.PONG, self.rank))
            except PeerClosed:
                pass
            return
        if frame.msg_type == MsgType.DATA:
            self._deliver_local(frame.src_rank, frame.tag, frame.payload)
        # PONG and stray punch-era frames are dropped

    def _drain(self) -> bool:
        progressed = False
        for conn in self._peers.values():
            while True:
                frame = conn.try_recv_frame()
                if frame is None:
                    break
                progressed = True
                self._dispatch(conn, frame)
        return progressed

    def _fail_requests_for_dead_peers(self):
        for peer, conn in self._peers.items():
            if not conn.is_dead():
                continue
            for (src, tag), waiters in list(self._waiting.items()):
                if src != peer:
                    continue
                while waiters:
                    req = waiters.popleft()
                    self._complete(
                        req, None, PeerClosed(f"rank {peer} closed (reason: {_why(conn)})")
                    )

    def _keepalive_reset(self) -> Optional[float]:
        if self.config.keepalive_interval is None:
            return None
        return self.env.now() + self.config.keepalive_interval

    def _keepalive_tick(self):
        if self._next_keepalive is None:
            return
        now = self.env.now()
        if now < self._next_keepalive:
            return
        ping = Frame(MsgType.PING, self.rank)
        for conn in self._peers.values():
            if not conn.is_dead():
                try:
                    conn.try_send_frame(ping)
                except PeerClosed:
                    pass
        self._next_keepalive = now + self.config.keepalive_interval

    def _pump(self, deadline: float):
        """Make progress until something is dispatched or the deadline hits."""
        if self._drain():
            return
        now = self.env.now()
        slice_end = deadline
        if self._next_keepalive is not None:
            slice_end = min(slice_end, self._next_keepalive)
        timeout = max(slice_end - now, 0.0)
        # dead connections stay in _peers for error reporting but must not
        # short-circuit the wait, or a finished peer would spin this loop
        live = [c for c in self._peers.values() if not c.is_dead()]
        self.env.wait_any(live, timeout=min(timeout, 0.5))
        self._drain()
        self._keepalive_tick()
        self._fail_requests_for_dead_peers()

    # --- point to point ---

    def send(self, dst: int, tag: int, data: bytes) -> None:
        self._check_open()
        self._check_user_tag(tag)
        self._send_any(dst, tag, data)

    def _send_any(self, dst: int, tag: int, data: bytes) -> None:
        if dst == self.rank:
            self._deliver_local(self.rank, tag, bytes(data))
            return
        conn = self._conn(dst)
        frame = Frame(MsgType.DATA, self.rank, tag, bytes(data))
        conn.send_frame(frame, deadline=self.env.now() + self.config.op_timeout)

    def recv(self, src: int, tag: int) -> bytes:
        self._check_open()
        self._check_user_tag(tag)
        return self._recv_any(src, tag)

    def _recv_any(self, src: int, tag: int) -> bytes:
        req = self._irecv_any(src, tag)
        try:
            return self.wait(req)
        except Exception:
            self._cancel(req)
            raise

    def _cancel(self, req: Request) -> None:
        """Drop a pending internal request so it cannot leak into finalize."""
        if req.done:
            return
        waiters = self._waiting.get((req.peer, req.tag))
        if waiters and req in waiters:
            waiters.remove(req)
        self._complete(req, None, Timeout("request canceled"))

    def isend(self, dst: int, tag: int, data: bytes) -> Request:
        """Queue a send; completion means locally buffered or delivered."""
        self._check_open()
        self._check_user_tag(tag)
        req = Request(self, "send", dst, tag)
        if dst == self.rank:
            self._deliver_local(self.rank, tag, bytes(data))
            self._complete(req, None)
            return req
        conn = self._conn(dst)
        frame = Frame(MsgType.DATA, self.rank, tag, bytes(data))
        try:
            if not conn.try_send_frame(frame):
                # window full: fall back to the blocking path
                conn.send_frame(frame, deadline=self.env.now() + self.config.op_timeout)
            self._complete(req, None)
        except PeerClosed as exc:
            self._complete(req, None, exc)
        return req

    def irecv(self, src: int, tag: int) -> Request:
        self._check_open()
        self._check_user_tag(tag)
        return self._irecv_any(src, tag)

    def _irecv_any(self, src: int, tag: int) -> Request:
        if src != self.rank:
            self._conn(src)  # validate peer
        req = Request(self, "recv", src, tag)
        key = (src, tag)
        buffered = self._buffered.get(key)
        if buffered:
            self._complete(req, buffered.popleft())
            return req
        self._waiting.setdefault(key, deque()).append(req)
        self._outstanding.add(req)
        return req

    def wait(self, req: Request, timeout: Optional[float] = None) -> Optional[bytes]:
        """Block until the request completes; idempotent once done."""
        if req.comm is not self:
            raise ValueError("request belongs to a different communicator")
        deadline = self.env.now() + (self.config.op_timeout if timeout is None else timeout)
        while not req.done:
            self._check_open()
            self._drain()
            self._fail_requests_for_dead_peers()
            if req.done:
                break
            if self.env.now() >= deadline:
                raise Timeout(f"wait on {req!r} timed out")
            self._pump(deadline)
        if req.error is not None:
            raise req.error
        return req.value

    # --- collectives ---

    def barrier(self) -> None:
        """Gather zero-byte tokens to rank 0, then rank 0 releases everyone."""
        self._check_open()
        if self.world_size == 1:
            return
        if self.rank == 0:
            for r in range(1, self.world_size):
                self._recv_any(r, TAG_BARRIER_GATHER)
            for r in range(1, self.world_size):
                self._send_any(r, TAG_BARRIER_RELEASE, b"")
        else:
            self._send_any(0, TAG_BARRIER_GATHER, b"")
            self._recv_any(0, TAG_BARRIER_RELEASE)

    def bcast(self, root: int, data: bytes = b"") -> bytes:
        """Linear fan-out of root's bytes; every rank returns them."""
        self._check_open()
        self._validate_root(root)
        if self.rank == root:
            payload = bytes(data)
            for r in range(self.world_size):
                if r != root:
                    self._send_any(r, TAG_BCAST, payload)
            return payload
        return self._recv_any(root, TAG_BCAST)

    def gather(self, root: int, data: bytes) -> Optional[list[bytes]]:
        """Rank-ordered contributions at root; non-roots return None.

        Contributions may have unequal sizes (identical contract to gatherv).
        """
        self._check_open()
        self._validate_root(root)
        if self.rank == root:
            parts: list[Optional[bytes]] = [None] * self.world_size
            parts[root] = bytes(data)
            for r in range(self.world_size):
                if r != root:
                    parts[r] = self._recv_any(r, TAG_GATHER)
            return parts  # type: ignore[return-value]
        self._send_any(root, TAG_GATHER, data)
        return None

    gatherv = gather

    def _allgather_fixed(self, item: bytes) -> list[bytes]:
        parts = self.gather(0, item)
        if self.rank == 0:
            blob = encode_buffers(parts)
        else:
            blob = b""
        return decode_buffers(self.bcast(0, blob))

    def allgatherv(self, data: bytes) -> list[bytes]:
        """Every rank returns the identical rank-ordered contribution list.

        An 8-byte length vector travels first, then the payloads.
        """
        self._check_open()
        if self.world_size == 1:
            return [bytes(data)]
        lengths = [
            _U64.unpack(raw)[0] for raw in self._allgather_fixed(_U64.pack(len(data)))
        ]
        parts = self.gather(0, data)
        blob = encode_buffers(parts) if self.rank == 0 else b""
        out = decode_buffers(self.bcast(0, blob))
        got = [len(x) for x in out]
        if got != lengths:
            raise PeerClosed(f"allgatherv length vector mismatch: {lengths} vs {got}")
        return out

    def allgather(self, data: bytes) -> list[bytes]:
        """allgatherv restricted to equal contribution sizes."""
        out = self.allgatherv(data)
        sizes = {len(x) for x in out}
        if len(sizes) > 1:
            raise SizeMismatch(f"allgather contributions differ in size: {sorted(sizes)}")
        return out

    def alltoallv(self, out: list[bytes], channel: int = 0) -> list[bytes]:
        """Pairwise exchange: result[j] here equals out[self] on rank j.

        out[self] is copied locally without touching the network.  Steps walk
        s = 1..W-1 with send partner (rank+s) mod W and receive partner
        (rank-s) mod W; the lower rank of a send pair sends before receiving.
        """
        self._check_open()
        if len(out) != self.world_size:
            raise ValueError(f"need {self.world_size} outputs, got {len(out)}")
        if not 0 <= channel < 0x100:
            raise ValueError("channel must be in [0, 256)")
        result: list[Optional[bytes]] = [None] * self.world_size
        result[self.rank] = bytes(out[self.rank])
        tag = TAG_A2A_BASE + channel
        for step in range(1, self.world_size):
            send_to = (self.rank + step) % self.world_size
            recv_from = (self.rank - step) % self.world_size
            if self.rank < send_to:
                self._send_any(send_to, tag, out[send_to])
                result[recv_from] = self._recv_any(recv_from, tag)
            else:
                result[recv_from] = self._recv_any(recv_from, tag)
                self._send_any(send_to, tag, out[send_to])
        return result  # type: ignore[return-value]

    def _validate_root(self, root: int):
        if not 0 <= root < self.world_size:
            raise ValueError(f"root {root} outside world of {self.world_size}")

    # --- teardown ---

    def finalize(self) -> None:
        """Close every connection; idempotent; further operations error."""
        if self._closed:
            return
        if self._outstanding:
            raise OutstandingRequests(
                f"{len(self._outstanding)} request(s) still pending at finalize"
            )
        for conn in self._peers.values():
            conn.close()
        if self._listener is not None:
            self._listener.close()
        self._closed = True


def _why(conn) -> str:
    return getattr(conn, "broken_reason", "") or "closed"


def comm_init(
    job: str,
    kv_addr: PeerAddress | str,
    rendezvous_addr: PeerAddress | str,
    world_size: int,
    config: Optional[CommConfig] = None,
    *,
    env=None,
) -> Communicator:
    """Bootstrap a full-mesh communicator; returns after all ranks connect."""
    validate_job_id(job)
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    env = env or TcpEnv()
    config = config or CommConfig()
    if isinstance(kv_addr, str):
        kv_addr = PeerAddress.parse(kv_addr)
    if isinstance(rendezvous_addr, str):
        rendezvous_addr = PeerAddress.parse(rendezvous_addr)

    kv = KvClient(env, kv_addr, timeout=config.op_timeout)
    try:
        rank = next_rank(kv, job, world_size)
        listener = env.listen(0)
        port = listener.bound_address.port
        try:
            rdv = RendezvousClient(
                env, rendezvous_addr, job, rank, world_size,
                local_port=port, timeout=config.op_timeout,
            )
        except Exception:
            listener.close()
            raise
        put_endpoint(
            kv, job, WorkerRegistration(rank, world_size, f"{env.host_name}:{port}")
        )
        session = PunchSession(env, listener, rdv, config.connect_retry)
        peers = {}
        try:
            for peer in range(world_size):
                if peer != rank:
                    peers[peer] = session.connect_to(peer, timeout=config.op_timeout)
            session.close()  # drops stray half-open dials; kept peers already popped
        except Exception:
            for conn in peers.values():
                conn.close()
            session.close()
            listener.close()
            raise
        finally:
            rdv.close()
    finally:
        kv.close()

    comm = Communicator(env, job, rank, world_size, peers, listener, config)
    comm.barrier()  # no rank proceeds until every rank is connected
    return comm
