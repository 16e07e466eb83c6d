"""Key-value coordination: atomic rank assignment, endpoint registry,
rank-ordered locks, and per-job metadata clearing.

The built-in server speaks KV_CMD/KV_REPLY frames with a small text command
payload (UTF-8, space separated):

    INCR <key>              -> "OK <value-before-increment>"
    GET <key>               -> "OK <base64>" | "NIL"
    SET <key> <base64>      -> "OK"
    DEL <prefix>            -> "OK <removed-key-count>"
    LOCK <name> <rank>      -> "OK" (reply held until granted)
    UNLOCK <name> <rank>    -> "OK"
    anything else           -> "ERR <reason>"

All job state lives under "<job>/" keys, so clearing a job is one DEL and
two jobs can never interact.  Lock grants always go to the lowest-ranked
waiter at release time; metadata from a finished run must be cleared with
clear_job or the next run's rank counter starts where the last one stopped
and rank assignment fails.
"""

from __future__ import annotations

import base64
import itertools
import threading
from dataclasses import dataclass, field
from typing import Optional

from .errors import KvError, LockHeld, PeerClosed, Timeout, WorldFull
from .transport import PeerAddress, TcpEnv, serve_loop
from .wire import Frame, MsgType

ENDPOINT_POLL_INTERVAL = 0.05
DEFAULT_ENDPOINT_TIMEOUT = 30.0
DEFAULT_REQUEST_TIMEOUT = 30.0


def validate_job_id(job: str) -> str:
    encoded = job.encode("utf-8")
    if not 1 <= len(encoded) <= 64:
        raise ValueError(f"job id must be 1-64 UTF-8 bytes, got {len(encoded)}")
    if any(ch.isspace() for ch in job):
        raise ValueError(f"job id may not contain whitespace: {job!r}")
    return job


@dataclass(frozen=True)
class WorkerRegistration:
    rank: int
    world_size: int
    endpoint: str  # "host:port"

    def __post_init__(self):
        if not 0 <= self.rank < self.world_size:
            raise ValueError(f"rank {self.rank} outside world of {self.world_size}")
        PeerAddress.parse(self.endpoint)

    def encode(self) -> bytes:
        return f"{self.rank} {self.world_size} {self.endpoint}".encode("utf-8")

    @classmethod
    def decode(cls, raw: bytes) -> "WorkerRegistration":
        rank, world_size, endpoint = raw.decode("utf-8").split(" ")
        return cls(int(rank), int(world_size), endpoint)


@dataclass(frozen=True)
class LockHandle:
    job: str
    name: str
    holder_rank: int


@dataclass
class _LockState:
    holder_rank: Optional[int] = None
    holder_conn: object = None
    waiters: list = field(default_factory=list)  # (rank, conn, tag)


class KvServerCore:
    """Transport-agnostic command processor; one instance per server."""

    def __init__(self):
        self._values: dict[str, bytes] = {}
        self._locks: dict[str, _LockState] = {}

    # serve_loop interface

    def handle(self, conn, frame: Frame):
        if frame.msg_type != MsgType.KV_CMD:
            return []
        reply = lambda payload: [(conn, Frame(MsgType.KV_REPLY, 0, frame.tag, payload))]
        try:
            text = frame.payload.decode("utf-8")
        except UnicodeDecodeError:
            return reply(b"ERR command not UTF-8")
        parts = text.split(" ")
        cmd = parts[0] if parts else ""
        try:
            if cmd == "INCR" and len(parts) == 2:
                return reply(self._incr(parts[1]))
            if cmd == "GET" and len(parts) == 2:
                return reply(self._get(parts[1]))
            if cmd == "SET" and len(parts) == 3:
                return reply(self._set(parts[1], parts[2]))
            if cmd == "DEL" and len(parts) == 2:
                return self._del(parts[1], reply)
            if cmd == "LOCK" and len(parts) == 3:
                return self._lock(parts[1], int(parts[2]), conn, frame.tag)
            if cmd == "UNLOCK" and len(parts) == 3:
                return self._unlock(parts[1], int(parts[2]), reply)
        except ValueError as exc:
            return reply(f"ERR {exc}".encode("utf-8"))
        return reply(b"ERR bad-command")

    def on_disconnect(self, conn):
        replies = []
        for name, state in self._locks.items():
            state.waiters = [w for w in state.waiters if w[1] is not conn]
            if state.holder_conn is conn:
                state.holder_rank = None
                state.holder_conn = None
                replies.extend(self._grant_next(name, state))
        return replies

    def next_tick_time(self):
        return None

    def on_tick(self, now):
        return []

    # commands

    def _incr(self, key: str) -> bytes:
        raw = self._values.get(key, b"0")
        try:
            current = int(raw.decode("ascii"))
        except (UnicodeDecodeError, ValueError):
            return b"ERR not-a-counter"
        self._values[key] = str(current + 1).encode("ascii")
        return f"OK {current}".encode("ascii")

    def _get(self, key: str) -> bytes:
        raw = self._values.get(key)
        if raw is None:
            return b"NIL"
        return b"OK " + base64.b64encode(raw)

    def _set(self, key: str, b64: str) -> bytes:
        try:
            self._values[key] = base64.b64decode(b64.encode("ascii"), validate=True)
        except Exception:
            return b"ERR bad-base64"
        return b"OK"

    def _del(self, prefix: str, reply):
        doomed = [k for k in self._values if k.startswith(prefix)]
        for k in doomed:
            del self._values[k]
        out = reply(f"OK {len(doomed)}".encode("ascii"))
        for name in [n for n in self._locks if n.startswith(prefix)]:
            state = self._locks.pop(name)
            for _, conn, tag in state.waiters:
                out.append((conn, Frame(MsgType.KV_REPLY, 0, tag, b"ERR lock-cleared")))
        return out

    def _lock(self, name: str, rank: int, conn, tag: int):
        state = self._locks.setdefault(name, _LockState())
        if state.holder_rank is None and not state.waiters:
            state.holder_rank = rank
            state.holder_conn = conn
            return [(conn, Frame(MsgType.KV_REPLY, 0, tag, b"OK"))]
        if state.holder_rank == rank:
            return [(conn, Frame(MsgType.KV_REPLY, 0, tag, b"ERR already-held"))]
        state.waiters.append((rank, conn, tag))
        return []  # reply held until granted

    def _unlock(self, name: str, rank: int, reply):
        state = self._locks.get(name)
        if state is None or state.holder_rank != rank:
            return reply(b"ERR not-holder")
        state.holder_rank = None
        state.holder_conn = None
        out = reply(b"OK")
        out.extend(self._grant_next(name, state))
        return out

    def _grant_next(self, name: str, state: _LockState):
        if state.holder_rank is not None or not state.waiters:
            return []
        state.waiters.sort(key=lambda w: w[0])
        rank, conn, tag = state.waiters.pop(0)
        state.holder_rank = rank
        state.holder_conn = conn
        return [(conn, Frame(MsgType.KV_REPLY, 0, tag, b"OK"))]


def kv_serve(env, port: int = 0, *, stop=None, poll_interval=None, on_ready=None) -> None:
    """Run the KV server on env until stop() is true (blocking)."""
    listener = env.listen(port)
    if on_ready is not None:
        on_ready(listener.bound_address)
    serve_loop(env, listener, KvServerCore(), stop=stop, poll_interval=poll_interval)


def start_kv_thread(bind_host: str = "127.0.0.1", port: int = 0):
    """Spawn a TCP KV server thread; returns (address, stop_fn)."""
    return _start_server_thread(kv_serve, bind_host, port, "kv-server")


def _start_server_thread(serve_fn, bind_host: str, port: int, name: str):
    env = TcpEnv(bind_host)
    stop_flag = threading.Event()
    ready: list[PeerAddress] = []
    ready_evt = threading.Event()

    def on_ready(addr):
        ready.append(addr)
        ready_evt.set()

    thread = threading.Thread(
        target=serve_fn,
        args=(env, port),
        kwargs={"stop": stop_flag.is_set, "poll_interval": 0.05, "on_ready": on_ready},
        name=name,
        daemon=True,
    )
    thread.start()
    if not ready_evt.wait(5.0):
        stop_flag.set()
        raise RuntimeError(f"{name} failed to start")

    def stop():
        stop_flag.set()
        thread.join(5.0)

    return ready[0], stop


class KvClient:
    """One connection to the KV server; use from a single thread/task."""

    def __init__(self, env, addr: PeerAddress, *, timeout: float = DEFAULT_REQUEST_TIMEOUT):
        self.env = env
        self.addr = addr
        self.timeout = timeout
        self.conn = env.connect(addr, timeout=timeout)
        self._tags = itertools.count(1)
        self._replies: dict[int, bytes] = {}

    def close(self) -> None:
        self.conn.close()

    def _request(self, cmd: str, timeout: Optional[float] = None) -> bytes:
        tag = next(self._tags)
        deadline = self.env.now() + (self.timeout if timeout is None else timeout)
        self.conn.send_frame(Frame(MsgType.KV_CMD, 0, tag, cmd.encode("utf-8")), deadline)
        while True:
            if tag in self._replies:
                return self._check(self._replies.pop(tag))
            frame = self.conn.try_recv_frame()
            if frame is not None:
                if frame.msg_type == MsgType.KV_REPLY:
                    self._replies[frame.tag] = frame.payload
                continue
            if self.conn.is_dead():
                raise PeerClosed(f"kv server at {self.addr} closed the connection")
            remaining = deadline - self.env.now()
            if remaining <= 0:
                raise Timeout(f"kv command {cmd.split(' ')[0]} timed out")
            self.env.wait_any([self.conn], timeout=min(remaining, 0.5))

    @staticmethod
    def _check(payload: bytes) -> bytes:
        if payload.startswith(b"ERR "):
            raise KvError(payload[4:].decode("utf-8", "replace"))
        return payload

    # primitive commands

    def incr(self, key: str) -> int:
        return int(self._request(f"INCR {key}")[3:])

    def get(self, key: str) -> Optional[bytes]:
        reply = self._request(f"GET {key}")
        if reply == b"NIL":
            return None
        return base64.b64decode(reply[3:])

    def set(self, key: str, value: bytes) -> None:
        self._request(f"SET {key} {base64.b64encode(value).decode('ascii')}")

    def del_prefix(self, prefix: str) -> int:
        return int(self._request(f"DEL {prefix}")[3:])

    def lock(self, name: str, rank: int, timeout: Optional[float] = None) -> None:
        self._request(f"LOCK {name} {rank}", timeout=timeout)

    def unlock(self, name: str, rank: int) -> None:
        self._request(f"UNLOCK {name} {rank}")


# --- job-scoped operations ---

def next_rank(store: KvClient, job: str, world_size: int) -> int:
    """Atomically claim the next rank; the counter value before increment."""
    validate_job_id(job)
    rank = store.incr(f"{job}/rank_ctr")
    if rank >= world_size:
        raise WorldFull(f"job {job}: rank counter at {rank}, world size {world_size}")
    return rank


def put_endpoint(store: KvClient, job: str, reg: WorkerRegistration) -> None:
    validate_job_id(job)
    store.set(f"{job}/ep/{reg.rank}", reg.encode())


def get_endpoint(
    store: KvClient, job: str, rank: int, timeout: float = DEFAULT_ENDPOINT_TIMEOUT
) -> WorkerRegistration:
    """Poll until the rank's registration appears, or Timeout."""
    validate_job_id(job)
    deadline = store.env.now() + timeout
    key = f"{job}/ep/{rank}"
    while True:
        raw = store.get(key)
        if raw is not None:
            return WorkerRegistration.decode(raw)
        if store.env.now() >= deadline:
            raise Timeout(f"no endpoint for job {job} rank {rank} within {timeout}s")
        store.env.sleep(ENDPOINT_POLL_INTERVAL)


def acquire_ordered_lock(
    store: KvClient, job: str, name: str, rank: int, timeout: float = DEFAULT_REQUEST_TIMEOUT
) -> LockHandle:
    """Block until granted; pending requests are granted in ascending rank order."""
    validate_job_id(job)
    try:
        store.lock(f"{job}/{name}", rank, timeout=timeout)
    except KvError as exc:
        if "already-held" in str(exc):
            raise LockHeld(f"rank {rank} already holds {job}/{name}") from None
        raise
    return LockHandle(job, name, rank)


def release_lock(store: KvClient, handle: LockHandle) -> None:
    store.unlock(f"{handle.job}/{handle.name}", handle.holder_rank)


def clear_job(store: KvClient, job: str) -> int:
    """Remove every key under the job; returns the removed key count."""
    validate_job_id(job)
    return store.del_prefix(f"{job}/")
