"""Rendezvous server and the client-side TCP hole punch.

The server records, per (job, rank), the *source address it observed* on the
registration connection - behind a NAT that is the gateway's external
mapping, never the worker's internal address - and relays peer addresses on
request, holding each request until the peer registers.

Wire exchanges (all REGISTER/PEER_ADDR frames, UTF-8 payloads):

    REGISTER  "job rank world_size"   -> PEER_ADDR reply, tag echoed,
                                         payload = your observed "host:port"
                                         (or "ERR duplicate-rank")
    PEER_ADDR "job peer_rank"         -> PEER_ADDR reply, tag echoed,
                                         payload = peer's "host:port",
                                         held until the peer registers

The punch procedure is asymmetric and deterministic: the pair always keeps
the connection initiated by the lower rank.  The lower rank dials the peer's
recorded external address from the same local port it registered from,
retrying with exponential backoff; the higher rank accepts, while firing
mapping-opener packets at the lower rank's external address so its own NAT
admits the incoming dial.  An accepted connection is committed only after a
hello/ack exchange, and only when its source address equals the address the
rendezvous recorded - a symmetric NAT shifts ports per destination, fails
that check on every attempt, and exhausts the retry budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import DuplicateRank, HolePunchFailed, PeerClosed, Timeout
from .transport import PeerAddress, serve_loop
from .wire import Frame, MsgType

DEFAULT_HOLD_TIMEOUT = 60.0


@dataclass
class TranslationEntry:
    job: str
    rank: int
    external: PeerAddress
    world_size: int
    registered_at: float


@dataclass(frozen=True)
class RetryPolicy:
    """Backoff schedule for socket connection failures during punching."""

    initial_delay: float = 0.1
    multiplier: float = 2.0
    max_attempts: int = 10
    attempt_timeout: float = 1.0

    def delays(self):
        d = self.initial_delay
        for _ in range(self.max_attempts):
            yield d
            d *= self.multiplier

    def budget(self) -> float:
        return sum(self.delays()) + self.max_attempts * self.attempt_timeout


class RendezvousCore:
    """Transport-agnostic translation table plus held peer-address requests."""

    def __init__(self, hold_timeout: float = DEFAULT_HOLD_TIMEOUT, now: float = 0.0):
        self.hold_timeout = hold_timeout
        self.entries: dict[tuple[str, int], TranslationEntry] = {}
        self._registrants: dict[tuple[str, int], object] = {}  # key -> registering conn
        self._pending: dict[tuple[str, int], list] = {}  # key -> [(conn, tag, deadline)]
        self._now = now

    def handle(self, conn, frame: Frame):
        reply = lambda payload: [(conn, Frame(MsgType.PEER_ADDR, 0, frame.tag, payload))]
        try:
            text = frame.payload.decode("utf-8")
        except UnicodeDecodeError:
            return reply(b"ERR payload not UTF-8")
        if frame.msg_type == MsgType.REGISTER:
            try:
                job, rank_s, world_s = text.split(" ")
                rank, world_size = int(rank_s), int(world_s)
            except ValueError:
                return reply(b"ERR bad-register")
            observed = conn.remote_address
            key = (job, rank)
            existing = self.entries.get(key)
            if existing is not None and existing.external != observed:
                holder = self._registrants.get(key)
                if holder is not None and not holder.is_dead():
                    # two live claimants for one (job, rank)
                    return reply(b"ERR duplicate-rank")
                # the old registrant is gone; its entry is stale and replaceable
            self.entries[key] = TranslationEntry(job, rank, observed, world_size, self._now)
            self._registrants[key] = conn
            out = reply(str(observed).encode("utf-8"))
            for pconn, ptag, _ in self._pending.pop(key, []):
                out.append(
                    (pconn, Frame(MsgType.PEER_ADDR, 0, ptag, str(observed).encode("utf-8")))
                )
            return out
        if frame.msg_type == MsgType.PEER_ADDR:
            try:
                job, peer_s = text.split(" ")
                peer_rank = int(peer_s)
            except ValueError:
                return reply(b"ERR bad-peer-request")
            entry = self.entries.get((job, peer_rank))
            if entry is not None:
                return reply(str(entry.external).encode("utf-8"))
            self._pending.setdefault((job, peer_rank), []).append(
                (conn, frame.tag, self._now + self.hold_timeout)
            )
            return []
        return []

    def on_disconnect(self, conn):
        for waiters in self._pending.values():
            waiters[:] = [w for w in waiters if w[0] is not conn]
        # an entry lives as long as its registration connection: a departed
        # worker's address is unreachable, so later requests must hold for
        # the next registration instead of being answered with a dead port
        for key in [k for k, c in self._registrants.items() if c is conn]:
            self._registrants.pop(key, None)
            self.entries.pop(key, None)
        return []

    def next_tick_time(self):
        deadlines = [d for waiters in self._pending.values() for (_, _, d) in waiters]
        return min(deadlines) if deadlines else None

    def on_tick(self, now):
        self._now = now
        expired = []
        for key, waiters in list(self._pending.items()):
            still = []
            for conn, tag, deadline in waiters:
                if now >= deadline:
                    expired.append((conn, Frame(MsgType.PEER_ADDR, 0, tag, b"ERR timeout")))
                else:
                    still.append((conn, tag, deadline))
            if still:
                self._pending[key] = still
            else:
                self._pending.pop(key, None)
        return expired


def rendezvous_serve(env, port: int = 0, *, stop=None, poll_interval=None, on_ready=None) -> None:
    """Run the rendezvous server on env until stop() is true (blocking)."""
    listener = env.listen(port)
    if on_ready is not None:
        on_ready(listener.bound_address)
    core = RendezvousCore(now=env.now())
    serve_loop(env, listener, core, stop=stop, poll_interval=poll_interval)


def start_rendezvous_thread(bind_host: str = "127.0.0.1", port: int = 0):
    """Spawn a TCP rendezvous server thread; returns (address, stop_fn)."""
    from .bootstrap import _start_server_thread

    return _start_server_thread(rendezvous_serve, bind_host, port, "rendezvous-server")


class RendezvousClient:
    """Registration plus peer-address cache over one server connection.

    The connection is bound to the worker's punching port so the NAT mapping
    it creates is the one peers are told about.
    """

    def __init__(
        self,
        env,
        server: PeerAddress,
        job: str,
        rank: int,
        world_size: int,
        *,
        local_port: int,
        timeout: float = 30.0,
    ):
        self.env = env
        self.job = job
        self.rank = rank
        self.world_size = world_size
        self.conn = env.connect(server, local_port=local_port, timeout=timeout)
        self.addresses: dict[int, PeerAddress] = {}
        self.failures: dict[int, str] = {}
        self._register_tag = 0xFFFFFFFE
        self.conn.send_frame(
            Frame(
                MsgType.REGISTER,
                rank,
                self._register_tag,
                f"{job} {rank} {world_size}".encode("utf-8"),
            ),
            deadline=env.now() + timeout,
        )
        self.observed_external = self._await_registration(timeout)

    def _await_registration(self, timeout: float) -> PeerAddress:
        deadline = self.env.now() + timeout
        while True:
            self.poll_replies()
            if self._register_tag in self.failures:
                reason = self.failures.pop(self._register_tag)
                if "duplicate-rank" in reason:
                    raise DuplicateRank(f"job {self.job} rank {self.rank}: {reason}")
                raise PeerClosed(f"registration rejected: {reason}")
            if self._register_tag in self.addresses:
                return self.addresses.pop(self._register_tag)
            if self.conn.is_dead():
                raise PeerClosed("rendezvous server closed during registration")
            remaining = deadline - self.env.now()
            if remaining <= 0:
                raise Timeout("rendezvous registration timed out")
            self.env.wait_any([self.conn], timeout=min(remaining, 0.5))

    def request_peer(self, peer_rank: int) -> None:
        """Fire a PEER_ADDR request; the reply lands in self.addresses later."""
        self.conn.send_frame(
            Frame(
                MsgType.PEER_ADDR,
                self.rank,
                peer_rank,
                f"{self.job} {peer_rank}".encode("utf-8"),
            ),
            deadline=self.env.now() + 30.0,
        )

    def poll_replies(self) -> None:
        while True:
            frame = self.conn.try_recv_frame()
            if frame is None:
                return
            if frame.msg_type != MsgType.PEER_ADDR:
                continue
            text = frame.payload.decode("utf-8", "replace")
            if text.startswith("ERR"):
                self.failures[frame.tag] = text
            else:
                self.addresses[frame.tag] = PeerAddress.parse(text)

    def close(self) -> None:
        self.conn.close()


_HELLO_ACK = b"ack"


class PunchSession:
    """Shared listener, rendezvous cache, and parked inbound connections.

    One session serves every punch a worker performs; inbound dials from
    lower-ranked peers are validated, acked, and parked even while this
    worker is busy punching somebody else.
    """

    def __init__(
        self,
        env,
        listener,
        rdv: RendezvousClient,
        policy: Optional[RetryPolicy] = None,
        *,
        prefetch: bool = True,
    ):
        self.env = env
        self.listener = listener
        self.local_port = listener.bound_address.port
        self.rdv = rdv
        self.policy = policy or RetryPolicy()
        self.parked: dict[int, object] = {}
        self._pending_hello: list = []
        if prefetch:
            for peer in range(rdv.world_size):
                if peer != rdv.rank:
                    self.rdv.request_peer(peer)

    @property
    def rank(self) -> int:
        return self.rdv.rank

    def close(self) -> None:
        for conn in self._pending_hello:
            conn.close()
        for conn in self.parked.values():
            conn.close()
        self._pending_hello.clear()
        self.parked.clear()

    # --- shared pump: rendezvous replies and inbound dials ---

    def _pump(self, timeout: float) -> None:
        waitables = [self.listener] + [
            c for c in [self.rdv.conn] + self._pending_hello if not c.is_dead()
        ]
        self.env.wait_any(waitables, timeout=timeout)
        self.rdv.poll_replies()
        self._pending_hello.extend(self.listener.accept_pending())
        for conn in list(self._pending_hello):
            frame = conn.try_recv_frame()
            if frame is None:
                if conn.is_dead():
                    self._pending_hello.remove(conn)
                    conn.close()
                continue
            self._pending_hello.remove(conn)
            self._admit(conn, frame)

    def _admit(self, conn, frame: Frame) -> None:
        """Validate an inbound hello; ack and park it, or drop the connection."""
        if frame.msg_type != MsgType.REGISTER:
            conn.close()
            return
        try:
            job, rank_s = frame.payload.decode("utf-8").split(" ")
            peer_rank = int(rank_s)
        except (UnicodeDecodeError, ValueError):
            conn.close()
            return
        if job != self.rdv.job or peer_rank >= self.rank or peer_rank < 0:
            # only lower ranks initiate the kept connection
            conn.close()
            return
        expected = self.rdv.addresses.get(peer_rank)
        if expected is None or conn.remote_address != expected:
            # source must be the NAT mapping the rendezvous recorded;
            # symmetric NATs shift ports and fail here
            conn.close()
            return
        try:
            conn.send_frame(Frame(MsgType.REGISTER, self.rank, 0, _HELLO_ACK))
        except PeerClosed:
            conn.close()
            return
        old = self.parked.pop(peer_rank, None)
        if old is not None:
            old.close()
        self.parked[peer_rank] = conn

    def _resolve_peer(self, peer_rank: int, deadline: float) -> PeerAddress:
        while peer_rank not in self.rdv.addresses:
            if peer_rank in self.rdv.failures:
                raise Timeout(
                    f"rendezvous lookup for rank {peer_rank} failed: {self.rdv.failures[peer_rank]}"
                )
            remaining = deadline - self.env.now()
            if remaining <= 0:
                raise Timeout(f"peer {peer_rank} never registered")
            self._pump(min(remaining, 0.5))
        return self.rdv.addresses[peer_rank]

    # --- the punch itself ---

    def connect_to(self, peer_rank: int, timeout: Optional[float] = None):
        """Establish the single connection between this rank and peer_rank.

        Both sides must call this (the BSP init does).  Lower rank returns its
        outbound dial; higher rank returns the accepted, validated inbound.
        """
        if peer_rank == self.rank:
            raise ValueError("cannot punch to self")
        budget = self.policy.budget() if timeout is None else timeout
        deadline = self.env.now() + budget
        peer_addr = self._resolve_peer(peer_rank, deadline)
        if self.rank < peer_rank:
            return self._dial(peer_rank, peer_addr, deadline)
        return self._accept(peer_rank, peer_addr, deadline)

    def _dial(self, peer_rank: int, peer_addr: PeerAddress, deadline: float):
        hello = Frame(
            MsgType.REGISTER, self.rank, 0, f"{self.rdv.job} {self.rank}".encode("utf-8")
        )
        last_reason = "retry budget exhausted"
        for delay in self.policy.delays():
            if self.env.now() >= deadline:
                break
            attempt_deadline = min(
                self.env.now() + self.policy.attempt_timeout, deadline
            )
            conn = None
            try:
                conn = self.env.connect(
                    peer_addr,
                    local_port=self.local_port,
                    timeout=max(attempt_deadline - self.env.now(), 0.01),
                )
                conn.send_frame(hello, deadline=attempt_deadline)
                if self._await_ack(conn, attempt_deadline):
                    return conn
                last_reason = "no ack (rejected or unreachable)"
            except (Timeout, PeerClosed) as exc:
                last_reason = str(exc)
            if conn is not None:
                conn.close()
            self._sleep_with_pump(min(delay, max(deadline - self.env.now(), 0)))
        raise HolePunchFailed(peer_rank, last_reason)

    def _await_ack(self, conn, deadline: float) -> bool:
        while True:
            frame = conn.try_recv_frame()
            if frame is not None:
                if frame.msg_type == MsgType.REGISTER and frame.payload == _HELLO_ACK:
                    return True
                continue
            if conn.is_dead():
                return False
            remaining = deadline - self.env.now()
            if remaining <= 0:
                return False
            # keep servicing inbound dials from other peers while we wait
            waitables = [self.listener] + [
                c
                for c in [conn, self.rdv.conn] + self._pending_hello
                if not c.is_dead()
            ]
            self.env.wait_any(waitables, timeout=min(remaining, 0.25))
            self._pump(0)

    def _accept(self, peer_rank: int, peer_addr: PeerAddress, deadline: float):
        delays = iter(self.policy.delays())
        next_nudge = self.env.now()
        nudge_gap = next(delays)
        while True:
            conn = self.parked.pop(peer_rank, None)
            if conn is not None:
                if not conn.is_dead():
                    return conn
                conn.close()
            now = self.env.now()
            if now >= deadline:
                raise HolePunchFailed(peer_rank, "no valid inbound connection")
            if now >= next_nudge:
                # opener toward the peer's external address: creates/refreshes
                # our NAT mapping so the peer's dial can come back in
                self.env.punch_nudge(peer_addr, self.local_port)
                next_nudge = now + nudge_gap
                nudge_gap = next(delays, nudge_gap)
            self._pump(min(0.25, max(next_nudge - now, 0.01), deadline - now))

    def _sleep_with_pump(self, duration: float) -> None:
        end = self.env.now() + duration
        while True:
            remaining = end - self.env.now()
            if remaining <= 0:
                return
            self._pump(min(remaining, 0.25))


def punch_connect(
    env,
    job: str,
    rank: int,
    world_size: int,
    peer_rank: int,
    rendezvous_addr: PeerAddress,
    policy: Optional[RetryPolicy] = None,
    timeout: Optional[float] = None,
):
    """One-shot pairwise punch: register, punch one peer, return the connection.

    The listener and rendezvous connection used for the punch are closed
    before returning; the established connection is the caller's.
    """
    listener = env.listen(0)
    rdv = None
    try:
        rdv = RendezvousClient(
            env,
            rendezvous_addr,
            job,
            rank,
            world_size,
            local_port=listener.bound_address.port,
        )
        session = PunchSession(env, listener, rdv, policy)
        conn = session.connect_to(peer_rank, timeout)
        session.parked.pop(peer_rank, None)
        session.close()
        return conn
    finally:
        if rdv is not None:
            rdv.close()
        listener.close()
