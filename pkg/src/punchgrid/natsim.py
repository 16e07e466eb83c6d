"""In-process virtual network with NAT gateways and a manually advanced clock.

Workers under test run as cooperatively scheduled greenlet tasks.  Every
blocking point (connect, accept, recv, sleep, send-window wait) parks the
task and hands control to the scheduler, which resumes tasks in FIFO order
and advances the virtual clock only when nothing is runnable.  The same
schedule therefore produces the same interleaving and the same delivery
trace on every run.

The network routes one packet per frame.  Packets leaving a NATed host are
source-rewritten by their gateway; packets arriving at a gateway's external
address are filtered by the gateway policy:

  * FullCone             inbound to a mapped port is forwarded from anyone
  * AddressRestricted    forwarded only from hosts this mapping has sent to
  * Symmetric            a fresh external port per remote endpoint, and
                         inbound must match that exact remote

Mappings expire after ``mapping_ttl`` idle; expiry breaks every established
stream that ran through the mapping, waking blocked readers with PeerClosed.
TCP-style simultaneous open is deliberately not modeled: a SYN colliding
with an in-flight outbound connect on the same 4-tuple is dropped.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import greenlet

from .errors import (
    AddressInUse,
    BindFailed,
    DeadlockDetected,
    PeerClosed,
    Timeout,
)
from .transport import PeerAddress
from .wire import Frame


class NatPolicy(Enum):
    FullCone = "full_cone"
    AddressRestricted = "address_restricted"
    Symmetric = "symmetric"


class PacketKind(Enum):
    SYN = "syn"
    SYN_ACK = "syn_ack"
    RST = "rst"
    DATA = "data"
    FIN = "fin"
    PUNCH = "punch"  # mapping opener; ignored by hosts


@dataclass
class Packet:
    kind: PacketKind
    src: PeerAddress
    dst: PeerAddress
    frame: Optional[Frame] = None
    # simulation-only bookkeeping, invisible to the protocol
    sender_conn: Optional["VirtualConnection"] = None

    @property
    def wire_size(self) -> int:
        return self.frame.wire_size if self.frame is not None else 40


class VirtualClock:
    """Monotonic virtual seconds; advanced only by the scheduler or tests."""

    def __init__(self):
        self._now = 0.0

    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError(f"clock cannot go backwards: {t} < {self._now}")
        self._now = t


class _Park:
    """One parked blocking call; wakes at most once."""

    __slots__ = ("task", "done")

    def __init__(self, task):
        self.task = task
        self.done = False


class Task:
    def __init__(self, fn, args, kwargs, name: str, daemon: bool):
        self.fn = fn
        self.args = args
        self.kwargs = kwargs
        self.name = name
        self.daemon = daemon
        self.gr: Optional[greenlet.greenlet] = None
        self.finished = False
        self.result = None
        self.error: Optional[BaseException] = None

    def __repr__(self):
        state = "finished" if self.finished else "live"
        return f"Task({self.name}, {state})"


class Scheduler:
    """Single-threaded cooperative scheduler over a virtual clock."""

    def __init__(self, clock: Optional[VirtualClock] = None):
        self.clock = clock or VirtualClock()
        self.tasks: list[Task] = []
        self._runnable: deque[tuple[Task, object]] = deque()
        self._timers: list[tuple[float, int, str, object]] = []  # (time, seq, kind, obj)
        self._seq = itertools.count()
        self._hub: Optional[greenlet.greenlet] = None
        self._current: Optional[Task] = None
        self._time_sources: list = []  # objects with next_event_time() / process_until(t)

    def now(self) -> float:
        return self.clock.now()

    def spawn(self, fn, *args, name: str = "", daemon: bool = False, **kwargs) -> Task:
        task = Task(fn, args, kwargs, name or getattr(fn, "__name__", "task"), daemon)
        self.tasks.append(task)
        self._runnable.append((task, None))
        return task

    def add_time_source(self, source) -> None:
        self._time_sources.append(source)

    # --- blocking primitives (call only from inside a task) ---

    def current_task(self) -> Task:
        if self._current is None:
            raise RuntimeError("not inside a scheduler task")
        return self._current

    def pause(self, deadline: Optional[float] = None) -> object:
        """Park the current task until woken; returns the wake value.

        A deadline wakes the task with the value "timeout".
        """
        park = _Park(self.current_task())
        if deadline is not None:
            heapq.heappush(self._timers, (deadline, next(self._seq), "park", park))
        return self._hub.switch()

    def make_park(self) -> _Park:
        return _Park(self.current_task())

    def park_and_wait(self, park: _Park, deadline: Optional[float] = None) -> object:
        if deadline is not None:
            heapq.heappush(self._timers, (deadline, next(self._seq), "park", park))
        return self._hub.switch()

    def wake(self, park: _Park, value: object = "ready") -> None:
        if park.done:
            return
        park.done = True
        self._runnable.append((park.task, value))

    def sleep(self, dt: float) -> None:
        if dt <= 0:
            # still a scheduling point, for fairness
            task = self.current_task()
            self._runnable.append((task, None))
            self._hub.switch()
            return
        self.pause(deadline=self.now() + dt)

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._timers, (t, next(self._seq), "call", fn))

    def wait_any(self, waitables, deadline: Optional[float] = None) -> bool:
        """Block until any waitable is readable or the deadline passes.

        Returns True if something is readable, False on timeout.  Waitables
        expose _poll_readable() and _read_waiters.
        """
        for w in waitables:
            if w._poll_readable():
                return True
        if deadline is not None and deadline <= self.now():
            return False
        park = self.make_park()
        for w in waitables:
            w._read_waiters[:] = [p for p in w._read_waiters if not p.done]
            w._read_waiters.append(park)
        value = self.park_and_wait(park, deadline)
        if value == "timeout":
            return any(w._poll_readable() for w in waitables)
        return True

    # --- the loop ---

    def run(self) -> list[Task]:
        """Drive tasks until every non-daemon task finishes.

        Task exceptions are captured on the Task; deadlock (non-daemon tasks
        blocked forever with no timers) raises DeadlockDetected.
        """
        self._hub = greenlet.greenlet(self._loop)
        self._hub.switch()
        return self.tasks

    def run_or_raise(self) -> list[Task]:
        self.run()
        for t in self.tasks:
            if t.error is not None:
                raise t.error
        return self.tasks

    def _unfinished_foreground(self) -> bool:
        return any(not t.finished and not t.daemon for t in self.tasks)

    def _loop(self):
        while self._unfinished_foreground():
            if self._runnable:
                task, value = self._runnable.popleft()
                if task.finished:
                    continue
                self._switch_to(task, value)
                continue
            t_next = self._next_event_time()
            if t_next is None:
                blocked = [t.name for t in self.tasks if not t.finished and not t.daemon]
                raise DeadlockDetected(f"all tasks blocked with no pending timers: {blocked}")
            self.clock.advance_to(max(t_next, self.now()))
            for source in self._time_sources:
                source.process_until(t_next)
            while self._timers and self._timers[0][0] <= self.now():
                _, _, kind, obj = heapq.heappop(self._timers)
                if kind == "park":
                    self.wake(obj, "timeout")
                else:
                    obj()

    def _next_event_time(self) -> Optional[float]:
        candidates = []
        if self._timers:
            candidates.append(self._timers[0][0])
        for source in self._time_sources:
            t = source.next_event_time()
            if t is not None:
                candidates.append(t)
        return min(candidates) if candidates else None

    def _switch_to(self, task: Task, value):
        self._current = task
        if task.gr is None:

            def runner():
                try:
                    task.result = task.fn(*task.args, **task.kwargs)
                except BaseException as exc:  # noqa: BLE001 - recorded for the caller
                    task.error = exc
                finally:
                    task.finished = True

            task.gr = greenlet.greenlet(runner, parent=self._hub)
            task.gr.switch()
        else:
            task.gr.switch(value)
        self._current = None


# --- NAT gateway ---

@dataclass
class Mapping:
    internal: PeerAddress
    external_port: int
    last_activity: float
    remote_key: Optional[PeerAddress] = None  # Symmetric only
    sent_to_hosts: set = field(default_factory=set)
    conns: set = field(default_factory=set)


class NatGateway:
    def __init__(self, policy: NatPolicy, external_host: str, mapping_ttl: float = 0.5):
        self.policy = policy
        self.external_host = external_host
        self.mapping_ttl = mapping_ttl
        self._by_internal: dict = {}      # cone: internal addr -> Mapping; sym: (internal, remote) -> Mapping
        self._by_external_port: dict[int, Mapping] = {}
        self._next_port = itertools.count(40001)
        self.net: Optional[VirtualNetwork] = None

    def _mapping_key(self, internal: PeerAddress, remote: PeerAddress):
        if self.policy is NatPolicy.Symmetric:
            return (internal, remote)
        return internal

    def _get_or_create(self, internal: PeerAddress, remote: PeerAddress, now: float) -> Mapping:
        key = self._mapping_key(internal, remote)
        mapping = self._by_internal.get(key)
        if mapping is None:
            mapping = Mapping(
                internal=internal,
                external_port=next(self._next_port),
                last_activity=now,
                remote_key=remote if self.policy is NatPolicy.Symmetric else None,
            )
            self._by_internal[key] = mapping
            self._by_external_port[mapping.external_port] = mapping
        return mapping

    def translate_out(self, packet: Packet, now: float) -> Packet:
        mapping = self._get_or_create(packet.src, packet.dst, now)
        mapping.last_activity = now
        mapping.sent_to_hosts.add(packet.dst.host)
        if packet.sender_conn is not None:
            mapping.conns.add(packet.sender_conn)
        return Packet(
            packet.kind,
            PeerAddress(self.external_host, mapping.external_port),
            packet.dst,
            packet.frame,
            packet.sender_conn,
        )

    def translate_in(self, packet: Packet, now: float):
        """Returns (translated packet, mapping) or (None, reason) on drop."""
        mapping = self._by_external_port.get(packet.dst.port)
        if mapping is None:
            return None, "no mapping"
        if self.policy is NatPolicy.AddressRestricted:
            if packet.src.host not in mapping.sent_to_hosts:
                return None, "address-restricted filter"
        elif self.policy is NatPolicy.Symmetric:
            if mapping.remote_key != packet.src:
                return None, "symmetric filter"
        mapping.last_activity = now
        return (
            Packet(packet.kind, packet.src, mapping.internal, packet.frame, packet.sender_conn),
            mapping,
        )

    def expire(self, now: float) -> int:
        expired = [m for m in self._by_internal.values() if now - m.last_activity >= self.mapping_ttl]
        for mapping in expired:
            if self.policy is NatPolicy.Symmetric:
                key = (mapping.internal, mapping.remote_key)
            else:
                key = mapping.internal
            self._by_internal.pop(key, None)
            self._by_external_port.pop(mapping.external_port, None)
            for conn in list(mapping.conns):
                conn._break("NAT mapping expired")
        return len(expired)

    def next_expiry(self) -> Optional[float]:
        if not self._by_internal:
            return None
        return min(m.last_activity for m in self._by_internal.values()) + self.mapping_ttl

    def external_mapping_for(self, internal: PeerAddress) -> Optional[PeerAddress]:
        """Test hook: the external address currently mapped for an internal endpoint."""
        for mapping in self._by_internal.values():
            if mapping.internal == internal:
                return PeerAddress(self.external_host, mapping.external_port)
        return None


# --- hosts and stream connections ---

_EOF = object()


class VirtualConnection:
    """One side of an established (or connecting) reliable FIFO stream."""

    def __init__(self, net: "VirtualNetwork", host: "_Host", local_port: int, remote: PeerAddress):
        self.net = net
        self.host = host
        self.local_port = local_port
        self.remote = remote
        self.inbox: deque = deque()
        self._frames_queued = 0
        self._eof_queued = False
        self.state = "connecting"  # connecting | established | closed | broken
        self.broken_reason = ""
        self.eof_received = False
        self.bytes_in_flight = 0
        self.remote_conn: Optional[VirtualConnection] = None
        self._read_waiters: list[_Park] = []
        self._window_waiters: list[_Park] = []
        self._connect_park: Optional[_Park] = None

    # interface shared with TcpConnection
    @property
    def local_address(self) -> PeerAddress:
        return PeerAddress(self.host.name, self.local_port)

    @property
    def remote_address(self) -> PeerAddress:
        return self.remote

    def _poll_readable(self) -> bool:
        return bool(self.inbox) or self.state in ("closed", "broken") or self.eof_received

    def is_dead(self) -> bool:
        """No more frames will ever arrive."""
        if self.state == "broken":
            return True
        return (self.eof_received or self._eof_queued or self.state == "closed") and (
            self._frames_queued == 0
        )

    def try_recv_frame(self) -> Optional[Frame]:
        while self.inbox:
            item = self.inbox.popleft()
            if item is _EOF:
                self.eof_received = True
                return None
            self._frames_queued -= 1
            self._credit_remote(item.wire_size)
            return item
        return None

    def send_frame(self, frame: Frame, deadline: Optional[float] = None) -> None:
        size = frame.wire_size
        sched = self.net.scheduler
        while self.state == "established" and self.bytes_in_flight > 0 and (
            self.bytes_in_flight + size > self.net.send_window
        ):
            park = sched.make_park()
            self._window_waiters.append(park)
            if sched.park_and_wait(park, deadline) == "timeout":
                raise Timeout(f"send window full toward {self.remote}")
        if self.state == "broken":
            raise PeerClosed(f"connection to {self.remote} broken: {self.broken_reason}")
        if self.state == "closed":
            raise PeerClosed(f"connection to {self.remote} is closed")
        if self.state != "established":
            raise PeerClosed(f"connection to {self.remote} not established")
        self.bytes_in_flight += size
        self.net.send(
            Packet(PacketKind.DATA, self.local_address, self.remote, frame, sender_conn=self)
        )

    def try_send_frame(self, frame: Frame) -> bool:
        """Send unless the window would block; False means try again later."""
        size = frame.wire_size
        if self.state in ("closed", "broken"):
            raise PeerClosed(f"connection to {self.remote} is {self.state}")
        if self.state != "established":
            return False
        if self.bytes_in_flight > 0 and self.bytes_in_flight + size > self.net.send_window:
            return False
        self.bytes_in_flight += size
        self.net.send(
            Packet(PacketKind.DATA, self.local_address, self.remote, frame, sender_conn=self)
        )
        return True

    def close(self) -> None:
        if self.state in ("closed", "broken"):
            return
        if self.state == "established":
            self.net.send(Packet(PacketKind.FIN, self.local_address, self.remote, sender_conn=self))
        self.state = "closed"
        self.host._deregister_conn(self)
        self._wake_all("ready")

    # --- internal: packet arrival and state flips ---

    def _on_packet(self, packet: Packet, mapping: Optional[Mapping]) -> None:
        if mapping is not None:
            mapping.conns.add(self)
        if packet.kind is PacketKind.DATA:
            if self.state == "established":
                self.inbox.append(packet.frame)
                self._frames_queued += 1
                self._wake_all("ready")
        elif packet.kind is PacketKind.FIN:
            self.inbox.append(_EOF)
            self._eof_queued = True
            self._wake_all("ready")
        elif packet.kind is PacketKind.SYN_ACK:
            if self.state == "connecting":
                self.state = "established"
                self.remote_conn = packet.sender_conn
                if self._connect_park is not None:
                    self.net.scheduler.wake(self._connect_park, "connected")
        elif packet.kind is PacketKind.RST:
            self._break("connection refused")

    def _break(self, reason: str) -> None:
        if self.state in ("broken", "closed"):
            return
        self.state = "broken"
        self.broken_reason = reason
        self.inbox.clear()
        self._frames_queued = 0
        self.host._deregister_conn(self)
        if self._connect_park is not None:
            self.net.scheduler.wake(self._connect_park, "refused")
        self._wake_all("ready")

    def _credit_remote(self, size: int) -> None:
        rc = self.remote_conn
        if rc is not None:
            rc.bytes_in_flight = max(0, rc.bytes_in_flight - size)
            rc._wake_window()

    def _wake_window(self) -> None:
        for park in self._window_waiters:
            self.net.scheduler.wake(park, "window")
        self._window_waiters.clear()

    def _wake_all(self, value) -> None:
        for park in self._read_waiters:
            self.net.scheduler.wake(park, value)
        self._read_waiters.clear()
        self._wake_window()

    def __repr__(self):
        return f"VirtualConnection({self.local_address}->{self.remote}, {self.state})"


class VirtualListener:
    def __init__(self, host: "_Host", port: int):
        self.host = host
        self.port = port
        self.backlog: deque[VirtualConnection] = deque()
        self._read_waiters: list[_Park] = []
        self.closed = False

    @property
    def bound_address(self) -> PeerAddress:
        return PeerAddress(self.host.name, self.port)

    def _poll_readable(self) -> bool:
        return bool(self.backlog)

    def accept_pending(self) -> list[VirtualConnection]:
        out = list(self.backlog)
        self.backlog.clear()
        return out

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.host.listeners.pop(self.port, None)

    def _on_syn(self, conn: VirtualConnection) -> None:
        self.backlog.append(conn)
        for park in self._read_waiters:
            self.host.net.scheduler.wake(park, "ready")
        self._read_waiters.clear()


class _Host:
    def __init__(self, net: "VirtualNetwork", name: str, gateway: Optional[NatGateway]):
        self.net = net
        self.name = name
        self.gateway = gateway
        self.listeners: dict[int, VirtualListener] = {}
        self.conns: dict[tuple[int, PeerAddress], VirtualConnection] = {}
        self._next_port = itertools.count(9001)

    def alloc_port(self) -> int:
        return next(self._next_port)

    def _deregister_conn(self, conn: VirtualConnection) -> None:
        self.conns.pop((conn.local_port, conn.remote), None)

    def handle(self, packet: Packet, mapping: Optional[Mapping]) -> str:
        key = (packet.dst.port, packet.src)
        conn = self.conns.get(key)
        if packet.kind is PacketKind.PUNCH:
            return "delivered"  # opener: mapping side effects only
        if packet.kind is PacketKind.SYN:
            if conn is not None:
                if conn.state == "connecting":
                    # no simultaneous open: a SYN colliding with our own
                    # outbound connect on this 4-tuple is ignored
                    return "dropped:simultaneous-open-unsupported"
                # stale remnant of an earlier connection on this 4-tuple;
                # a fresh SYN supersedes it, as an RST exchange would
                conn._break("superseded by new connection")
            listener = self.listeners.get(packet.dst.port)
            if listener is None or listener.closed:
                self.net.send(Packet(PacketKind.RST, packet.dst, packet.src))
                return "delivered"  # the RST is its own packet
            server_conn = VirtualConnection(self.net, self, packet.dst.port, packet.src)
            server_conn.state = "established"
            server_conn.remote_conn = packet.sender_conn
            if mapping is not None:
                mapping.conns.add(server_conn)
            self.conns[key] = server_conn
            listener._on_syn(server_conn)
            self.net.send(
                Packet(PacketKind.SYN_ACK, packet.dst, packet.src, sender_conn=server_conn)
            )
            return "delivered"
        if conn is None:
            return "dropped:no-connection"
        conn._on_packet(packet, mapping)
        return "delivered"


class VirtualNetwork:
    """Hosts, gateways, and the packet router, driven by one Scheduler."""

    def __init__(
        self,
        scheduler: Optional[Scheduler] = None,
        latency: float = 0.0,
        send_window: int = 256 * 1024,
        trace: bool = False,
    ):
        self.scheduler = scheduler or Scheduler()
        self.clock = self.scheduler.clock
        self.latency = latency
        self.send_window = send_window
        self.hosts: dict[str, _Host] = {}
        self.gateways: list[NatGateway] = []
        self._by_external: dict[str, NatGateway] = {}
        self.stats = {"sent": 0, "delivered": 0, "dropped": 0}
        self.trace_enabled = trace
        self.trace: list[tuple[float, str]] = []
        self.scheduler.add_time_source(self)

    # --- topology ---

    def add_gateway(
        self, policy: NatPolicy, external_host: str, mapping_ttl: float = 0.5
    ) -> NatGateway:
        if external_host in self._by_external or external_host in self.hosts:
            raise AddressInUse(f"external host {external_host} already in use")
        gw = NatGateway(policy, external_host, mapping_ttl)
        gw.net = self
        self.gateways.append(gw)
        self._by_external[external_host] = gw
        return gw

    def attach(self, gateway: Optional[NatGateway], host: str) -> "NatsimEnv":
        """Attach an endpoint; its sockets route through the gateway (if any)."""
        if host in self.hosts or host in self._by_external:
            raise AddressInUse(f"host {host} already attached")
        self.hosts[host] = _Host(self, host, gateway)
        return NatsimEnv(self, host)

    # --- time source interface for the scheduler ---

    def next_event_time(self) -> Optional[float]:
        times = [gw.next_expiry() for gw in self.gateways]
        times = [t for t in times if t is not None]
        return min(times) if times else None

    def process_until(self, t: float) -> None:
        for gw in self.gateways:
            gw.expire(self.clock.now())

    def advance_time(self, dt: float) -> int:
        """Advance the clock by dt and expire idle mappings; returns the count.

        For scheduler-less harness use; inside a running scheduler time moves
        on its own.
        """
        if dt < 0:
            raise ValueError("dt must be >= 0")
        self.clock.advance_to(self.clock.now() + dt)
        return sum(gw.expire(self.clock.now()) for gw in self.gateways)

    # --- routing ---

    def send(self, packet: Packet) -> str:
        """Route a packet; returns "delivered" or "dropped:<reason>"."""
        self.stats["sent"] += 1
        src_host = self.hosts.get(packet.src.host)
        now = self.clock.now()
        if src_host is not None and src_host.gateway is not None:
            packet = src_host.gateway.translate_out(packet, now)
        if self.latency > 0:
            self.scheduler.call_at(now + self.latency, lambda p=packet: self._route_in(p))
            return "queued"
        return self._route_in(packet)

    deliver = send

    def _route_in(self, packet: Packet) -> str:
        now = self.clock.now()
        mapping = None
        gw = self._by_external.get(packet.dst.host)
        if gw is not None:
            translated, info = gw.translate_in(packet, now)
            if translated is None:
                return self._account(f"dropped:{info}", packet)
            packet, mapping = translated, info
        host = self.hosts.get(packet.dst.host)
        if host is None:
            return self._account("dropped:unroutable", packet)
        disposition = host.handle(packet, mapping)
        return self._account(disposition, packet)

    def _account(self, disposition: str, packet: Packet) -> str:
        if disposition.startswith("dropped"):
            self.stats["dropped"] += 1
        else:
            self.stats["delivered"] += 1
        if self.trace_enabled:
            self.trace.append(
                (
                    self.clock.now(),
                    f"{packet.kind.value} {packet.src} -> {packet.dst}: {disposition}",
                )
            )
        return disposition


class NatsimEnv:
    """Socket factory for one attached endpoint; implements the Env seam."""

    transport_name = "natsim"

    def __init__(self, net: VirtualNetwork, host: str):
        self.net = net
        self.host = host

    @property
    def host_name(self) -> str:
        return self.host

    @property
    def _host(self) -> _Host:
        return self.net.hosts[self.host]

    def now(self) -> float:
        return self.net.clock.now()

    def sleep(self, dt: float) -> None:
        self.net.scheduler.sleep(dt)

    def listen(self, port: int = 0) -> VirtualListener:
        host = self._host
        if port == 0:
            port = host.alloc_port()
        if port in host.listeners:
            raise BindFailed(f"port {port} already listening on {self.host}")
        listener = VirtualListener(host, port)
        host.listeners[port] = listener
        return listener

    def connect(
        self, remote: PeerAddress, local_port: int = 0, timeout: float = 5.0
    ) -> VirtualConnection:
        host = self._host
        if local_port == 0:
            local_port = host.alloc_port()
        key = (local_port, remote)
        if key in host.conns:
            raise AddressInUse(f"connection {key} already exists")
        conn = VirtualConnection(self.net, host, local_port, remote)
        host.conns[key] = conn
        sched = self.net.scheduler
        conn._connect_park = sched.make_park()
        self.net.send(Packet(PacketKind.SYN, conn.local_address, remote, sender_conn=conn))
        value = sched.park_and_wait(conn._connect_park, deadline=self.now() + timeout)
        conn._connect_park = None
        if conn.state == "established":
            return conn
        host._deregister_conn(conn)
        if value == "timeout":
            raise Timeout(f"connect to {remote} timed out")
        raise PeerClosed(f"connect to {remote} failed: {conn.broken_reason}")

    def punch_nudge(self, remote: PeerAddress, local_port: int) -> None:
        """Send a mapping-opener toward remote from local_port; no connection."""
        self.net.send(Packet(PacketKind.PUNCH, PeerAddress(self.host, local_port), remote))

    def wait_any(self, waitables, timeout: Optional[float] = None) -> bool:
        deadline = None if timeout is None else self.now() + timeout
        return self.net.scheduler.wait_any(waitables, deadline)
