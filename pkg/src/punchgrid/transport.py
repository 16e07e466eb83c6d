"""Transport seam: addresses, the blocking TCP implementation, and the
generic frame-server loop.

Every component talks to the network through three small interfaces so the
whole stack runs unchanged over real sockets or the simulated network:

  Env        now() / sleep() / listen() / connect() / punch_nudge() / wait_any()
  Connection send_frame() / try_recv_frame() / is_dead() / close() + addresses
  Listener   accept_pending() / close() + bound_address

The TCP flavor binds listener, outbound connects, and nudges to one local
port (SO_REUSEADDR + SO_REUSEPORT) so a NAT mapping created by one of them
is reusable by the others.
"""

from __future__ import annotations

import select
import socket
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .errors import BindFailed, PeerClosed, Timeout
from .wire import HEADER_LEN, Frame, decode_header, encode_frame


@dataclass(frozen=True, order=True)
class PeerAddress:
    host: str
    port: int

    def __post_init__(self):
        if not 0 < self.port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.port}")

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "PeerAddress":
        host, _, port = text.rpartition(":")
        if not host:
            raise ValueError(f"expected host:port, got {text!r}")
        return cls(host, int(port))


# graceful-close bounds: total drain budget, and the silence window after
# which the peer must have seen our FIN (its pump slices are shorter)
CLOSE_GRACE = 5.0
CLOSE_IDLE = 0.75


def _reuse_socket() -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    return sock


class TcpConnection:
    """Nonblocking socket with frame parsing and a write-behind outbox."""

    def __init__(self, sock: socket.socket):
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        self._rbuf = bytearray()
        self._frames: deque[Frame] = deque()
        self._outbox: deque[memoryview] = deque()
        self._eof = False
        self._broken = ""
        self._closed = False
        self._local = PeerAddress(*sock.getsockname())
        self._remote = PeerAddress(*sock.getpeername())

    @property
    def local_address(self) -> PeerAddress:
        return self._local

    @property
    def remote_address(self) -> PeerAddress:
        return self._remote

    def fileno(self) -> int:
        return self.sock.fileno()

    def _poll_readable(self) -> bool:
        return bool(self._frames) or self._eof or bool(self._broken)

    def is_dead(self) -> bool:
        return bool(self._broken) or self._closed or (self._eof and not self._frames)

    # --- receive path ---

    def _pump_recv(self) -> None:
        if self._eof or self._broken or self._closed:
            return
        while True:
            try:
                chunk = self.sock.recv(1 << 16)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as exc:
                self._broken = f"recv failed: {exc}"
                return
            if not chunk:
                self._eof = True
                break
            self._rbuf += chunk
        self._parse_frames()

    def _parse_frames(self) -> None:
        while len(self._rbuf) >= HEADER_LEN:
            msg_type, src_rank, tag, payload_len = decode_header(bytes(self._rbuf[:HEADER_LEN]))
            end = HEADER_LEN + payload_len
            if len(self._rbuf) < end:
                break
            payload = bytes(self._rbuf[HEADER_LEN:end])
            del self._rbuf[:end]
            self._frames.append(Frame(msg_type, src_rank, tag, payload))

    def try_recv_frame(self) -> Optional[Frame]:
        if not self._frames:
            self._pump_recv()
        if self._frames:
            return self._frames.popleft()
        return None

    # --- send path ---

    def send_frame(self, frame: Frame, deadline: Optional[float] = None) -> None:
        """Queue and fully flush one frame (blocking semantics)."""
        self.send_frame_nowait(frame)
        self.flush(deadline)

    def send_frame_nowait(self, frame: Frame) -> None:
        if self._broken:
            raise PeerClosed(f"connection to {self._remote} broken: {self._broken}")
        if self._closed:
            raise PeerClosed(f"connection to {self._remote} is closed")
        if self._eof:
            # our protocol never half-closes: EOF means the peer is gone
            raise PeerClosed(f"connection to {self._remote} closed by peer")
        self._outbox.append(memoryview(encode_frame(frame)))
        self._try_flush()

    def try_send_frame(self, frame: Frame) -> bool:
        """Queue without blocking; the outbox drains as the socket accepts it."""
        self.send_frame_nowait(frame)
        return True

    def _try_flush(self) -> None:
        while self._outbox:
            head = self._outbox[0]
            try:
                sent = self.sock.send(head)
            except (BlockingIOError, InterruptedError):
                return
            except OSError as exc:
                self._broken = f"send failed: {exc}"
                raise PeerClosed(f"connection to {self._remote} broken: {self._broken}")
            if sent == len(head):
                self._outbox.popleft()
            else:
                self._outbox[0] = head[sent:]

    def flush(self, deadline: Optional[float] = None) -> None:
        while self._outbox:
            self._try_flush()
            if not self._outbox:
                break
            timeout = None
            if deadline is not None:
                timeout = deadline - time.monotonic()
                if timeout <= 0:
                    raise Timeout(f"send to {self._remote} timed out")
            select.select([], [self.sock], [], timeout)

    @property
    def has_unflushed(self) -> bool:
        return bool(self._outbox)

    def close(self) -> None:
        """Graceful close: flush, FIN, then drain until the peer quiesces.

        An abrupt close would answer the peer's in-flight traffic (e.g. a
        keepalive ping) with an RST, and an RST discards data the peer has
        not read yet - losing the last message we just sent.  So we
        half-close and keep reading until the peer closes too, or until it
        has been silent long enough to have seen our FIN (it stops talking
        to a dead connection), bounded overall by CLOSE_GRACE.
        """
        if self._closed:
            return
        self._closed = True
        try:
            if not self._broken and not self._eof:
                deadline = time.monotonic() + CLOSE_GRACE
                try:
                    self.flush(deadline)
                except (Timeout, PeerClosed):
                    pass
                self.sock.shutdown(socket.SHUT_WR)
                while time.monotonic() < deadline:
                    idle = min(CLOSE_IDLE, max(deadline - time.monotonic(), 0.0))
                    ready, _, _ = select.select([self.sock], [], [], idle)
                    if not ready:
                        break  # peer went quiet: it has processed our FIN
                    chunk = self.sock.recv(1 << 16)
                    if not chunk:
                        break
        except OSError:
            pass
        finally:
            try:
                self.sock.close()
            except OSError:
                pass


class TcpListener:
    def __init__(self, sock: socket.socket):
        sock.setblocking(False)
        self.sock = sock
        self.closed = False
        host, port = sock.getsockname()
        self.bound_address = PeerAddress(host, port)

    def fileno(self) -> int:
        return self.sock.fileno()

    def _poll_readable(self) -> bool:
        if self.closed:
            return False
        ready, _, _ = select.select([self.sock], [], [], 0)
        return bool(ready)

    def accept_pending(self) -> list[TcpConnection]:
        out = []
        while not self.closed:
            try:
                sock, _ = self.sock.accept()
            except (BlockingIOError, InterruptedError):
                break
            except OSError:
                break
            try:
                out.append(TcpConnection(sock))
            except OSError:
                sock.close()
        return out

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.sock.close()


class TcpEnv:
    """Env over real sockets and the wall clock."""

    transport_name = "tcp"

    def __init__(self, bind_host: str = "127.0.0.1"):
        self.bind_host = bind_host

    @property
    def host_name(self) -> str:
        return self.bind_host

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, dt: float) -> None:
        if dt > 0:
            time.sleep(dt)

    def listen(self, port: int = 0) -> TcpListener:
        sock = _reuse_socket()
        try:
            sock.bind((self.bind_host, port))
            sock.listen(128)
        except OSError as exc:
            sock.close()
            raise BindFailed(f"cannot listen on {self.bind_host}:{port}: {exc}") from None
        return TcpListener(sock)

    def connect(
        self, remote: PeerAddress, local_port: int = 0, timeout: float = 5.0
    ) -> TcpConnection:
        sock = _reuse_socket()
        try:
            sock.bind((self.bind_host, local_port))
            sock.settimeout(timeout)
            sock.connect((remote.host, remote.port))
        except socket.timeout:
            sock.close()
            raise Timeout(f"connect to {remote} timed out") from None
        except OSError as exc:
            sock.close()
            raise PeerClosed(f"connect to {remote} failed: {exc}") from None
        return TcpConnection(sock)

    def punch_nudge(self, remote: PeerAddress, local_port: int) -> None:
        """Fire-and-forget SYN from local_port to open a NAT mapping."""
        sock = _reuse_socket()
        try:
            sock.bind((self.bind_host, local_port))
            sock.setblocking(False)
            sock.connect_ex((remote.host, remote.port))
        except OSError:
            pass
        finally:
            sock.close()

    def wait_any(self, waitables, timeout: Optional[float] = None) -> bool:
        for w in waitables:
            if isinstance(w, TcpConnection) and w._poll_readable():
                return True
        fds = [w.fileno() for w in waitables if _has_live_fd(w)]
        if not fds:
            if timeout:
                time.sleep(min(timeout, 0.05))
            return False
        ready, _, _ = select.select(fds, [], [], timeout)
        return bool(ready)


def _has_live_fd(w) -> bool:
    try:
        return w.fileno() >= 0
    except (OSError, ValueError):
        return False


# --- generic frame server loop ---

def serve_loop(env, listener, core, *, stop=None, poll_interval: Optional[float] = None) -> None:
    """Accept connections and feed frames to a server core until stopped.

    The core implements:
      handle(conn, frame)  -> list[(conn, Frame)] replies (any connection)
      on_disconnect(conn)  -> list[(conn, Frame)] replies
      next_tick_time()     -> absolute time of pending timed work or None
      on_tick(now)         -> list[(conn, Frame)] replies
    """
    conns: list = []
    try:
        while not (stop is not None and stop()):
            timeout = poll_interval
            tick_at = core.next_tick_time()
            if tick_at is not None:
                until_tick = max(0.0, tick_at - env.now())
                timeout = until_tick if timeout is None else min(timeout, until_tick)
            env.wait_any([listener] + conns, timeout=timeout)
            conns.extend(listener.accept_pending())
            replies = []
            for conn in conns:
                while True:
                    frame = conn.try_recv_frame()
                    if frame is None:
                        break
                    replies.extend(core.handle(conn, frame))
            replies.extend(core.on_tick(env.now()))
            _send_replies(replies)
            dead = [c for c in conns if c.is_dead()]
            for conn in dead:
                conns.remove(conn)
                _send_replies(core.on_disconnect(conn))
                conn.close()
    finally:
        for conn in conns:
            conn.close()
        listener.close()


def _send_replies(replies) -> None:
    for conn, frame in replies:
        if conn.is_dead():
            continue
        try:
            conn.send_frame(frame)
        except PeerClosed:
            pass
