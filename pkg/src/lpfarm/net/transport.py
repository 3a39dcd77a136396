"""Non-blocking TCP plumbing: the MpxServer and its framed channels."""
from __future__ import annotations

import errno
import select
import selectors
import socket
import time
from collections import deque

from ..lpf.errors import LpfError, RemoteUnreachable
from ..lpf.message import Message
from .wire import MalformedFrame, decode_stream, encode_message

MAX_OUTBUF = 4 << 20
READ_CHUNK = 256 * 1024
MAX_MALFORMED = 3
# One-way messages never consume their reply route; keep the table bounded.
MAX_ROUTES = 65536


class BindFailure(LpfError):
    pass


class StaleRoute(LpfError):
    pass


class Channel:
    """One framed, non-blocking TCP connection (server slot or outbound link)."""

    def __init__(self, sock: socket.socket, peer):
        sock.setblocking(False)
        self.sock = sock
        self.peer = peer
        self.inbuf = bytearray()
        self.outbuf = bytearray()
        self.pending: deque[Message] = deque()
        self.malformed = 0
        self.errors: list[MalformedFrame] = []
        self.closed = False
        self.close_reason = ""
        self.eof = False

    def fileno(self):
        return -1 if self.closed else self.sock.fileno()

    def queue(self, frame: bytes):
        if self.closed:
            raise RemoteUnreachable(f"connection to {self.peer} is closed ({self.close_reason})")
        if len(self.outbuf) + len(frame) > MAX_OUTBUF:
            raise RemoteUnreachable(f"outbound buffer to {self.peer} is full")
        self.outbuf += frame

    def flush(self) -> bool:
        """Send what the socket accepts now; False if the connection broke."""
        while self.outbuf and not self.closed:
            try:
                sent = self.sock.send(self.outbuf)
            except (BlockingIOError, InterruptedError):
                return True
            except OSError as exc:
                self.close(f"send failed: {exc}")
                return False
            del self.outbuf[:sent]
        return not self.closed

    def read(self) -> int:
        """Read available bytes; returns the count, marks EOF when the peer left."""
        if self.closed:
            return 0
        total = 0
        while True:
            try:
                data = self.sock.recv(READ_CHUNK)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as exc:
                self.eof = True
                self.close_reason = f"recv failed: {exc}"
                break
            if not data:
                self.eof = True
                self.close_reason = self.close_reason or "peer closed"
                break
            self.inbuf += data
            total += len(data)
            if total >= 4 * READ_CHUNK:
                break
        if self.inbuf:
            self._decode()
        return total

    def _on_error(self, exc: MalformedFrame):
        self.errors.append(exc)
        self.malformed += MAX_MALFORMED if exc.fatal else 1

    def _decode(self):
        msgs, rest = decode_stream(bytes(self.inbuf), self._on_error)
        self.inbuf = bytearray(rest)
        self.pending.extend(msgs)
        if self.malformed >= MAX_MALFORMED:
            self.eof = True
            self.close_reason = "too many malformed frames"

    def take(self, limit: int | None = None) -> list[Message]:
        out = []
        while self.pending and (limit is None or len(out) < limit):
            out.append(self.pending.popleft())
        return out

    def close(self, reason=""):
        if self.closed:
            return
        self.closed = True
        self.close_reason = self.close_reason or reason
        try:
            self.sock.close()
        except OSError:
            pass


class MpxServer:
    """Multiplexed front-end: accepts clients, polls them, routes answers back."""

    def __init__(self, host: str, port: int, frames_per_poll: int = 32,
                 poll_budget: float = 0.05, backlog: int = 64):
        self.host = host
        self.frames_per_poll = frames_per_poll
        self.poll_budget = poll_budget
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self.listener.bind((host, port))
        except OSError as exc:
            self.listener.close()
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self.listener.listen(backlog)
        self.listener.setblocking(False)
        self.port = self.listener.getsockname()[1]
        self.selector = selectors.DefaultSelector()
        self.selector.register(self.listener, selectors.EVENT_READ, None)
        self.slots: list[Channel] = []
        self.routes: dict[str, Channel] = {}
        self._consumed: deque[str] = deque(maxlen=4096)
        self._consumed_set: set[str] = set()
        self.closed_slots = 0

    def fileno(self):
        return self.listener.fileno()

    def _accept(self):
        while True:
            try:
                sock, peer = self.listener.accept()
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            slot = Channel(sock, peer)
            self.slots.append(slot)
            self.selector.register(sock, selectors.EVENT_READ, slot)
            slot.read()

    def poll(self) -> list[Message]:
        """Accept pending clients and collect decoded messages without blocking."""
        started = time.perf_counter()
        out: list[Message] = []
        for key, _ in self.selector.select(0):
            if key.data is None:
                self._accept()
            else:
                key.data.read()
        for slot in list(self.slots):
            if time.perf_counter() - started > self.poll_budget:
                break
            for m in slot.take(self.frames_per_poll):
                self.routes[m.id] = slot
                if len(self.routes) > MAX_ROUTES:
                    del self.routes[next(iter(self.routes))]
                out.append(m)
            if slot.eof and not slot.pending:
                self._drop(slot)
        return out

    def _drop(self, slot: Channel):
        try:
            self.selector.unregister(slot.sock)
        except (KeyError, ValueError, OSError):
            pass
        slot.close("peer disconnected")
        if slot in self.slots:
            self.slots.remove(slot)
            self.closed_slots += 1

    def owns(self, correlation_id: str | None) -> bool:
        return correlation_id is not None and (
            correlation_id in self.routes or correlation_id in self._consumed_set)

    def route_answer(self, answer: Message) -> bool:
        """Queue ``answer`` to the client that asked; False if no route matches.

        Raises StaleRoute if the route was already consumed or its client left.
        """
        cid = answer.correlation_id
        if cid is None:
            return False
        slot = self.routes.pop(cid, None)
        if slot is None:
            if cid in self._consumed_set:
                raise StaleRoute(f"route {cid} already answered")
            return False
        self._remember(cid)
        if slot.closed:
            raise StaleRoute(f"client {slot.peer} for {cid} is gone")
        try:
            slot.queue(encode_message(answer))
        except RemoteUnreachable as exc:
            raise StaleRoute(str(exc)) from exc
        slot.flush()
        return True

    def _remember(self, cid):
        if len(self._consumed) == self._consumed.maxlen:
            self._consumed_set.discard(self._consumed[0])
        self._consumed.append(cid)
        self._consumed_set.add(cid)

    def flush(self):
        for slot in list(self.slots):
            slot.flush()
            if slot.closed:
                self._drop(slot)

    def fds(self):
        r = [self.listener]
        w = []
        for s in self.slots:
            if not s.closed:
                r.append(s.sock)
                if s.outbuf:
                    w.append(s.sock)
        return r, w

    def close(self):
        for slot in list(self.slots):
            slot.flush()
            self._drop(slot)
        try:
            self.selector.unregister(self.listener)
        except (KeyError, ValueError):
            pass
        self.selector.close()
        self.listener.close()


class LinkPool:
    """Lazily opened, cached outbound connections keyed by (host, port)."""

    def __init__(self, connect_timeout: float = 0.5):
        self.connect_timeout = connect_timeout
        self.links: dict[tuple[str, int], Channel] = {}
        self.lost: list[tuple[tuple[str, int], Channel]] = []

    def _connect(self, key) -> Channel:
        try:
            sock = socket.create_connection(key, timeout=self.connect_timeout)
        except OSError as exc:
            raise RemoteUnreachable(f"cannot connect to {key[0]}:{key[1]}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        link = Channel(sock, key)
        self.links[key] = link
        return link

    def send(self, host: str, port: int, frame: bytes) -> tuple[tuple[str, int], Channel]:
        key = (host, int(port))
        link = self.links.get(key)
        if link is not None and (link.closed or link.eof):
            self._lose(key, link)
            link = None
        if link is None:
            link = self._connect(key)
        link.queue(frame)
        if not link.flush():
            self._lose(key, link)
            raise RemoteUnreachable(f"connection to {host}:{port} broke: {link.close_reason}")
        return key, link

    def _lose(self, key, link):
        link.close(link.close_reason or "lost")
        if self.links.get(key) is link:
            del self.links[key]
        self.lost.append((key, link))

    def poll(self) -> list[Message]:
        out = []
        for key, link in list(self.links.items()):
            link.read()
            out.extend(link.take())
            if link.eof:
                self._lose(key, link)
            else:
                link.flush()
                if link.closed:
                    self._lose(key, link)
        return out

    def take_lost(self):
        lost, self.lost = self.lost, []
        return lost

    def fds(self):
        r, w = [], []
        for link in self.links.values():
            if not link.closed:
                r.append(link.sock)
                if link.outbuf:
                    w.append(link.sock)
        return r, w

    def close(self):
        for key, link in list(self.links.items()):
            link.flush()
            link.close("pool closed")
        self.links.clear()


class Network:
    """The LPF's view of the network: optional server plus outbound links."""

    def __init__(self, host: str | None = None, port: int | None = None, **server_opts):
        self.server = MpxServer(host, port, **server_opts) if host is not None and port is not None else None
        self.links = LinkPool()

    @property
    def location(self):
        if self.server is None:
            return None
        return (self.server.host, self.server.port)

    def poll(self) -> list[Message]:
        msgs = self.server.poll() if self.server else []
        msgs.extend(self.links.poll())
        return msgs

    def send(self, m: Message):
        assert m.destination.host is not None
        return self.links.send(m.destination.host, m.destination.port, encode_message(m))

    def flush(self):
        if self.server:
            self.server.flush()
        for key, link in list(self.links.links.items()):
            if not link.flush():
                self.links._lose(key, link)

    def pending_output(self) -> bool:
        if self.server and any(s.outbuf for s in self.server.slots):
            return True
        return any(l.outbuf for l in self.links.links.values())

    def wait(self, timeout: float):
        """Sleep until a socket is ready or ``timeout`` expires."""
        r, w = self.server.fds() if self.server else ([], [])
        r2, w2 = self.links.fds()
        r += r2
        w += w2
        if not r and not w:
            time.sleep(timeout)
            return
        try:
            select.select(r, w, [], timeout)
        except (OSError, ValueError) as exc:
            if getattr(exc, "errno", None) not in (errno.EBADF, errno.EINTR, None):
                raise

    def close(self):
        if self.server:
            self.server.close()
        self.links.close()

    def close_fds(self):
        """Drop every socket without flushing (used in a freshly forked child)."""
        if self.server:
            for s in self.server.slots:
                s.sock.close()
            self.server.selector.close()
            self.server.listener.close()
        for link in self.links.links.values():
            link.sock.close()
