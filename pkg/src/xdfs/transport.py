"""Byte-stream transport beneath all channels.

Two interchangeable backends implement the same non-blocking duplex
contract: real stream sockets, and a deterministic in-memory network for
conformance testing.  All blocking waits go through ``poll_readiness``
(level-triggered, state-based); streams themselves never block.

Stream contract:
    recv(n)  -> bytes   1..n bytes available now
             -> None    nothing available (would block)
             -> b""     orderly peer close
    send(b)  -> int     0..len(b) bytes accepted (0 = would block)
Hard faults (reset, broken pipe) surface as OSError subclasses.

Header-sized writes must not sit in coalescing delays, so TCP streams are
opened with TCP_NODELAY.
"""

from __future__ import annotations

import hashlib
import select
import socket
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from random import Random

from .errors import InvariantViolation, XdfsError

READ = 1
WRITE = 2

_DEFAULT_CONNECT_TIMEOUT = 10.0


class TransportError(XdfsError):
    pass


class BindFailure(TransportError):
    pass


class ConnectFailure(TransportError):
    pass


class ConnectTimeout(ConnectFailure):
    pass


class StreamInvalid(TransportError):
    """A closed or foreign stream was handed to poll_readiness."""


_census_lock = threading.Lock()
_open_streams = 0


def _census_add(delta: int) -> None:
    global _open_streams
    with _census_lock:
        _open_streams += delta


def open_stream_count() -> int:
    """Number of live ChannelStreams across both backends (leak checks)."""
    return _open_streams


@dataclass(frozen=True)
class Endpoint:
    """host:port address; port 0 is legal only when binding (OS picks one)."""

    host: str
    port: int

    def __post_init__(self):
        if not self.host:
            raise InvariantViolation("endpoint host must be non-empty")
        if not 0 <= self.port <= 65535:
            raise InvariantViolation(f"endpoint port {self.port} outside 0..65535")

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        host, sep, port = text.rpartition(":")
        if not sep:
            raise InvariantViolation(f"endpoint {text!r} is not HOST:PORT")
        return cls(host, int(port))


class ChannelStream:
    """Duplex non-blocking byte stream; single-owner, transferable."""

    def recv(self, max_bytes: int) -> bytes | None:
        raise NotImplementedError

    def recv_into(self, view) -> int | None:
        """Fill a writable buffer in place; None = would block, 0 = EOF."""
        data = self.recv(len(view))
        if data is None:
            return None
        view[: len(data)] = data
        return len(data)

    def send(self, data) -> int:
        raise NotImplementedError

    def send_many(self, buffers: list) -> int:
        """Gathering send; returns total bytes accepted (0 = would block)."""
        total = 0
        for buf in buffers:
            sent = self.send(buf)
            total += sent
            if sent < len(buf):
                break
        return total

    def close(self) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        raise NotImplementedError


class TcpChannelStream(ChannelStream):
    def __init__(self, sock: socket.socket):
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._closed = False
        _census_add(1)

    def fileno(self) -> int:
        return self._sock.fileno()

    def recv(self, max_bytes: int) -> bytes | None:
        try:
            return self._sock.recv(max_bytes)
        except BlockingIOError:
            return None

    def recv_into(self, view) -> int | None:
        try:
            return self._sock.recv_into(view)
        except BlockingIOError:
            return None

    def send(self, data) -> int:
        try:
            return self._sock.send(data)
        except BlockingIOError:
            return 0

    def send_many(self, buffers: list) -> int:
        try:
            return self._sock.sendmsg(buffers)
        except BlockingIOError:
            return 0

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            _census_add(-1)
            try:
                self._sock.close()
            except OSError:
                pass

    @property
    def closed(self) -> bool:
        return self._closed

    def set_window(self, window: int) -> None:
        """Request send/receive buffer sizes; best effort."""
        if window > 0:
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, window)
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, window)

    @property
    def achieved_window(self) -> tuple[int, int]:
        """(send, receive) buffer sizes actually granted by the OS."""
        return (
            self._sock.getsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF),
            self._sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF),
        )


class Acceptor:
    """Listening socket yielding TcpChannelStreams for inbound connections."""

    def __init__(self, sock: socket.socket, endpoint: Endpoint):
        self._sock = sock
        self.endpoint = endpoint
        self._closed = False

    def accept(self, timeout: float | None = None) -> TcpChannelStream | None:
        """Accept one connection; None on timeout."""
        self._sock.settimeout(timeout)
        try:
            conn, _addr = self._sock.accept()
        except socket.timeout:
            return None
        except OSError:
            if self._closed:
                return None
            raise
        return TcpChannelStream(conn)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.close()
        except OSError:
            pass


def listen(ep: Endpoint, backlog: int = 128) -> Acceptor:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((ep.host, ep.port))
        sock.listen(backlog)
    except OSError as exc:
        sock.close()
        raise BindFailure(f"cannot listen on {ep}: {exc}") from exc
    port = sock.getsockname()[1]
    return Acceptor(sock, Endpoint(ep.host, port))


def connect(
    ep: Endpoint, window: int = 0, timeout: float = _DEFAULT_CONNECT_TIMEOUT
) -> TcpChannelStream:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        if window > 0:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, window)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, window)
        sock.settimeout(timeout)
        sock.connect((ep.host, ep.port))
    except socket.timeout as exc:
        sock.close()
        raise ConnectTimeout(f"connect to {ep} timed out") from exc
    except OSError as exc:
        sock.close()
        raise ConnectFailure(f"cannot connect to {ep}: {exc}") from exc
    return TcpChannelStream(sock)


def poll_readiness(
    entries: list[tuple[ChannelStream, int]], timeout: float
) -> list[tuple[ChannelStream, int]]:
    """Report which streams are ready for the requested interest.

    Level-triggered: a stream stays ready until drained.  Returns the
    subset of entries with a nonzero ready mask; empty list on timeout.
    """
    if not entries:
        raise InvariantViolation("poll_readiness requires at least one stream")
    tcp: list[tuple[TcpChannelStream, int]] = []
    sim: list[tuple[SimChannelStream, int]] = []
    for stream, interest in entries:
        if stream.closed:
            raise StreamInvalid("cannot poll a closed stream")
        if isinstance(stream, TcpChannelStream):
            tcp.append((stream, interest))
        elif isinstance(stream, SimChannelStream):
            sim.append((stream, interest))
        else:
            raise StreamInvalid(f"unknown stream type {type(stream).__name__}")

    deadline = time.monotonic() + max(timeout, 0.0)
    # With a single backend we can wait efficiently; mixed lists alternate
    # in small slices (rare in practice: a session's channels share one).
    while True:
        ready: list[tuple[ChannelStream, int]] = []
        if sim:
            ready.extend(_sim_check(sim))
        if tcp:
            remaining = deadline - time.monotonic()
            if sim:
                slice_t = 0.0 if ready else min(0.005, max(remaining, 0.0))
            else:
                slice_t = max(remaining, 0.0)
            ready.extend(_tcp_select(tcp, slice_t))
        if ready:
            return ready
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return []
        if sim and not tcp:
            _sim_wait(sim, remaining)


def _tcp_select(
    entries: list[tuple[TcpChannelStream, int]], timeout: float
) -> list[tuple[ChannelStream, int]]:
    rlist = [s for s, i in entries if i & READ]
    wlist = [s for s, i in entries if i & WRITE]
    try:
        readable, writable, _ = select.select(rlist, wlist, [], timeout)
    except (OSError, ValueError) as exc:
        raise StreamInvalid(f"select failed: {exc}") from exc
    readable_set = set(readable)
    writable_set = set(writable)
    out = []
    for stream, interest in entries:
        mask = 0
        if interest & READ and stream in readable_set:
            mask |= READ
        if interest & WRITE and stream in writable_set:
            mask |= WRITE
        if mask:
            out.append((stream, mask))
    return out


def _sim_check(
    entries: list[tuple["SimChannelStream", int]],
) -> list[tuple[ChannelStream, int]]:
    now = time.monotonic()
    out = []
    for stream, interest in entries:
        mask = 0
        if interest & READ and stream.read_ready(now):
            mask |= READ
        if interest & WRITE and stream.write_ready():
            mask |= WRITE
        if mask:
            out.append((stream, mask))
    return out


def _sim_wait(entries: list[tuple["SimChannelStream", int]], timeout: float) -> None:
    hub = entries[0][0].network
    paced = any(s.network.cfg.bandwidth_cap or s.network.cfg.per_channel_latency
                for s, _ in entries)
    wait = min(timeout, 0.002) if paced else timeout
    with hub.cond:
        hub.cond.wait(wait)


class Fragmentation(Enum):
    NONE = "none"
    RANDOM_SPLIT = "random-split"


class FaultKind(Enum):
    CLOSE = "close"
    STALL = "stall"


@dataclass(frozen=True)
class FaultSpec:
    channel_index: int
    byte_position: int
    kind: FaultKind


@dataclass(frozen=True)
class SimNetConfig:
    """Deterministic in-memory network: same seed and plan, same traces."""

    seed: int = 0
    per_channel_latency: float = 0.0
    bandwidth_cap: int | None = None          # bytes/second per direction
    fragmentation: Fragmentation = Fragmentation.NONE
    fault_plan: tuple[FaultSpec, ...] = ()

    def __post_init__(self):
        if self.bandwidth_cap is not None and self.bandwidth_cap <= 0:
            raise InvariantViolation("bandwidth cap must be positive")


class _SimPipe:
    """One direction of a simulated channel. Guarded by the network lock."""

    def __init__(self, cfg: SimNetConfig, channel: int, label: str):
        self.label = label
        self.cfg = cfg
        self.buf = bytearray()
        self.base = 0                 # stream position of buf[0]
        self.written = 0
        self.delivered = 0
        self.writer_closed = False
        self.reader_closed = False
        self.dead = False             # hard close (fault or stream close)
        self.limit: int | None = None
        self.limit_kind: FaultKind | None = None
        self.first_write: float | None = None
        self.arrivals: list[tuple[int, float]] = []   # (end position, visible at)
        self.boundaries_hit: list[int] = []
        # Seed folds in the direction label bytes so both pipes of a channel
        # draw distinct but reproducible fragment boundaries.
        salt = int.from_bytes(label.encode(), "little")
        self._rng = Random((cfg.seed * 1_000_003 + channel * 7919) ^ salt)
        self._next_boundary = self._draw_boundary(0)
        for fault in cfg.fault_plan:
            if fault.channel_index == channel:
                if self.limit is None or fault.byte_position < self.limit:
                    self.limit = fault.byte_position
                    self.limit_kind = fault.kind

    def _draw_boundary(self, pos: int) -> int:
        if self.cfg.fragmentation is Fragmentation.NONE:
            return 1 << 62
        r = self._rng
        if r.random() < 0.25:
            step = r.randint(1, 16)
        else:
            step = r.randint(17, 65536)
        return pos + step

    def write(self, data: bytes, now: float) -> None:
        if self.first_write is None:
            self.first_write = now
        self.buf.extend(data)
        self.written += len(data)
        self.arrivals.append((self.written, now + self.cfg.per_channel_latency))

    def _visible(self, now: float) -> int:
        while self.arrivals and self.arrivals[0][0] <= self.delivered:
            self.arrivals.pop(0)
        end = self.delivered
        for pos, at in self.arrivals:
            if at <= now:
                end = max(end, pos)
            else:
                break
        if self.cfg.bandwidth_cap and self.first_write is not None:
            # token-bucket allowance, cumulative from the first write
            allowance = int(self.cfg.bandwidth_cap * (now - self.first_write))
            end = min(end, allowance)
        if self.limit is not None:
            end = min(end, self.limit)
        return max(end, self.delivered)

    def available(self, now: float) -> int:
        return self._visible(now) - self.delivered

    def at_eof(self, now: float) -> bool:
        if self.limit is not None and self.limit_kind is FaultKind.CLOSE:
            if self.delivered >= self.limit:
                return True
        if self.dead and self.available(now) == 0:
            return True
        return self.writer_closed and self.delivered == self.written

    def read(self, n: int, now: float) -> bytes | None:
        avail = self.available(now)
        if avail <= 0:
            if self.at_eof(now):
                return b""
            return None
        while self.delivered >= self._next_boundary:
            self._next_boundary = self._draw_boundary(self._next_boundary)
        take = min(n, avail, self._next_boundary - self.delivered)
        start = self.delivered - self.base
        out = bytes(self.buf[start:start + take])
        self.delivered += take
        if self.delivered == self._next_boundary:
            self.boundaries_hit.append(self.delivered)
            self._next_boundary = self._draw_boundary(self._next_boundary)
        if start + take > 1 << 20:
            del self.buf[: start + take]
            self.base = self.delivered
        return out

    def trace(self) -> tuple:
        status = "open"
        if self.limit is not None:
            status = f"{self.limit_kind.value}@{self.limit}"
        elif self.writer_closed:
            status = "closed"
        return (self.label, tuple(self.boundaries_hit), self.delivered, status)


class SimNetwork:
    """Hub owning n simulated duplex channels."""

    def __init__(self, cfg: SimNetConfig, n: int):
        if n < 1:
            raise InvariantViolation("simulated network needs at least one channel")
        self.cfg = cfg
        self.cond = threading.Condition()
        self.client_streams: list[SimChannelStream] = []
        self.server_streams: list[SimChannelStream] = []
        for i in range(n):
            c2s = _SimPipe(cfg, i, f"c2s#{i}")
            s2c = _SimPipe(cfg, i, f"s2c#{i}")
            self.client_streams.append(SimChannelStream(self, i, out=c2s, inn=s2c))
            self.server_streams.append(SimChannelStream(self, i, out=s2c, inn=c2s))

    def delivery_trace(self) -> tuple:
        """Per-pipe fragment boundaries, byte totals and fault markers."""
        with self.cond:
            pipes = []
            for cs in self.client_streams:
                pipes.append(cs._out.trace())
                pipes.append(cs._in.trace())
            return tuple(pipes)

    def trace_hash(self) -> str:
        return hashlib.sha256(repr(self.delivery_trace()).encode()).hexdigest()


class SimChannelStream(ChannelStream):
    def __init__(self, network: SimNetwork, index: int, out: _SimPipe, inn: _SimPipe):
        self.network = network
        self.index = index
        self._out = out
        self._in = inn
        self._closed = False
        _census_add(1)

    def recv(self, max_bytes: int) -> bytes | None:
        if self._closed:
            raise OSError("recv on closed stream")
        with self.network.cond:
            now = time.monotonic()
            data = self._in.read(max_bytes, now)
            if data:
                self._maybe_trip_fault(self._in)
            return data

    def send(self, data) -> int:
        if self._closed:
            raise BrokenPipeError("send on closed stream")
        with self.network.cond:
            if self._out.dead or self._out.writer_closed or self._out.reader_closed:
                raise BrokenPipeError("peer closed")
            if self._out.limit_kind is FaultKind.STALL:
                pass  # writes vanish past the stall point but still succeed
            self._out.write(bytes(data), time.monotonic())
            self.network.cond.notify_all()
            return len(data)

    def _maybe_trip_fault(self, pipe: _SimPipe) -> None:
        # A close fault severs both directions once its position delivers.
        if (
            pipe.limit is not None
            and pipe.limit_kind is FaultKind.CLOSE
            and pipe.delivered >= pipe.limit
        ):
            self._out.dead = True
            self._in.dead = True
            self.network.cond.notify_all()

    def read_ready(self, now: float) -> bool:
        with self.network.cond:
            return self._in.available(now) > 0 or self._in.at_eof(now)

    def write_ready(self) -> bool:
        with self.network.cond:
            return not (
                self._out.dead or self._out.writer_closed or self._out.reader_closed
            )

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        _census_add(-1)
        with self.network.cond:
            self._out.writer_closed = True
            self._in.reader_closed = True
            self.network.cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed


def sim_pair(
    cfg: SimNetConfig, n: int
) -> tuple[list[SimChannelStream], list[SimChannelStream]]:
    """n deterministic in-memory duplex pipes: (client ends, server ends)."""
    network = SimNetwork(cfg, n)
    return network.client_streams, network.server_streams
