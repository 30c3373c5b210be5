"""Session registry and the negotiation handshake.

The first channel of a transfer registers a session under its GUID; the
remaining n-1 channels join it, each repeating the full parameter set so
the registry can cross-check them.  A session activates exactly when the
n-th channel joins.  Authentication is a pluggable pass-through stub
(the real security layer is out of scope).
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum

from . import transport
from .errors import XdfsError
from .transport import ChannelStream, Endpoint, poll_readiness
from .wire import (
    Direction,
    NegotiationReply,
    NegotiationRequest,
    ReplyStatus,
    SessionId,
    encode_negotiation,
    encode_reply,
    try_parse_negotiation,
    try_parse_reply,
)

DEFAULT_FILL_TIMEOUT = 30.0
MAX_NEGOTIATION_BYTES = 1 << 20


class SessionError(XdfsError):
    pass


class AuthDenied(SessionError):
    pass


class DuplicateChannelIndex(SessionError):
    pass


class ParameterMismatch(SessionError):
    pass


class SessionClosed(SessionError):
    pass


class NegotiationRejected(SessionError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class HandshakeTimeout(SessionError):
    pass


class Authenticator:
    """Pluggable credential check; raise AuthDenied to refuse."""

    def authenticate(self, credentials: bytes) -> None:
        raise NotImplementedError


class PassThroughAuthenticator(Authenticator):
    """Stub: allows everything except the literal credential b"deny"."""

    def authenticate(self, credentials: bytes) -> None:
        if credentials == b"deny":
            raise AuthDenied("credentials refused")


class SessionState(Enum):
    FILLING = "Filling"
    ACTIVE = "Active"
    CLOSED = "Closed"


class Role(Enum):
    REGISTRAR = "Registrar"
    JOINER = "Joiner"


# Parameters every joining channel must repeat identically.
_SESSION_SCOPED = ("direction", "channel_count", "remote_file_name", "block_size")


@dataclass
class SessionRecord:
    session_id: SessionId
    direction: Direction
    expected_channels: int
    params: NegotiationRequest
    created_at: float
    state: SessionState = SessionState.FILLING
    joined: dict[int, ChannelStream] = field(default_factory=dict)
    requests: list[NegotiationRequest] = field(default_factory=list)
    activated: threading.Event = field(default_factory=threading.Event)
    meta: dict = field(default_factory=dict)

    @property
    def filled(self) -> bool:
        return len(self.joined) == self.expected_channels

    def streams_by_index(self) -> list[ChannelStream]:
        return [self.joined[i] for i in sorted(self.joined)]


class SessionRegistry:
    """The one cross-thread structure on the server; all ops are atomic."""

    def __init__(self, clock=time.monotonic):
        self._lock = threading.Lock()
        self._sessions: dict[bytes, SessionRecord] = {}
        self._clock = clock

    def register_or_join(
        self, stream: ChannelStream, req: NegotiationRequest
    ) -> tuple[SessionRecord, Role]:
        """First channel registers, later ones join; n-th join activates."""
        key = req.session_id.value
        with self._lock:
            record = self._sessions.get(key)
            if record is None:
                record = SessionRecord(
                    session_id=req.session_id,
                    direction=req.direction,
                    expected_channels=req.channel_count,
                    params=req,
                    created_at=self._clock(),
                )
                record.joined[req.channel_index] = stream
                record.requests.append(req)
                self._sessions[key] = record
                if record.filled:
                    record.state = SessionState.ACTIVE
                    record.activated.set()
                return record, Role.REGISTRAR
            if record.state is SessionState.CLOSED:
                raise SessionClosed(f"session {req.session_id} is closed")
            if record.state is SessionState.ACTIVE:
                raise SessionClosed(f"session {req.session_id} is already active")
            for name in _SESSION_SCOPED:
                if getattr(req, name) != getattr(record.params, name):
                    raise ParameterMismatch(
                        f"{name} differs from the registering channel"
                    )
            if req.channel_index in record.joined:
                raise DuplicateChannelIndex(
                    f"channel index {req.channel_index} already joined"
                )
            record.joined[req.channel_index] = stream
            record.requests.append(req)
            if record.filled:
                record.state = SessionState.ACTIVE
                record.activated.set()
            return record, Role.JOINER

    def expire_stale(self, max_fill_wait: float) -> list[SessionId]:
        """Close Filling sessions older than max_fill_wait; report their ids."""
        now = self._clock()
        expired: list[SessionRecord] = []
        with self._lock:
            for record in list(self._sessions.values()):
                if (
                    record.state is SessionState.FILLING
                    and now - record.created_at > max_fill_wait
                ):
                    record.state = SessionState.CLOSED
                    del self._sessions[record.session_id.value]
                    expired.append(record)
        for record in expired:
            for stream in record.joined.values():
                stream.close()
        return [record.session_id for record in expired]

    def get(self, session_id: SessionId) -> SessionRecord | None:
        with self._lock:
            return self._sessions.get(session_id.value)

    def remove(self, session_id: SessionId) -> None:
        with self._lock:
            record = self._sessions.pop(session_id.value, None)
        if record is not None:
            record.state = SessionState.CLOSED

    def counts(self) -> tuple[int, int]:
        """(filling, active) session counts."""
        with self._lock:
            filling = sum(
                1 for r in self._sessions.values() if r.state is SessionState.FILLING
            )
            active = sum(
                1 for r in self._sessions.values() if r.state is SessionState.ACTIVE
            )
            return filling, active


# --------------------------------------------------------------------------
# Blocking frame I/O used only during the handshake (data-plane I/O lives
# in the session loop and never blocks).


def send_all(stream: ChannelStream, data: bytes, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    view = memoryview(data)
    while view:
        if not poll_readiness([(stream, transport.WRITE)], 0.1):
            if time.monotonic() > deadline:
                raise HandshakeTimeout("handshake send timed out")
            continue
        sent = stream.send(view)
        view = view[sent:]


def _read_parsed(stream: ChannelStream, parser, timeout: float):
    deadline = time.monotonic() + timeout
    buf = bytearray()
    while True:
        parsed = parser(bytes(buf))
        if parsed is not None:
            return parsed[0]
        if len(buf) > MAX_NEGOTIATION_BYTES:
            raise NegotiationRejected("handshake frame too large")
        if not poll_readiness([(stream, transport.READ)], 0.1):
            if time.monotonic() > deadline:
                raise HandshakeTimeout("handshake read timed out")
            continue
        data = stream.recv(65536)
        if data is None:
            continue
        if data == b"":
            raise NegotiationRejected("peer closed during handshake")
        buf.extend(data)


def read_reply(stream: ChannelStream, timeout: float = 30.0) -> NegotiationReply:
    return _read_parsed(stream, try_parse_reply, timeout)


def read_negotiation(stream: ChannelStream, timeout: float = 30.0) -> NegotiationRequest:
    return _read_parsed(stream, try_parse_negotiation, timeout)


@dataclass
class ClientSession:
    """Established handshake: n streams ordered by channel index."""

    session_id: SessionId
    streams: list[ChannelStream]
    params: NegotiationRequest
    file_size: int

    def close(self) -> None:
        for stream in self.streams:
            stream.close()


def negotiate_client(
    ep: Endpoint,
    template: NegotiationRequest,
    connector=None,
    timeout: float = 30.0,
) -> ClientSession:
    """Open n channels, send per-channel requests, collect n Accepted replies.

    Any rejection or connect failure aborts every already-opened channel
    and surfaces the first error.  `template` must describe channel 0;
    the other indices are derived from it.  A custom `connector(index)`
    replaces the TCP dial (used by simulated-network tests).
    """
    n = template.channel_count
    streams: list[ChannelStream] = []
    file_size = 0
    try:
        for i in range(n):
            if connector is not None:
                stream = connector(i)
            else:
                stream = transport.connect(ep, window=template.tcp_window_size)
            streams.append(stream)
            req = (
                template
                if i == 0
                else NegotiationRequest(
                    session_id=template.session_id,
                    direction=template.direction,
                    channel_index=i,
                    channel_count=n,
                    remote_file_name=template.remote_file_name,
                    local_file_name=template.local_file_name,
                    tcp_window_size=template.tcp_window_size,
                    block_size=template.block_size,
                    credentials=template.credentials,
                    extended_mode=template.extended_mode,
                )
            )
            send_all(stream, encode_negotiation(req), timeout)
            reply = read_reply(stream, timeout)
            if reply.status is ReplyStatus.REJECTED:
                if reply.reason.startswith("auth:"):
                    raise AuthDenied(reply.reason)
                raise NegotiationRejected(reply.reason)
            if i == 0:
                file_size = reply.file_size
    except BaseException:
        for stream in streams:
            stream.close()
        raise
    return ClientSession(
        session_id=template.session_id,
        streams=streams,
        params=template,
        file_size=file_size,
    )


def new_session_id() -> SessionId:
    return SessionId(uuid.uuid4().bytes)
