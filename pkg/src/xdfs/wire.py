"""Binary wire codec for every header exchanged on a channel.

All integers are little-endian. Four frame kinds cross the wire:

Channel header — fixed 13 bytes, one per message on an established channel:

    ┌────────┬───────┬─────────────────────────────────────────────┐
    │ field  │ bytes │ meaning                                     │
    ├────────┼───────┼─────────────────────────────────────────────┤
    │ opcode │   1   │ ChannelEvent                                │
    │ offset │   8   │ u64 file byte offset (0 when no block)      │
    │ length │   4   │ u32 block byte count (0 when no block)      │
    └────────┴───────┴─────────────────────────────────────────────┘

    A block descriptor is carried iff opcode is XFTSM, XFTSMU or CONM;
    for every other opcode both block fields MUST be zero.  Opcode 0x06
    is deliberately unassigned.

Negotiation request — variable length, first frame on every channel:

    magic "XDFS"(4) | ver_major(1) | ver_minor(1) | direction(1)
    | session_id(16) | channel_index(2) | channel_count(2)
    | tcp_window(8) | block_size(8)
    | local_name  (u32 len + UTF-8)
    | remote_name (u32 len + UTF-8)
    | credentials (u32 len + raw bytes)
    | ext_count(4), then per entry: key (u32 len + UTF-8) value (u32 len + UTF-8)

Negotiation reply — variable length, one per request:

    magic "XDFR"(4) | status(1) | session_id(16) | file_size(8)
    | reason (u32 len + UTF-8)

Exception header — per-request response / block acknowledgment:

    status(1) | code(2) | message (u32 len + UTF-8, capped at 64 KiB)

Decoding is total: arbitrary input yields a value, MalformedHeader,
UnknownChannelEvent or InvariantViolation, never an uncaught crash.
"""

from __future__ import annotations

import struct
import uuid
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import InvariantViolation, XdfsError

MAGIC_REQUEST = b"XDFS"
MAGIC_REPLY = b"XDFR"

CHANNEL_HEADER_SIZE = 13
EXCEPTION_HEAD_SIZE = 7

MAX_TEXT_FIELD = 64 * 1024
MAX_EXT_ENTRIES = 1024
MIN_BLOCK_SIZE = 4096
MAX_BLOCK_SIZE = 1 << 30
MAX_CHANNELS = 65535

# Exception reason codes used by the state machines.
REASON_NONE = 0
REASON_MODE_UNIMPLEMENTED = 1
REASON_ZERO_COPY_UNSUPPORTED = 2
REASON_IO_FAILURE = 3

_U64_MAX = (1 << 64) - 1

_CHANNEL_STRUCT = struct.Struct("<BQI")
_REQUEST_HEAD = struct.Struct("<4sBBB16sHHQQ")
_REPLY_HEAD = struct.Struct("<4sB16sQ")
_EXCEPTION_HEAD = struct.Struct("<BHI")
_U32 = struct.Struct("<I")


class MalformedHeader(XdfsError):
    """Bytes do not parse as the claimed frame (truncation, bad magic, ...)."""


class UnknownChannelEvent(MalformedHeader):
    """Channel header carries an opcode outside the normative table."""

    def __init__(self, opcode: int):
        super().__init__(f"unknown channel event opcode 0x{opcode:02x}")
        self.opcode = opcode


class ChannelEvent(IntEnum):
    """Opcode steering the duplex channel negotiation."""

    EOFT = 0x00     # end of file, terminate the session
    EOFR = 0x01     # end of file, channel becomes reusable
    XFTSMU = 0x02   # upload-mode block transfer
    XFTSM = 0x03    # download-mode block transfer
    XPATHM = 0x04   # path-mode switch (refused by this artifact)
    NOOP = 0x05
    CONM = 0x07     # continue with the latest channel event state
    ZXDFS = 0x08    # zero-copy variant (decoded, refused at session layer)


#: Events whose header carries a block descriptor.
BLOCK_EVENTS = frozenset({ChannelEvent.XFTSM, ChannelEvent.XFTSMU, ChannelEvent.CONM})


class Direction(IntEnum):
    UPLOAD = 0
    DOWNLOAD = 1


class ExceptionStatus(IntEnum):
    OK = 0
    ERROR = 1


class ReplyStatus(IntEnum):
    ACCEPTED = 0
    REJECTED = 1


@dataclass(frozen=True)
class ProtocolVersion:
    """Protocol revision; this artifact speaks exactly 1.0."""

    major: int = 1
    minor: int = 0

    def __post_init__(self):
        if (self.major, self.minor) != (1, 0):
            raise InvariantViolation(
                f"unsupported protocol version {self.major}.{self.minor}"
            )


PROTOCOL_VERSION = ProtocolVersion(1, 0)


@dataclass(frozen=True)
class SessionId:
    """16-byte globally unique session identifier; all-zero is reserved."""

    value: bytes

    def __post_init__(self):
        if not isinstance(self.value, bytes) or len(self.value) != 16:
            raise InvariantViolation("session id must be exactly 16 bytes")
        if self.value == b"\x00" * 16:
            raise InvariantViolation("all-zero session id is reserved")

    @classmethod
    def new(cls) -> "SessionId":
        return cls(uuid.uuid4().bytes)

    @property
    def hex(self) -> str:
        return self.value.hex()

    def __str__(self) -> str:
        return self.value.hex()[:12]


@dataclass(frozen=True)
class BlockDescriptor:
    """Addresses one file block in flight: bytes [offset, offset+length)."""

    offset: int
    length: int

    def __post_init__(self):
        if not 0 <= self.offset <= _U64_MAX:
            raise InvariantViolation(f"block offset {self.offset} outside u64")
        if self.length < 1:
            raise InvariantViolation("block length must be >= 1")
        if self.length > 0xFFFFFFFF:
            raise InvariantViolation(f"block length {self.length} outside u32")
        if self.offset + self.length > _U64_MAX:
            raise InvariantViolation("block end overflows 64 bits")

    @property
    def end(self) -> int:
        return self.offset + self.length

    def __str__(self) -> str:
        return f"(offset={self.offset},len={self.length})"


@dataclass(frozen=True)
class ChannelHeader:
    """Per-message envelope: an event plus an optional block descriptor."""

    event: ChannelEvent
    block: BlockDescriptor | None = None

    def __post_init__(self):
        if self.event in BLOCK_EVENTS:
            if self.block is None:
                raise InvariantViolation(f"{self.event.name} header requires a block")
        elif self.block is not None:
            raise InvariantViolation(f"{self.event.name} header carries no block")

    def __str__(self) -> str:
        if self.block is None:
            return self.event.name
        return f"{self.event.name}{self.block}"


@dataclass(frozen=True)
class ExceptionHeader:
    """Binary response record; Ok acks a block, Error carries a failure."""

    status: ExceptionStatus
    code: int = 0
    message: str = ""

    def __post_init__(self):
        if not 0 <= self.code <= 0xFFFF:
            raise InvariantViolation(f"exception code {self.code} outside u16")
        if self.status is ExceptionStatus.OK and (self.code != 0 or self.message):
            raise InvariantViolation("Ok exception must have code 0 and no message")
        if len(self.message.encode("utf-8")) > MAX_TEXT_FIELD:
            raise InvariantViolation("exception message exceeds 64 KiB")

    def __str__(self) -> str:
        if self.status is ExceptionStatus.OK:
            return "Ok"
        return f'Error({self.code},"{self.message}")'


OK_EXCEPTION = ExceptionHeader(ExceptionStatus.OK)


@dataclass(frozen=True)
class NegotiationRequest:
    """Per-channel session-join record sent as the first frame."""

    session_id: SessionId
    direction: Direction
    channel_index: int
    channel_count: int
    remote_file_name: str
    local_file_name: str = ""
    tcp_window_size: int = 1 << 20
    block_size: int = 1 << 20
    credentials: bytes = b""
    extended_mode: dict[str, str] = field(default_factory=dict)
    protocol_version: ProtocolVersion = PROTOCOL_VERSION

    def __post_init__(self):
        if not 1 <= self.channel_count <= MAX_CHANNELS:
            raise InvariantViolation(
                f"channel count {self.channel_count} outside 1..{MAX_CHANNELS}"
            )
        if not 0 <= self.channel_index < self.channel_count:
            raise InvariantViolation(
                f"channel index {self.channel_index} outside 0..{self.channel_count - 1}"
            )
        if not MIN_BLOCK_SIZE <= self.block_size <= MAX_BLOCK_SIZE:
            raise InvariantViolation(
                f"block size {self.block_size} outside {MIN_BLOCK_SIZE}..{MAX_BLOCK_SIZE}"
            )
        if not self.remote_file_name:
            raise InvariantViolation("remote file name must be non-empty")
        if not 0 <= self.tcp_window_size <= _U64_MAX:
            raise InvariantViolation("tcp window size outside u64")


@dataclass(frozen=True)
class NegotiationReply:
    """Server answer to one negotiation request."""

    status: ReplyStatus
    session_id: SessionId
    reason: str = ""
    file_size: int = 0

    def __post_init__(self):
        if self.status is ReplyStatus.REJECTED and not self.reason:
            raise InvariantViolation("rejected reply requires a reason")
        if self.status is ReplyStatus.ACCEPTED and self.reason:
            raise InvariantViolation("accepted reply carries no reason")
        if not 0 <= self.file_size <= _U64_MAX:
            raise InvariantViolation("file size outside u64")


class _Truncated(Exception):
    """Internal: more bytes needed to finish parsing."""


class _Cursor:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise _Truncated
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self, what: str) -> str:
        raw = self.sized(what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedHeader(f"{what} is not valid UTF-8") from exc

    def sized(self, what: str) -> bytes:
        n = self.u32()
        if n > MAX_TEXT_FIELD:
            raise MalformedHeader(f"{what} length {n} exceeds {MAX_TEXT_FIELD}")
        return self.take(n)


def encode_channel_header(header: ChannelHeader) -> bytes:
    """Encode to the fixed 13-byte frame."""
    block = header.block
    if block is None:
        return _CHANNEL_STRUCT.pack(header.event.value, 0, 0)
    return _CHANNEL_STRUCT.pack(header.event.value, block.offset, block.length)


def decode_channel_header(data: bytes) -> ChannelHeader:
    """Decode a 13-byte channel header frame."""
    if len(data) < CHANNEL_HEADER_SIZE:
        raise MalformedHeader(
            f"short channel header: {len(data)} < {CHANNEL_HEADER_SIZE} bytes"
        )
    if len(data) > CHANNEL_HEADER_SIZE:
        raise MalformedHeader("trailing bytes after channel header")
    opcode, offset, length = _CHANNEL_STRUCT.unpack(data)
    try:
        event = ChannelEvent(opcode)
    except ValueError:
        raise UnknownChannelEvent(opcode) from None
    if event in BLOCK_EVENTS:
        return ChannelHeader(event, BlockDescriptor(offset, length))
    if offset or length:
        raise MalformedHeader(f"nonzero block fields on {event.name} header")
    return ChannelHeader(event)


def encode_exception(exc: ExceptionHeader) -> bytes:
    msg = exc.message.encode("utf-8")
    return _EXCEPTION_HEAD.pack(exc.status.value, exc.code, len(msg)) + msg


def _parse_exception(buf: bytes) -> tuple[ExceptionHeader, int]:
    cur = _Cursor(buf)
    status_b, code, msg_len = _EXCEPTION_HEAD.unpack(cur.take(EXCEPTION_HEAD_SIZE))
    try:
        status = ExceptionStatus(status_b)
    except ValueError:
        raise MalformedHeader(f"bad exception status byte 0x{status_b:02x}") from None
    if msg_len > MAX_TEXT_FIELD:
        raise MalformedHeader(f"exception message length {msg_len} exceeds 64 KiB")
    raw = cur.take(msg_len)
    try:
        message = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeader("exception message is not valid UTF-8") from exc
    return ExceptionHeader(status, code, message), cur.pos


def decode_exception(data: bytes) -> ExceptionHeader:
    try:
        exc, consumed = _parse_exception(data)
    except _Truncated:
        raise MalformedHeader("truncated exception header") from None
    if consumed != len(data):
        raise MalformedHeader("trailing bytes after exception header")
    return exc


def encode_negotiation(req: NegotiationRequest) -> bytes:
    out = bytearray(
        _REQUEST_HEAD.pack(
            MAGIC_REQUEST,
            req.protocol_version.major,
            req.protocol_version.minor,
            req.direction.value,
            req.session_id.value,
            req.channel_index,
            req.channel_count,
            req.tcp_window_size,
            req.block_size,
        )
    )

    def put(raw: bytes) -> None:
        if len(raw) > MAX_TEXT_FIELD:
            raise InvariantViolation("negotiation field exceeds 64 KiB")
        out.extend(_U32.pack(len(raw)))
        out.extend(raw)

    put(req.local_file_name.encode("utf-8"))
    put(req.remote_file_name.encode("utf-8"))
    put(req.credentials)
    if len(req.extended_mode) > MAX_EXT_ENTRIES:
        raise InvariantViolation("too many extended-mode entries")
    out.extend(_U32.pack(len(req.extended_mode)))
    for key, value in req.extended_mode.items():
        put(key.encode("utf-8"))
        put(value.encode("utf-8"))
    return bytes(out)


def _parse_negotiation(buf: bytes) -> tuple[NegotiationRequest, int]:
    cur = _Cursor(buf)
    head = cur.take(_REQUEST_HEAD.size)
    magic, major, minor, direction_b, sid, index, count, window, block = (
        _REQUEST_HEAD.unpack(head)
    )
    if magic != MAGIC_REQUEST:
        raise MalformedHeader(f"bad negotiation magic {magic!r}")
    if (major, minor) != (1, 0):
        raise MalformedHeader(f"unsupported protocol version {major}.{minor}")
    try:
        direction = Direction(direction_b)
    except ValueError:
        raise MalformedHeader(f"bad direction byte 0x{direction_b:02x}") from None
    local_name = cur.text("local file name")
    remote_name = cur.text("remote file name")
    credentials = cur.sized("credentials")
    ext_count = cur.u32()
    if ext_count > MAX_EXT_ENTRIES:
        raise MalformedHeader(f"extended-mode entry count {ext_count} too large")
    extended: dict[str, str] = {}
    for _ in range(ext_count):
        key = cur.text("extended-mode key")
        extended[key] = cur.text("extended-mode value")
    req = NegotiationRequest(
        session_id=SessionId(sid),
        direction=direction,
        channel_index=index,
        channel_count=count,
        remote_file_name=remote_name,
        local_file_name=local_name,
        tcp_window_size=window,
        block_size=block,
        credentials=credentials,
        extended_mode=extended,
    )
    return req, cur.pos


def decode_negotiation(data: bytes) -> NegotiationRequest:
    try:
        req, consumed = _parse_negotiation(data)
    except _Truncated:
        raise MalformedHeader("truncated negotiation frame") from None
    if consumed != len(data):
        raise MalformedHeader("trailing bytes after negotiation frame")
    return req


def encode_reply(reply: NegotiationReply) -> bytes:
    reason = reply.reason.encode("utf-8")
    if len(reason) > MAX_TEXT_FIELD:
        raise InvariantViolation("reply reason exceeds 64 KiB")
    return (
        _REPLY_HEAD.pack(
            MAGIC_REPLY, reply.status.value, reply.session_id.value, reply.file_size
        )
        + _U32.pack(len(reason))
        + reason
    )


def _parse_reply(buf: bytes) -> tuple[NegotiationReply, int]:
    cur = _Cursor(buf)
    magic, status_b, sid, file_size = _REPLY_HEAD.unpack(cur.take(_REPLY_HEAD.size))
    if magic != MAGIC_REPLY:
        raise MalformedHeader(f"bad reply magic {magic!r}")
    try:
        status = ReplyStatus(status_b)
    except ValueError:
        raise MalformedHeader(f"bad reply status byte 0x{status_b:02x}") from None
    reason = cur.text("reply reason")
    reply = NegotiationReply(
        status=status, session_id=SessionId(sid), reason=reason, file_size=file_size
    )
    return reply, cur.pos


def decode_reply(data: bytes) -> NegotiationReply:
    try:
        reply, consumed = _parse_reply(data)
    except _Truncated:
        raise MalformedHeader("truncated negotiation reply") from None
    if consumed != len(data):
        raise MalformedHeader("trailing bytes after negotiation reply")
    return reply


def try_parse_negotiation(buf: bytes) -> tuple[NegotiationRequest, int] | None:
    """Incremental parse for stream readers; None means feed more bytes."""
    try:
        return _parse_negotiation(buf)
    except _Truncated:
        return None


def try_parse_reply(buf: bytes) -> tuple[NegotiationReply, int] | None:
    try:
        return _parse_reply(buf)
    except _Truncated:
        return None


def try_parse_exception(buf: bytes) -> tuple[ExceptionHeader, int] | None:
    try:
        return _parse_exception(buf)
    except _Truncated:
        return None
