"""Events, actions, acknowledgment lifecycle and transition traces.

Events reify everything that can reach a protocol machine; actions are
descriptions the runtime executes.  Both are immutable records so the
step functions stay pure and traces replay bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from ..errors import InvariantViolation, XdfsError
from ..wire import (
    BlockDescriptor,
    ChannelEvent,
    ChannelHeader,
    ExceptionHeader,
    NegotiationRequest,
)
from ..storage import WriteRequest


class AckLifecycle(Enum):
    """Per-channel acknowledgment state on the sender's read-readiness list."""

    FIRST_TIME = "FirstTime"
    NOT_DONE = "NotDone"
    DONE = "Done"


_LEGAL_ACK_MOVES = {
    (AckLifecycle.FIRST_TIME, AckLifecycle.NOT_DONE),  # block sent
    (AckLifecycle.NOT_DONE, AckLifecycle.DONE),        # Ok ack received
    (AckLifecycle.DONE, AckLifecycle.NOT_DONE),        # next block sent
}


def advance_lifecycle(current: AckLifecycle, target: AckLifecycle) -> AckLifecycle:
    """Validate one lifecycle move; staying put is always legal."""
    if target is current:
        return target
    if (current, target) not in _LEGAL_ACK_MOVES:
        raise InvariantViolation(
            f"illegal ack lifecycle move {current.value} -> {target.value}"
        )
    return target


class IllegalTransition(XdfsError):
    """The event is not legal in the machine's current state.

    Raised (never swallowed) so hostile event orders from the simulated
    network surface as values the runtime converts into the Error terminal.
    """

    def __init__(self, machine: str, phase: str, event: "FsmEvent", why: str = ""):
        detail = f": {why}" if why else ""
        super().__init__(f"{machine}: {_fmt_event(event)} illegal in {phase}{detail}")
        self.machine = machine
        self.phase = phase
        self.event = event


class PayloadRef:
    """Length-preserving stand-in for block bytes retained in traces.

    Traces record that a payload of some size moved, never the bytes
    themselves, so the runtime may recycle payload buffers freely.
    """

    __slots__ = ("length",)

    def __init__(self, length: int):
        self.length = length

    def __len__(self) -> int:
        return self.length

    def __eq__(self, other) -> bool:
        return isinstance(other, PayloadRef) and other.length == self.length

    def __repr__(self) -> str:
        return f"PayloadRef({self.length})"


# --------------------------------------------------------------------------
# Events


@dataclass(frozen=True)
class ChannelConnected:
    channel: int


@dataclass(frozen=True)
class NegotiationReceived:
    request: NegotiationRequest


@dataclass(frozen=True)
class ReadReady:
    channel: int


@dataclass(frozen=True)
class WriteReady:
    channel: int


@dataclass(frozen=True)
class HeaderReceived:
    channel: int
    header: ChannelHeader
    payload: bytes = b""


@dataclass(frozen=True)
class ExceptionReceived:
    channel: int
    exception: ExceptionHeader


@dataclass(frozen=True)
class BlockIoDone:
    block: BlockDescriptor


@dataclass(frozen=True)
class DiskReady:
    pass


@dataclass(frozen=True)
class EndOfFile:
    pass


@dataclass(frozen=True)
class PeerClosed:
    channel: int


@dataclass(frozen=True)
class LocalError:
    description: str


FsmEvent = (
    ChannelConnected
    | NegotiationReceived
    | ReadReady
    | WriteReady
    | HeaderReceived
    | ExceptionReceived
    | BlockIoDone
    | DiskReady
    | EndOfFile
    | PeerClosed
    | LocalError
)


# --------------------------------------------------------------------------
# Actions


@dataclass(frozen=True)
class SendHeader:
    channel: int
    header: ChannelHeader


@dataclass(frozen=True)
class SendBlockPayload:
    channel: int
    block: BlockDescriptor


@dataclass(frozen=True)
class SendException:
    channel: int
    exception: ExceptionHeader


@dataclass(frozen=True)
class ReadBlockFromDisk:
    block: BlockDescriptor


@dataclass(frozen=True)
class WriteBlockToDisk:
    request: WriteRequest


@dataclass(frozen=True)
class MoveToReadList:
    channel: int
    lifecycle: AckLifecycle


@dataclass(frozen=True)
class MoveToWriteList:
    channel: int


@dataclass(frozen=True)
class BroadcastEof:
    kind: ChannelEvent

    def __post_init__(self):
        if self.kind not in (ChannelEvent.EOFT, ChannelEvent.EOFR):
            raise InvariantViolation("broadcast kind must be EOFT or EOFR")


@dataclass(frozen=True)
class CloseChannel:
    channel: int


@dataclass(frozen=True)
class CloseSession:
    pass


FsmAction = (
    SendHeader
    | SendBlockPayload
    | SendException
    | ReadBlockFromDisk
    | WriteBlockToDisk
    | MoveToReadList
    | MoveToWriteList
    | BroadcastEof
    | CloseChannel
    | CloseSession
)


# --------------------------------------------------------------------------
# Formatting (stable: golden traces depend on it)


def _fmt_event(ev: FsmEvent) -> str:
    if isinstance(ev, ChannelConnected):
        return f"ChannelConnected({ev.channel})"
    if isinstance(ev, NegotiationReceived):
        req = ev.request
        return (
            f"NegotiationReceived(ch={req.channel_index},n={req.channel_count},"
            f"dir={req.direction.name})"
        )
    if isinstance(ev, ReadReady):
        return f"ReadReady({ev.channel})"
    if isinstance(ev, WriteReady):
        return f"WriteReady({ev.channel})"
    if isinstance(ev, HeaderReceived):
        if ev.payload:
            return f"HeaderReceived(ch={ev.channel},{ev.header},payload={len(ev.payload)})"
        return f"HeaderReceived(ch={ev.channel},{ev.header})"
    if isinstance(ev, ExceptionReceived):
        return f"ExceptionReceived(ch={ev.channel},{ev.exception})"
    if isinstance(ev, BlockIoDone):
        return f"BlockIoDone{ev.block}"
    if isinstance(ev, DiskReady):
        return "DiskReady"
    if isinstance(ev, EndOfFile):
        return "EndOfFile"
    if isinstance(ev, PeerClosed):
        return f"PeerClosed({ev.channel})"
    if isinstance(ev, LocalError):
        return f'LocalError("{ev.description}")'
    return repr(ev)


def _fmt_action(a: FsmAction) -> str:
    if isinstance(a, SendHeader):
        return f"SendHeader(ch={a.channel},{a.header})"
    if isinstance(a, SendBlockPayload):
        return f"SendBlockPayload(ch={a.channel},{a.block})"
    if isinstance(a, SendException):
        return f"SendException(ch={a.channel},{a.exception})"
    if isinstance(a, ReadBlockFromDisk):
        return f"ReadBlockFromDisk{a.block}"
    if isinstance(a, WriteBlockToDisk):
        return str(a.request).replace("WriteRequest", "WriteBlockToDisk")
    if isinstance(a, MoveToReadList):
        return f"MoveToReadList(ch={a.channel},{a.lifecycle.value})"
    if isinstance(a, MoveToWriteList):
        return f"MoveToWriteList(ch={a.channel})"
    if isinstance(a, BroadcastEof):
        return f"BroadcastEof({a.kind.name})"
    if isinstance(a, CloseChannel):
        return f"CloseChannel({a.channel})"
    if isinstance(a, CloseSession):
        return "CloseSession"
    return repr(a)


format_event = _fmt_event
format_action = _fmt_action


def redact_event(ev: FsmEvent) -> FsmEvent:
    """Swap payload bytes for a PayloadRef before a trace retains the event."""
    if isinstance(ev, HeaderReceived) and not isinstance(ev.payload, PayloadRef):
        if ev.payload:
            return HeaderReceived(ev.channel, ev.header, PayloadRef(len(ev.payload)))
    return ev


def redact_action(action: FsmAction) -> FsmAction:
    if isinstance(action, WriteBlockToDisk) and not isinstance(
        action.request.data, PayloadRef
    ):
        request = WriteRequest(
            action.request.offset, PayloadRef(len(action.request.data))
        )
        return WriteBlockToDisk(request)
    return action


@dataclass(frozen=True)
class TraceStep:
    state_before: str
    event: FsmEvent
    actions: tuple[FsmAction, ...]
    state_after: str

    def line(self) -> str:
        acts = ";".join(_fmt_action(a) for a in self.actions) or "-"
        return "\t".join((self.state_before, _fmt_event(self.event), acts, self.state_after))


@dataclass
class FsmTrace:
    """Append-only record of every transition a machine took."""

    machine: str
    steps: list[TraceStep] = field(default_factory=list)

    def append(self, step: TraceStep) -> None:
        self.steps.append(step)

    def events(self) -> list[FsmEvent]:
        return [s.event for s in self.steps]

    def actions(self) -> list[FsmAction]:
        return [a for s in self.steps for a in s.actions]

    def dump(self) -> str:
        lines = [f"# machine: {self.machine}"]
        lines.extend(s.line() for s in self.steps)
        return "\n".join(lines) + "\n"
