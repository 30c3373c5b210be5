"""The four communicating finite state machines, as pure step functions.

Each machine is a transition table keyed by (rest state, event type).
A step consumes one event and may traverse several drawn states before
resting; collapsed pass-through states (ReceiveParams, SendBlocks,
MarkAwaitAck, EofCheck, DrainSendBuffers, SendEofHeaders, WriteBlocks
on the fast path) are kept in the enums for documentation but only rest
states appear in traces.

Step functions perform no I/O and never mutate their inputs: they return
a fresh state plus a list of actions for the runtime to execute.  The
same builders assemble the download and upload tables, which is what the
duality checker verifies structurally.

Data planes:
  * sender  (server-download, client-upload): reads blocks, multiplexes
    sends over write-ready channels, tracks one Ok-exception ack per
    block per channel through the FirstTime/NotDone/Done lifecycle, and
    broadcasts EOFT once everything is acknowledged.
  * receiver (client-download, server-upload): consumes block headers,
    hands writes to the disk engine, acks each block, and terminates
    after EOFT once pending writes drain.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from ..errors import InvariantViolation
from ..storage import WriteRequest
from ..wire import (
    OK_EXCEPTION,
    REASON_MODE_UNIMPLEMENTED,
    REASON_ZERO_COPY_UNSUPPORTED,
    BlockDescriptor,
    ChannelEvent,
    ChannelHeader,
    ExceptionHeader,
    ExceptionStatus,
)
from .core import (
    AckLifecycle,
    BlockIoDone,
    BroadcastEof,
    ChannelConnected,
    CloseSession,
    DiskReady,
    EndOfFile,
    ExceptionReceived,
    FsmAction,
    FsmEvent,
    FsmTrace,
    HeaderReceived,
    IllegalTransition,
    LocalError,
    MoveToReadList,
    MoveToWriteList,
    NegotiationReceived,
    PeerClosed,
    ReadBlockFromDisk,
    SendBlockPayload,
    SendException,
    SendHeader,
    TraceStep,
    WriteBlockToDisk,
    WriteReady,
    advance_lifecycle,
    redact_action,
    redact_event,
)


class ServerDownloadState(Enum):
    AUTHENTICATE = "Authenticate"
    RECEIVE_PARAMS = "ReceiveParams"
    SESSION_LOOKUP = "SessionLookup"
    REGISTER_CHANNEL = "RegisterChannel"
    CHANNELS_READY = "ChannelsReady"
    DISPATCH = "Dispatch"
    SEND_BLOCKS = "SendBlocks"
    MARK_AWAIT_ACK = "MarkAwaitAck"
    COLLECT_ACKS = "CollectAcks"
    EOF_CHECK = "EofCheck"
    DRAIN_SEND_BUFFERS = "DrainSendBuffers"
    SEND_EOF_HEADERS = "SendEofHeaders"
    TERMINATE = "Terminate"
    ERROR = "Error"


class ClientDownloadState(Enum):
    CONNECT = "Connect"
    AUTHENTICATE = "Authenticate"
    SEND_REQUEST = "SendRequest"
    ALL_CHANNELS_UP = "AllChannelsUp"
    DISPATCH = "Dispatch"
    WRITE_BLOCKS = "WriteBlocks"
    CHECK_EOF = "CheckEof"
    TERMINATE = "Terminate"
    ERROR = "Error"


class ServerUploadState(Enum):
    AUTHENTICATE = "Authenticate"
    RECEIVE_PARAMS = "ReceiveParams"
    SESSION_LOOKUP = "SessionLookup"
    REGISTER_CHANNEL = "RegisterChannel"
    CHANNELS_READY = "ChannelsReady"
    DISPATCH = "Dispatch"
    WRITE_BLOCKS = "WriteBlocks"
    CHECK_EOF = "CheckEof"
    TERMINATE = "Terminate"
    ERROR = "Error"


class ClientUploadState(Enum):
    CONNECT = "Connect"
    AUTHENTICATE = "Authenticate"
    SEND_REQUEST = "SendRequest"
    ALL_CHANNELS_UP = "AllChannelsUp"
    DISPATCH = "Dispatch"
    SEND_BLOCKS = "SendBlocks"
    MARK_AWAIT_ACK = "MarkAwaitAck"
    COLLECT_ACKS = "CollectAcks"
    EOF_CHECK = "EofCheck"
    DRAIN_SEND_BUFFERS = "DrainSendBuffers"
    SEND_EOF_HEADERS = "SendEofHeaders"
    TERMINATE = "Terminate"
    ERROR = "Error"


@dataclass(frozen=True)
class SenderState:
    phase: Enum
    joined: int = 0
    lifecycles: tuple[AckLifecycle, ...] = ()
    in_flight: tuple[BlockDescriptor | None, ...] = ()
    blocks_sent: int = 0
    blocks_acked: int = 0


@dataclass(frozen=True)
class ReceiverState:
    phase: Enum
    joined: int = 0
    pending_disk: int = 0
    blocks_received: int = 0
    eof_seen: bool = False
    idle: frozenset[int] = frozenset()


MachineState = SenderState | ReceiverState


@dataclass(frozen=True)
class Rule:
    """One table entry: handler plus its declared behavioural envelope."""

    handler: object
    label: str
    emits: frozenset
    goes: frozenset


@dataclass(frozen=True)
class MachineSpec:
    name: str
    phases: type[Enum]
    initial: Enum
    kind: str                   # "sender" | "receiver"
    data_kind: ChannelEvent     # header kind carrying this machine's blocks
    table: dict
    data_plane: frozenset[str]

    def initial_state(self) -> MachineState:
        if self.kind == "sender":
            return SenderState(phase=self.initial)
        return ReceiverState(phase=self.initial)


def _rule(handler, label, emits, goes) -> Rule:
    return Rule(handler, label, frozenset(emits), frozenset(goes))


def _tuple_set(values: tuple, index: int, value) -> tuple:
    return values[:index] + (value,) + values[index + 1:]


# --------------------------------------------------------------------------
# Front handlers: session registration (server) / channel establishment
# (client).  The collapsed authenticate/receive-params states are traversed
# inside these composites.


def _srv_channel_connected(spec, state, ctx, ev):
    return replace(state, phase=spec.phases.SESSION_LOOKUP), []


def _srv_negotiation(spec, state, ctx, ev):
    req = ev.request
    if req.channel_count != ctx.channel_count:
        raise IllegalTransition(
            spec.name, state.phase.value, ev, "channel count mismatch"
        )
    joined = state.joined + 1
    if joined > ctx.channel_count:
        raise IllegalTransition(spec.name, state.phase.value, ev, "session full")
    phase = (
        spec.phases.CHANNELS_READY
        if joined == ctx.channel_count
        else spec.phases.REGISTER_CHANNEL
    )
    return replace(state, joined=joined, phase=phase), []


def _cli_channel_connected(spec, state, ctx, ev):
    joined = state.joined + 1
    if joined > ctx.channel_count:
        raise IllegalTransition(spec.name, state.phase.value, ev, "all channels up")
    phase = (
        spec.phases.ALL_CHANNELS_UP
        if joined == ctx.channel_count
        else spec.phases.CONNECT
    )
    return replace(state, joined=joined, phase=phase), []


# --------------------------------------------------------------------------
# Sender data plane


def _snd_enter_dispatch(spec, state, ctx, ev):
    n = ctx.channel_count
    new = replace(
        state,
        phase=spec.phases.DISPATCH,
        lifecycles=(AckLifecycle.FIRST_TIME,) * n,
        in_flight=(None,) * n,
    )
    return new, [MoveToWriteList(i) for i in range(n)]


def _snd_write_ready(spec, state, ctx, ev):
    i = ev.channel
    lifecycle = state.lifecycles[i]
    if lifecycle is AckLifecycle.NOT_DONE:
        raise IllegalTransition(
            spec.name, state.phase.value, ev, "channel still awaits its ack"
        )
    block = ctx.peek_next_block()
    if block is None:
        # Nothing left to schedule: park the channel on the read list.
        return state, [MoveToReadList(i, lifecycle)]
    header = ChannelHeader(spec.data_kind, block)
    new = replace(
        state,
        lifecycles=_tuple_set(
            state.lifecycles, i, advance_lifecycle(lifecycle, AckLifecycle.NOT_DONE)
        ),
        in_flight=_tuple_set(state.in_flight, i, block),
        blocks_sent=state.blocks_sent + 1,
    )
    actions = [
        ReadBlockFromDisk(block),
        SendHeader(i, header),
        SendBlockPayload(i, block),
        MoveToReadList(i, AckLifecycle.NOT_DONE),
    ]
    return new, actions


def _snd_ack(spec, state, ctx, ev):
    i = ev.channel
    if ev.exception.status is ExceptionStatus.ERROR:
        return replace(state, phase=spec.phases.ERROR), [CloseSession()]
    if state.lifecycles[i] is not AckLifecycle.NOT_DONE:
        raise IllegalTransition(
            spec.name, state.phase.value, ev, "no block awaiting ack on this channel"
        )
    new = replace(
        state,
        lifecycles=_tuple_set(
            state.lifecycles, i, advance_lifecycle(state.lifecycles[i], AckLifecycle.DONE)
        ),
        in_flight=_tuple_set(state.in_flight, i, None),
        blocks_acked=state.blocks_acked + 1,
    )
    if state.phase is spec.phases.COLLECT_ACKS:
        if any(b is not None for b in new.in_flight):
            return new, []
        new = replace(new, phase=spec.phases.TERMINATE)
        return new, [BroadcastEof(ChannelEvent.EOFT), CloseSession()]
    actions = [MoveToWriteList(i)] if ctx.peek_next_block() is not None else []
    return new, actions


def _snd_eof(spec, state, ctx, ev):
    if any(b is not None for b in state.in_flight):
        return replace(state, phase=spec.phases.COLLECT_ACKS), []
    new = replace(state, phase=spec.phases.TERMINATE)
    return new, [BroadcastEof(ChannelEvent.EOFT), CloseSession()]


def _snd_park(spec, state, ctx, ev):
    i = ev.channel
    return state, [MoveToReadList(i, state.lifecycles[i])]


# --------------------------------------------------------------------------
# Receiver data plane


def _rcv_enter_dispatch(spec, state, ctx, ev):
    new = replace(state, phase=spec.phases.DISPATCH)
    return new, [
        MoveToReadList(i, AckLifecycle.FIRST_TIME) for i in range(ctx.channel_count)
    ]


def _rcv_header(spec, state, ctx, ev):
    i, header = ev.channel, ev.header
    kind = header.event
    phases = spec.phases
    if kind is ChannelEvent.EOFT:
        if state.pending_disk == 0:
            new = replace(state, eof_seen=True, phase=phases.TERMINATE)
            return new, [CloseSession()]
        return replace(state, eof_seen=True, phase=phases.CHECK_EOF), []
    if kind is spec.data_kind or kind is ChannelEvent.CONM:
        block = header.block
        if len(ev.payload) != block.length:
            raise IllegalTransition(
                spec.name, state.phase.value, ev, "payload length mismatch"
            )
        new = replace(
            state,
            pending_disk=state.pending_disk + 1,
            blocks_received=state.blocks_received + 1,
            idle=state.idle - {i},
        )
        actions = [
            WriteBlockToDisk(WriteRequest(block.offset, ev.payload)),
            SendException(i, OK_EXCEPTION),
        ]
        return new, actions
    if kind is ChannelEvent.NOOP:
        return state, []
    if kind is ChannelEvent.EOFR:
        # Channel done but reusable: keep it open awaiting a new event.
        return replace(state, idle=state.idle | {i}), []
    if kind is ChannelEvent.XPATHM:
        refusal = ExceptionHeader(
            ExceptionStatus.ERROR, REASON_MODE_UNIMPLEMENTED, "path mode not implemented"
        )
        return state, [SendException(i, refusal)]
    if kind is ChannelEvent.ZXDFS:
        refusal = ExceptionHeader(
            ExceptionStatus.ERROR,
            REASON_ZERO_COPY_UNSUPPORTED,
            "zero-copy channels not supported",
        )
        return state, [SendException(i, refusal)]
    raise IllegalTransition(
        spec.name, state.phase.value, ev, f"unexpected {kind.name} header"
    )


def _rcv_header_draining(spec, state, ctx, ev):
    if ev.header.event is ChannelEvent.EOFT:
        return state, []  # EOFT arriving on the remaining channels
    raise IllegalTransition(
        spec.name, state.phase.value, ev, "only EOFT is legal while draining"
    )


def _rcv_io_done(spec, state, ctx, ev):
    if state.pending_disk == 0:
        raise IllegalTransition(
            spec.name, state.phase.value, ev, "no disk write outstanding"
        )
    pending = state.pending_disk - 1
    if pending == 0 and state.eof_seen:
        new = replace(state, pending_disk=0, phase=spec.phases.TERMINATE)
        return new, [CloseSession()]
    return replace(state, pending_disk=pending), []


def _rcv_exception(spec, state, ctx, ev):
    if ev.exception.status is ExceptionStatus.ERROR:
        return replace(state, phase=spec.phases.ERROR), [CloseSession()]
    raise IllegalTransition(
        spec.name, state.phase.value, ev, "unexpected Ok exception at receiver"
    )


def _noop(spec, state, ctx, ev):
    return state, []


def _fail(spec, state, ctx, ev):
    return replace(state, phase=spec.phases.ERROR), [CloseSession()]


# --------------------------------------------------------------------------
# Table assembly


def _server_front(P) -> dict:
    return {
        (P.AUTHENTICATE, ChannelConnected): _rule(
            _srv_channel_connected, "open-channel", (), ("SessionLookup",)
        ),
        (P.SESSION_LOOKUP, NegotiationReceived): _rule(
            _srv_negotiation, "register-channel", (),
            ("RegisterChannel", "ChannelsReady"),
        ),
        (P.REGISTER_CHANNEL, ChannelConnected): _rule(
            _srv_channel_connected, "open-channel", (), ("SessionLookup",)
        ),
    }


def _client_front(P) -> dict:
    return {
        (P.CONNECT, ChannelConnected): _rule(
            _cli_channel_connected, "establish-channel", (),
            ("Connect", "AllChannelsUp"),
        ),
    }


def _sender_plane(P, setup_phase) -> dict:
    return {
        (setup_phase, DiskReady): _rule(
            _snd_enter_dispatch, "start-dispatch", (MoveToWriteList,), ("Dispatch",)
        ),
        (P.DISPATCH, WriteReady): _rule(
            _snd_write_ready,
            "send-block",
            (ReadBlockFromDisk, SendHeader, SendBlockPayload, MoveToReadList),
            ("Dispatch",),
        ),
        (P.DISPATCH, ExceptionReceived): _rule(
            _snd_ack, "collect-ack", (MoveToWriteList, CloseSession),
            ("Dispatch", "Error"),
        ),
        (P.DISPATCH, EndOfFile): _rule(
            _snd_eof, "end-of-file", (BroadcastEof, CloseSession),
            ("CollectAcks", "Terminate"),
        ),
        (P.DISPATCH, DiskReady): _rule(_noop, "noop", (), ("Dispatch",)),
        (P.COLLECT_ACKS, ExceptionReceived): _rule(
            _snd_ack, "collect-ack", (BroadcastEof, CloseSession),
            ("CollectAcks", "Terminate", "Error"),
        ),
        (P.COLLECT_ACKS, WriteReady): _rule(
            _snd_park, "park-channel", (MoveToReadList,), ("CollectAcks",)
        ),
        (P.COLLECT_ACKS, DiskReady): _rule(_noop, "noop", (), ("CollectAcks",)),
    }


def _receiver_plane(P, setup_phase) -> dict:
    return {
        (setup_phase, DiskReady): _rule(
            _rcv_enter_dispatch, "start-dispatch", (MoveToReadList,), ("Dispatch",)
        ),
        (P.DISPATCH, HeaderReceived): _rule(
            _rcv_header,
            "consume-header",
            (WriteBlockToDisk, SendException, CloseSession),
            ("Dispatch", "CheckEof", "Terminate"),
        ),
        (P.DISPATCH, BlockIoDone): _rule(
            _rcv_io_done, "disk-complete", (), ("Dispatch",)
        ),
        (P.DISPATCH, ExceptionReceived): _rule(
            _rcv_exception, "peer-error", (CloseSession,), ("Error",)
        ),
        (P.DISPATCH, DiskReady): _rule(_noop, "noop", (), ("Dispatch",)),
        (P.CHECK_EOF, HeaderReceived): _rule(
            _rcv_header_draining, "drain-eof", (), ("CheckEof",)
        ),
        (P.CHECK_EOF, BlockIoDone): _rule(
            _rcv_io_done, "disk-complete", (CloseSession,), ("CheckEof", "Terminate")
        ),
        (P.CHECK_EOF, DiskReady): _rule(_noop, "noop", (), ("CheckEof",)),
        # After EOFT the peer may close while our disk drains; that is orderly.
        (P.CHECK_EOF, PeerClosed): _rule(_noop, "peer-done", (), ("CheckEof",)),
    }


_FAIL_EVENTS = (PeerClosed, LocalError)


def _with_failure_rules(P, table: dict) -> dict:
    rest_phases = {P(name) for name in
                   {p.value for p, _ in table} | {g for r in table.values() for g in r.goes}
                   if name not in ("Terminate", "Error")}
    fail = _rule(_fail, "fail", (CloseSession,), ("Error",))
    for phase in rest_phases:
        for evt in _FAIL_EVENTS:
            table.setdefault((phase, evt), fail)
    return table


def _make_spec(name, phases, kind, data_kind, front, plane, setup, initial) -> MachineSpec:
    table = dict(front)
    table.update(plane(phases, setup))
    table = _with_failure_rules(phases, table)
    data_plane = (
        frozenset({"Dispatch", "CollectAcks"})
        if kind == "sender"
        else frozenset({"Dispatch", "CheckEof"})
    )
    return MachineSpec(
        name=name,
        phases=phases,
        initial=initial,
        kind=kind,
        data_kind=data_kind,
        table=table,
        data_plane=data_plane,
    )


SERVER_DOWNLOAD = _make_spec(
    "server-download",
    ServerDownloadState,
    "sender",
    ChannelEvent.XFTSM,
    _server_front(ServerDownloadState),
    _sender_plane,
    ServerDownloadState.CHANNELS_READY,
    ServerDownloadState.AUTHENTICATE,
)

CLIENT_DOWNLOAD = _make_spec(
    "client-download",
    ClientDownloadState,
    "receiver",
    ChannelEvent.XFTSM,
    _client_front(ClientDownloadState),
    _receiver_plane,
    ClientDownloadState.ALL_CHANNELS_UP,
    ClientDownloadState.CONNECT,
)

SERVER_UPLOAD = _make_spec(
    "server-upload",
    ServerUploadState,
    "receiver",
    ChannelEvent.XFTSMU,
    _server_front(ServerUploadState),
    _receiver_plane,
    ServerUploadState.CHANNELS_READY,
    ServerUploadState.AUTHENTICATE,
)

CLIENT_UPLOAD = _make_spec(
    "client-upload",
    ClientUploadState,
    "sender",
    ChannelEvent.XFTSMU,
    _client_front(ClientUploadState),
    _sender_plane,
    ClientUploadState.ALL_CHANNELS_UP,
    ClientUploadState.CONNECT,
)

MACHINES = {
    spec.name: spec
    for spec in (SERVER_DOWNLOAD, CLIENT_DOWNLOAD, SERVER_UPLOAD, CLIENT_UPLOAD)
}

_ABSORBING = ("Terminate", "Error")


def _step(
    spec: MachineSpec, state: MachineState, ctx, ev: FsmEvent
) -> tuple[MachineState, list[FsmAction]]:
    phase = state.phase
    if phase.value in _ABSORBING:
        raise IllegalTransition(spec.name, phase.value, ev, "absorbing state")
    rule = spec.table.get((phase, type(ev)))
    if rule is None:
        raise IllegalTransition(spec.name, phase.value, ev)
    return rule.handler(spec, state, ctx, ev)


def step_server_download(state, ctx, ev):
    """Advance the block-sending server machine for a download session."""
    return _step(SERVER_DOWNLOAD, state, ctx, ev)


def step_client_download(state, ctx, ev):
    """Advance the block-receiving client machine for a download session."""
    return _step(CLIENT_DOWNLOAD, state, ctx, ev)


def step_server_upload(state, ctx, ev):
    """Advance the block-receiving server machine for an upload session."""
    return _step(SERVER_UPLOAD, state, ctx, ev)


def step_client_upload(state, ctx, ev):
    """Advance the block-sending client machine for an upload session."""
    return _step(CLIENT_UPLOAD, state, ctx, ev)


class Machine:
    """Stateful wrapper pairing a spec with its current state and trace."""

    def __init__(self, spec: MachineSpec, record_trace: bool = True):
        self.spec = spec
        self.state = spec.initial_state()
        self.trace = FsmTrace(spec.name) if record_trace else None

    def feed(self, ctx, ev: FsmEvent) -> list[FsmAction]:
        before = self.state.phase.value
        new_state, actions = _step(self.spec, self.state, ctx, ev)
        if self.trace is not None:
            self.trace.append(
                TraceStep(
                    before,
                    redact_event(ev),
                    tuple(redact_action(a) for a in actions),
                    new_state.phase.value,
                )
            )
        self.state = new_state
        return actions

    @property
    def phase(self) -> Enum:
        return self.state.phase

    @property
    def terminal(self) -> bool:
        return self.state.phase.value in _ABSORBING

    @property
    def completed(self) -> bool:
        return self.state.phase.value == "Terminate"


def server_download_machine(record_trace: bool = True) -> Machine:
    return Machine(SERVER_DOWNLOAD, record_trace)


def client_download_machine(record_trace: bool = True) -> Machine:
    return Machine(CLIENT_DOWNLOAD, record_trace)


def server_upload_machine(record_trace: bool = True) -> Machine:
    return Machine(SERVER_UPLOAD, record_trace)


def client_upload_machine(record_trace: bool = True) -> Machine:
    return Machine(CLIENT_UPLOAD, record_trace)


def replay(
    spec: MachineSpec,
    events: list[FsmEvent],
    channel_count: int,
    file_size: int,
    block_size: int,
) -> FsmTrace:
    """Re-drive a fresh machine through a recorded event list.

    Block scheduling is reproduced by advancing a cursor on every
    SendBlockPayload, exactly as the session loop does.
    """
    from ..piod import BlockScheduler, SessionContext

    scheduler = BlockScheduler(file_size, block_size)
    ctx = SessionContext(channel_count, file_size, block_size, scheduler)
    machine = Machine(spec)
    for ev in events:
        actions = machine.feed(ctx, ev)
        for action in actions:
            if isinstance(action, SendBlockPayload):
                issued = scheduler.next_block()
                if issued != action.block:
                    raise InvariantViolation(
                        f"replay scheduler issued {issued}, trace says {action.block}"
                    )
    return machine.trace
