"""Parallel I/O Dispatcher: the per-session readiness loop.

One loop per session multiplexes that session's n channels on a single
thread: poll readiness, translate bytes into machine events, step the
machine, execute the actions it emits.  The read- and write-readiness
lists decide what gets polled; the machine alone moves channels between
them.  Disk traffic goes through the storage engine, whose back-pressure
shows up here as "not disk-ready" rather than as a blocked thread.

Partial sends resume across iterations, so the loop never blocks on a
slow peer; a watchdog errors the session out after idle_timeout without
progress.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import transport
from .errors import InvariantViolation
from .fsm import (
    AckLifecycle,
    BlockIoDone,
    BroadcastEof,
    ChannelConnected,
    CloseChannel,
    CloseSession,
    DiskReady,
    EndOfFile,
    ExceptionReceived,
    HeaderReceived,
    IllegalTransition,
    LocalError,
    Machine,
    MoveToReadList,
    MoveToWriteList,
    NegotiationReceived,
    PeerClosed,
    ReadBlockFromDisk,
    SendBlockPayload,
    SendException,
    SendHeader,
    WriteBlockToDisk,
    WriteReady,
    format_event,
)
from .storage import BufferClosed, StorageError
from .wire import (
    BLOCK_EVENTS,
    CHANNEL_HEADER_SIZE,
    BlockDescriptor,
    ChannelHeader,
    MalformedHeader,
    NegotiationRequest,
    decode_channel_header,
    encode_channel_header,
    encode_exception,
    try_parse_exception,
)


def expected_threads_mt(session_channels: list[int]) -> int:
    """Thread count of a one-thread-per-channel server: sum of (n_i + 1)."""
    if any(n < 0 for n in session_channels):
        raise InvariantViolation("channel counts must be nonnegative")
    return sum(n + 1 for n in session_channels)


def expected_threads_mtedp(m: int) -> int:
    """Thread count of the event-multiplexed server: one per session."""
    if m < 0:
        raise InvariantViolation("session count must be nonnegative")
    return m


def expected_threads_hybrid(m: int, session_local_threads: list[int]) -> int:
    """Whole-server census: 3 base threads + m sessions + per-session extras."""
    if m < 0 or any(s < 0 for s in session_local_threads):
        raise InvariantViolation("thread counts must be nonnegative")
    return 3 + m + sum(s + 1 for s in session_local_threads)


class BlockScheduler:
    """Issues block descriptors in ascending offset order, on demand."""

    def __init__(self, file_size: int, block_size: int):
        if file_size < 0:
            raise InvariantViolation("file size must be >= 0")
        if block_size < 1:
            raise InvariantViolation("block size must be >= 1")
        self.file_size = file_size
        self.block_size = block_size
        self.next_offset = 0
        self.issued = 0
        self.completed = 0
        self.in_flight: dict[int, BlockDescriptor] = {}

    def peek(self) -> BlockDescriptor | None:
        if self.next_offset >= self.file_size:
            return None
        length = min(self.block_size, self.file_size - self.next_offset)
        return BlockDescriptor(self.next_offset, length)

    def next_block(self) -> BlockDescriptor | None:
        block = self.peek()
        if block is not None:
            self.next_offset = block.end
            self.issued += 1
        return block

    @property
    def exhausted(self) -> bool:
        return self.next_offset >= self.file_size

    def mark_in_flight(self, channel: int, block: BlockDescriptor) -> None:
        self.in_flight[channel] = block

    def complete(self, channel: int) -> None:
        if self.in_flight.pop(channel, None) is not None:
            self.completed += 1


@dataclass
class SessionContext:
    """Read-only view the machine steps against."""

    channel_count: int
    file_size: int
    block_size: int
    scheduler: BlockScheduler | None = None

    def peek_next_block(self) -> BlockDescriptor | None:
        return self.scheduler.peek() if self.scheduler is not None else None


class DispatchLists:
    """Read- and write-readiness lists; a channel sits in at most one."""

    def __init__(self):
        self.read: dict[int, AckLifecycle] = {}
        self.write: set[int] = set()

    def move_to_read(self, channel: int, lifecycle: AckLifecycle) -> None:
        self.write.discard(channel)
        self.read[channel] = lifecycle

    def move_to_write(self, channel: int) -> None:
        self.read.pop(channel, None)
        self.write.add(channel)

    def discard(self, channel: int) -> None:
        self.read.pop(channel, None)
        self.write.discard(channel)

    def assert_disjoint(self) -> None:
        overlap = self.read.keys() & self.write
        if overlap:
            raise InvariantViolation(f"channels {sorted(overlap)} in both lists")

    def __repr__(self) -> str:
        return f"DispatchLists(read={sorted(self.read)}, write={sorted(self.write)})"


class BufferPool:
    """Recycles payload buffers between blocks; single-threaded use."""

    def __init__(self, max_per_size: int = 128):
        self.max_per_size = max_per_size
        self._free: dict[int, list[bytearray]] = {}

    def take(self, length: int) -> bytearray:
        stack = self._free.get(length)
        if stack:
            return stack.pop()
        return bytearray(length)

    def give(self, buf) -> None:
        if type(buf) is not bytearray or not buf:
            return
        stack = self._free.setdefault(len(buf), [])
        if len(stack) < self.max_per_size:
            stack.append(buf)


class ChannelDecoder:
    """Reassembles wire frames from an arbitrarily fragmented byte stream.

    Block payloads fill a preallocated per-block buffer so the hot path
    (payload_needed/payload_slot/payload_filled with recv_into) costs one
    kernel-to-user copy and nothing else.
    """

    def __init__(self, role: str, max_payload: int = 1 << 30, pool: BufferPool | None = None):
        self.role = role  # "receiver" decodes headers+payloads, "sender" acks
        self.max_payload = max_payload
        self.pool = pool or BufferPool()
        self.buf = bytearray()
        self._pending: ChannelHeader | None = None
        self._payload: bytearray | None = None
        self._have = 0

    def payload_needed(self) -> int:
        """Payload bytes fillable in place right now (0 = parse from buf)."""
        if self._pending is None or self.buf:
            return 0
        return self._pending.block.length - self._have

    def payload_slot(self, max_bytes: int) -> memoryview:
        return memoryview(self._payload)[self._have:self._have + max_bytes]

    def payload_filled(self, n: int) -> list:
        self._have += n
        if self._have < self._pending.block.length:
            return []
        item = (self._pending, self._payload)
        self._pending = None
        self._payload = None
        self._have = 0
        return [item]

    def _start_block(self, header: ChannelHeader) -> None:
        if header.block.length > self.max_payload:
            raise MalformedHeader(
                f"block length {header.block.length} exceeds the negotiated "
                f"maximum {self.max_payload}"
            )
        self._pending = header
        self._payload = self.pool.take(header.block.length)
        self._have = 0

    def feed(self, data: bytes) -> list:
        """Returns decoded items: ExceptionHeaders or (header, payload) pairs."""
        self.buf.extend(data)
        out = []
        while True:
            if self.role == "sender":
                parsed = try_parse_exception(bytes(self.buf))
                if parsed is None:
                    break
                exc, consumed = parsed
                del self.buf[:consumed]
                out.append(exc)
                continue
            if self._pending is not None:
                need = self._pending.block.length - self._have
                take = min(need, len(self.buf))
                if take:
                    self._payload[self._have:self._have + take] = self.buf[:take]
                    del self.buf[:take]
                out.extend(self.payload_filled(take))
                if self._pending is not None:
                    break  # payload still short and buf drained
                continue
            if len(self.buf) < CHANNEL_HEADER_SIZE:
                break
            frame = bytes(self.buf[:CHANNEL_HEADER_SIZE])
            del self.buf[:CHANNEL_HEADER_SIZE]
            header = decode_channel_header(frame)
            if header.event in BLOCK_EVENTS:
                self._start_block(header)
                continue
            out.append((header, b""))
        return out


@dataclass
class ChannelCounters:
    bytes_sent: int = 0
    bytes_received: int = 0
    blocks_sent: int = 0
    blocks_received: int = 0
    acks_sent: int = 0
    acks_received: int = 0


@dataclass
class TransferCounters:
    per_channel: list[ChannelCounters]
    loop_iterations: int = 0
    payload_bytes: int = 0
    repositionings: int = 0
    wall_time: float = 0.0

    @classmethod
    def create(cls, n: int) -> "TransferCounters":
        return cls(per_channel=[ChannelCounters() for _ in range(n)])

    @property
    def bytes_sent(self) -> int:
        return sum(c.bytes_sent for c in self.per_channel)

    @property
    def bytes_received(self) -> int:
        return sum(c.bytes_received for c in self.per_channel)

    @property
    def blocks_sent(self) -> int:
        return sum(c.blocks_sent for c in self.per_channel)

    @property
    def blocks_received(self) -> int:
        return sum(c.blocks_received for c in self.per_channel)


@dataclass
class LoopConfig:
    idle_timeout: float = 60.0
    poll_tick: float = 0.02
    max_recv: int = 8 << 20      # per-recv ceiling; payload reads never overshoot
    max_block: int = 1 << 30     # negotiated block size bounds payload claims
    cancel: threading.Event | None = None
    clock: object = time.monotonic


def server_registration_prologue(
    machine: Machine, ctx: SessionContext, requests: list[NegotiationRequest]
) -> None:
    """Replay channel registration (in arrival order) through the machine."""
    for req in requests:
        machine.feed(ctx, ChannelConnected(req.channel_index))
        machine.feed(ctx, NegotiationReceived(req))


def client_connection_prologue(machine: Machine, ctx: SessionContext) -> None:
    for i in range(ctx.channel_count):
        machine.feed(ctx, ChannelConnected(i))


class SessionLoop:
    """Drives one machine over its n channels until a terminal state."""

    def __init__(self, streams, machine: Machine, scheduler, engine, cfg=None):
        self.cfg = cfg or LoopConfig()
        self.streams = list(streams)
        self.machine = machine
        self.scheduler = scheduler
        self.engine = engine
        self.is_sender = machine.spec.kind == "sender"
        n = len(self.streams)
        if n < 1:
            raise InvariantViolation("session needs at least one channel")
        self.ctx = SessionContext(
            channel_count=n,
            file_size=scheduler.file_size if scheduler else 0,
            block_size=scheduler.block_size if scheduler else 0,
            scheduler=scheduler,
        )
        self.lists = DispatchLists()
        role = "sender" if self.is_sender else "receiver"
        self._pool = BufferPool()
        self._pending_buffers: dict[int, bytearray] = {}
        self.decoders = [
            ChannelDecoder(role, self.cfg.max_block, self._pool) for _ in range(n)
        ]
        self.outbound: list[deque] = [deque() for _ in range(n)]
        self.open = [True] * n
        self._saw_eof = [False] * n
        self.counters = TransferCounters.create(n)
        self.error: str | None = None
        self._staged: dict[int, bytes | None] = {}
        self._held: list[deque] = [deque() for _ in range(n)]
        self._internal: deque = deque()
        self._gate_blocked = False
        self._eof_fed = False
        self._closing = False
        self._finished = False
        self._started = False
        self._last_progress = self.cfg.clock()

    # -- event feeding -----------------------------------------------------

    def _note_error(self, description: str) -> None:
        if self.error is None:
            self.error = description

    def _feed(self, ev) -> None:
        if self.machine.terminal or self._finished:
            return
        try:
            actions = self.machine.feed(self.ctx, ev)
        except IllegalTransition as exc:
            if isinstance(ev, LocalError):
                raise
            self._note_error(str(exc))
            self._feed(LocalError(str(exc)))
            return
        if self.machine.phase.value == "Error":
            self._note_error(format_event(ev))
        self._execute(actions)

    def _execute(self, actions) -> None:
        n = len(self.streams)
        for action in actions:
            if isinstance(action, ReadBlockFromDisk):
                block = action.block
                try:
                    data = self.engine.read(block)
                except OSError as exc:
                    data = b""
                    self._internal.append(LocalError(f"disk read failed: {exc}"))
                if len(data) != block.length:
                    self._staged[block.offset] = None
                    self._internal.append(
                        LocalError(f"short disk read at offset {block.offset}")
                    )
                else:
                    self._staged[block.offset] = data
            elif isinstance(action, SendHeader):
                self._enqueue(action.channel, encode_channel_header(action.header))
            elif isinstance(action, SendBlockPayload):
                issued = self.scheduler.next_block()
                if issued != action.block:
                    raise InvariantViolation(
                        f"scheduler issued {issued}, machine sent {action.block}"
                    )
                self.scheduler.mark_in_flight(action.channel, action.block)
                data = self._staged.pop(action.block.offset, None)
                if data is not None:
                    self._enqueue(action.channel, data)
                    cc = self.counters.per_channel[action.channel]
                    cc.blocks_sent += 1
                    self.counters.payload_bytes += len(data)
            elif isinstance(action, SendException):
                self._enqueue(action.channel, encode_exception(action.exception))
                self.counters.per_channel[action.channel].acks_sent += 1
            elif isinstance(action, WriteBlockToDisk):
                request = action.request
                try:
                    token = self.engine.write(request)
                    self.counters.payload_bytes += len(request.data)
                    if token.done():
                        self._pool.give(request.data)
                    else:
                        self._pending_buffers[request.offset] = request.data
                except (StorageError, BufferClosed, OSError) as exc:
                    self._internal.append(LocalError(f"disk write failed: {exc}"))
            elif isinstance(action, MoveToReadList):
                self.lists.move_to_read(action.channel, action.lifecycle)
            elif isinstance(action, MoveToWriteList):
                self.lists.move_to_write(action.channel)
            elif isinstance(action, BroadcastEof):
                frame = encode_channel_header(ChannelHeader(action.kind))
                for i in range(n):
                    if self.open[i]:
                        self._enqueue(i, frame)
            elif isinstance(action, CloseChannel):
                self._close_channel(action.channel)
            elif isinstance(action, CloseSession):
                self._closing = True
            else:
                raise InvariantViolation(f"unknown action {action!r}")
        self.lists.assert_disjoint()

    def _enqueue(self, channel: int, data: bytes) -> None:
        if self.open[channel]:
            self.outbound[channel].append(memoryview(data))

    def _close_channel(self, channel: int) -> None:
        if self.open[channel]:
            self.open[channel] = False
            self.lists.discard(channel)
            self.streams[channel].close()

    def _peer_closed(self, channel: int) -> None:
        if self._saw_eof[channel]:
            return
        self._saw_eof[channel] = True
        if self.open[channel] and not self.machine.terminal:
            self._feed(PeerClosed(channel))

    # -- socket pumps ------------------------------------------------------

    def _pump_read(self, i: int) -> bool:
        stream = self.streams[i]
        decoder = self.decoders[i]
        progressed = False
        for _ in range(64):
            if self.machine.terminal or self._closing or self._held[i]:
                break
            needed = decoder.payload_needed() if not self.is_sender else 0
            try:
                if needed:
                    slot = decoder.payload_slot(min(needed, self.cfg.max_recv))
                    n = stream.recv_into(slot)
                    if n is None:
                        break
                    if n == 0:
                        self._peer_closed(i)
                        return True
                    got = n
                    items = decoder.payload_filled(n)
                else:
                    data = stream.recv(65536)
                    if data is None:
                        break
                    if data == b"":
                        self._peer_closed(i)
                        return True
                    got = len(data)
                    items = decoder.feed(data)
            except OSError:
                self._peer_closed(i)
                return True
            except MalformedHeader as exc:
                self._feed(LocalError(f"channel {i}: {exc}"))
                return True
            progressed = True
            self.counters.per_channel[i].bytes_received += got
            for item in items:
                self._dispatch_item(i, item)
        # opportunistic write pump: acks go straight out and a sender whose
        # channel just re-armed sends without waiting for the next poll
        if (
            self.open[i]
            and not self.machine.terminal
            and not self._closing
            and (self.outbound[i] or (self.is_sender and i in self.lists.write))
        ):
            progressed |= self._pump_write(i)
        return progressed

    def _dispatch_item(self, i: int, item) -> None:
        if self.is_sender:
            self.counters.per_channel[i].acks_received += 1
            self.scheduler.complete(i)
            self._feed(ExceptionReceived(i, item))
            return
        header, payload = item
        ev = HeaderReceived(i, header, payload)
        if header.block is not None:
            self.counters.per_channel[i].blocks_received += 1
            if not self.engine.can_accept():
                # Full ring: hold the event, stop consuming this channel.
                self._held[i].append(ev)
                self._gate_blocked = True
                return
        if self._held[i]:
            self._held[i].append(ev)
            return
        self._feed(ev)

    def _pump_write(self, i: int) -> bool:
        progressed = False
        stream = self.streams[i]
        q = self.outbound[i]
        for _ in range(8):
            while q:
                # header + payload (and batched acks) leave in one
                # gathering send where buffer space allows
                gathered = list(q)[:64]
                try:
                    sent = stream.send_many(gathered)
                except OSError:
                    self._peer_closed(i)
                    return True
                if sent == 0:
                    return progressed
                progressed = True
                self.counters.per_channel[i].bytes_sent += sent
                while sent and q:
                    head = q[0]
                    if sent >= len(head):
                        sent -= len(head)
                        q.popleft()
                    else:
                        q[0] = head[sent:]
                        sent = 0
                if q:
                    return progressed  # partial send: resume next readiness
            if (
                self.is_sender
                and i in self.lists.write
                and not self.machine.terminal
                and not self._closing
                and self.machine.phase.value in ("Dispatch", "CollectAcks")
            ):
                self._feed(WriteReady(i))
                progressed = True
                if not q:
                    break
            else:
                break
        return progressed

    # -- engine bridging ---------------------------------------------------

    def _drain_engine(self) -> bool:
        progressed = False
        for offset, length, error in self.engine.pop_completed():
            progressed = True
            buf = self._pending_buffers.pop(offset, None)
            if buf is not None:
                self._pool.give(buf)
            if error is not None:
                self._feed(LocalError(f"disk write failed: {error}"))
            else:
                self._feed(BlockIoDone(BlockDescriptor(offset, length)))
        return progressed

    def _release_held(self) -> bool:
        progressed = False
        for i in range(len(self.streams)):
            held = self._held[i]
            while held and self.engine.can_accept() and not self.machine.terminal:
                self._feed(held.popleft())
                progressed = True
        if (
            self._gate_blocked
            and self.engine.can_accept()
            and not any(self._held)
            and not self.machine.terminal
        ):
            self._gate_blocked = False
            self._feed(DiskReady())
        return progressed

    def _check_eof(self) -> bool:
        if (
            self.is_sender
            and not self._eof_fed
            and self.scheduler.exhausted
            and self.machine.phase.value == "Dispatch"
        ):
            self._eof_fed = True
            self._feed(EndOfFile())
            return True
        return False

    # -- main loop ---------------------------------------------------------

    def start(self) -> None:
        """Feed the dispatch-start kick; machine must be post-registration."""
        if not self._started:
            self._started = True
            if not self.machine.terminal:
                self._feed(DiskReady())

    def run_once(self, timeout: float | None = None) -> bool:
        if self._finished:
            return False
        if not self._started:
            self.start()
        cfg = self.cfg
        if timeout is None:
            timeout = cfg.poll_tick
        progressed = False
        while self._internal and not self.machine.terminal:
            self._feed(self._internal.popleft())
            progressed = True
        progressed |= self._drain_engine()
        progressed |= self._release_held()
        progressed |= self._check_eof()
        if (
            cfg.cancel is not None
            and cfg.cancel.is_set()
            and not self.machine.terminal
        ):
            self._feed(LocalError("session cancelled"))
        if self.machine.terminal or self._closing:
            self._finish()
            return True
        entries = []
        for i, stream in enumerate(self.streams):
            if not self.open[i]:
                continue
            mask = 0
            if i in self.lists.read and not self._held[i] and not self._saw_eof[i]:
                mask |= transport.READ
            if self.outbound[i]:
                mask |= transport.WRITE
            elif (
                self.is_sender
                and i in self.lists.write
                and self.machine.phase.value in ("Dispatch", "CollectAcks")
            ):
                mask |= transport.WRITE
            if mask:
                entries.append((stream, mask, i))
        if entries:
            polled = transport.poll_readiness([(s, m) for s, m, _ in entries], timeout)
            index_of = {id(s): i for s, _, i in entries}
            for i, mask in sorted((index_of[id(s)], m) for s, m in polled):
                if self.machine.terminal or self._closing:
                    break
                if mask & transport.READ:
                    progressed |= self._pump_read(i)
                if mask & transport.WRITE and self.open[i]:
                    progressed |= self._pump_write(i)
        elif timeout:
            time.sleep(min(timeout, cfg.poll_tick))
        self.counters.loop_iterations += 1
        now = cfg.clock()
        if progressed:
            self._last_progress = now
        elif now - self._last_progress > cfg.idle_timeout:
            self._feed(LocalError("idle timeout"))
        if self.machine.terminal or self._closing:
            self._finish()
        return progressed

    def _finish(self) -> None:
        if self._finished:
            return
        n = len(self.streams)
        if self.machine.completed:
            # Drain pending sends (the EOFT broadcast in particular) before
            # closing; peers of an errored session see the close instead.
            deadline = self.cfg.clock() + min(5.0, self.cfg.idle_timeout)
            while self.cfg.clock() < deadline:
                pending = [
                    (self.streams[i], transport.WRITE, i)
                    for i in range(n)
                    if self.open[i] and self.outbound[i]
                ]
                if not pending:
                    break
                ready = transport.poll_readiness(
                    [(s, m) for s, m, _ in pending], 0.05
                )
                index_of = {id(s): i for s, _, i in pending}
                for stream, _mask in ready:
                    self._flush_only(index_of[id(stream)])
        try:
            self.engine.flush()
        except Exception as exc:  # errors at flush surface in the report
            self._note_error(f"flush failed: {exc}")
        for i in range(n):
            self._close_channel(i)
        self._finished = True

    def _flush_only(self, i: int) -> None:
        q = self.outbound[i]
        stream = self.streams[i]
        while q:
            buf = q[0]
            try:
                sent = stream.send(buf)
            except OSError:
                self.open[i] = False
                self.streams[i].close()
                return
            if sent == 0:
                return
            self.counters.per_channel[i].bytes_sent += sent
            if sent == len(buf):
                q.popleft()
            else:
                q[0] = buf[sent:]
                return

    @property
    def finished(self) -> bool:
        return self._finished

    def run(self):
        started = time.perf_counter()
        self.start()
        while not self._finished:
            self.run_once()
        self.counters.wall_time = time.perf_counter() - started
        stats = getattr(self.engine, "stats", None)
        if stats is not None:
            self.counters.repositionings = stats.repositionings
        return self.machine.trace, self.counters


def run_session(streams, machine, scheduler, engine, cfg: LoopConfig | None = None):
    """Run one session to a terminal state; returns (trace, counters)."""
    return SessionLoop(streams, machine, scheduler, engine, cfg).run()
