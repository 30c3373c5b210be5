"""Positional file streams and the disk engines behind every transfer.

A FileStream does strictly positional I/O (pread/pwrite on a raw fd), so
one stream may serve interleaved block offsets without seek bookkeeping.
The synchronous engine writes inline; the asynchronous engine hands
WriteRequests to a dedicated disk thread through a bounded ring buffer
and coalesces adjacent offsets into single vectored writes.

Zero/null pseudo-streams and an in-memory BufferStream speak the same
read_at/write_at protocol for memory-to-memory benches and tests.

OS errors keep their builtin types: FileNotFoundError, PermissionError
and plain OSError are the NotFound / PermissionDenied / IoFailure of
this module's contract.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import Future
from dataclasses import dataclass, field
from enum import Enum

from .errors import InvariantViolation, XdfsError
from .wire import BlockDescriptor

DEFAULT_RING_SLOTS = 64


class StorageError(XdfsError):
    pass


class BufferClosed(StorageError):
    """Write handed to an engine that has already shut down."""


class Mode(Enum):
    READ = "read"
    WRITE_CREATE = "write-create"


class DiskEngineMode(Enum):
    SYNC = "sync"
    ASYNC = "async"


@dataclass(frozen=True)
class WriteRequest:
    """One positional write: data landing at [offset, offset+len(data))."""

    offset: int
    data: bytes | bytearray

    def __post_init__(self):
        if not self.data:
            raise InvariantViolation("write request data must be non-empty")
        if self.offset < 0:
            raise InvariantViolation("write request offset must be >= 0")

    @property
    def end(self) -> int:
        return self.offset + len(self.data)

    def __str__(self) -> str:
        return f"WriteRequest(offset={self.offset},len={len(self.data)})"


class FileStream:
    """Positional stream over one local file; single-owner, transferable."""

    def __init__(self, path: str, mode: Mode):
        self.path = path
        self.mode = mode
        if mode is Mode.READ:
            self._fd = os.open(path, os.O_RDONLY)
            self._size = os.fstat(self._fd).st_size
        else:
            self._fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            self._size = 0
        self._closed = False

    @property
    def size(self) -> int:
        return self._size

    def read_at(self, offset: int, length: int) -> bytes:
        return os.pread(self._fd, length, offset)

    def write_at(self, offset: int, data: bytes) -> None:
        if self.mode is not Mode.WRITE_CREATE:
            raise StorageError("stream opened read-only")
        os.pwrite(self._fd, data, offset)
        self._size = max(self._size, offset + len(data))

    def writev_at(self, offset: int, buffers: list[bytes]) -> None:
        if self.mode is not Mode.WRITE_CREATE:
            raise StorageError("stream opened read-only")
        os.pwritev(self._fd, buffers, offset)
        self._size = max(self._size, offset + sum(len(b) for b in buffers))

    def truncate(self, size: int) -> None:
        os.ftruncate(self._fd, size)
        self._size = size

    def flush(self) -> None:
        pass  # positional writes land in the page cache immediately

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            os.close(self._fd)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_stream(path: str, mode: Mode) -> FileStream:
    """Open a positional stream; READ requires the file to exist."""
    return FileStream(path, mode)


def read_block(fs, descriptor: BlockDescriptor) -> bytes:
    """Read one block, clamped at end of file (short final block is legal)."""
    if descriptor.offset >= fs.size:
        return b""
    length = min(descriptor.length, fs.size - descriptor.offset)
    return fs.read_at(descriptor.offset, length)


class ZeroStream:
    """Reads yield zero bytes up to a fixed total; the /dev/zero analog."""

    def __init__(self, total: int):
        if total < 0:
            raise InvariantViolation("zero stream size must be >= 0")
        self.path = f"zero:{total}"
        self.mode = Mode.READ
        self._size = total
        self._cached = b""

    @property
    def size(self) -> int:
        return self._size

    def read_at(self, offset: int, length: int) -> bytes:
        if offset >= self._size:
            return b""
        want = min(length, self._size - offset)
        if len(self._cached) != want:
            self._cached = bytes(want)
        return self._cached

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass


class NullStream:
    """Accepts and discards all writes, counting bytes; /dev/null analog."""

    def __init__(self):
        self.path = "null:"
        self.mode = Mode.WRITE_CREATE
        self.bytes_accepted = 0
        self._size = 0

    @property
    def size(self) -> int:
        return self._size

    def read_at(self, offset: int, length: int) -> bytes:
        return b""

    def write_at(self, offset: int, data: bytes) -> None:
        self.bytes_accepted += len(data)
        self._size = max(self._size, offset + len(data))

    def writev_at(self, offset: int, buffers: list[bytes]) -> None:
        for buf in buffers:
            self.write_at(offset, buf)
            offset += len(buf)

    def truncate(self, size: int) -> None:
        self._size = size

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass


def zero_stream(total: int) -> ZeroStream:
    return ZeroStream(total)


def null_stream() -> NullStream:
    return NullStream()


class BufferStream:
    """In-memory FileStream lookalike for tests and the sim harness."""

    def __init__(self, initial: bytes = b"", mode: Mode = Mode.WRITE_CREATE):
        self.path = "<memory>"
        self.mode = mode
        self._buf = bytearray(initial)

    @property
    def size(self) -> int:
        return len(self._buf)

    def read_at(self, offset: int, length: int) -> bytes:
        return bytes(self._buf[offset:offset + length])

    def write_at(self, offset: int, data: bytes) -> None:
        end = offset + len(data)
        if end > len(self._buf):
            self._buf.extend(bytes(end - len(self._buf)))
        self._buf[offset:end] = data

    def writev_at(self, offset: int, buffers: list[bytes]) -> None:
        for buf in buffers:
            self.write_at(offset, buf)
            offset += len(buf)

    def truncate(self, size: int) -> None:
        if size < len(self._buf):
            del self._buf[size:]
        else:
            self._buf.extend(bytes(size - len(self._buf)))

    def getvalue(self) -> bytes:
        return bytes(self._buf)

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass


class RingBuffer:
    """Bounded FIFO of WriteRequests; single producer, single consumer."""

    def __init__(self, capacity: int = DEFAULT_RING_SLOTS):
        if capacity < 1:
            raise InvariantViolation("ring buffer capacity must be >= 1")
        self.capacity = capacity
        self._items: list[WriteRequest] = []
        self._cond = threading.Condition()
        self._closed = False

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)

    @property
    def closed(self) -> bool:
        return self._closed

    def try_put(self, request: WriteRequest) -> bool:
        with self._cond:
            if self._closed:
                raise BufferClosed("ring buffer is closed")
            if len(self._items) >= self.capacity:
                return False
            self._items.append(request)
            self._cond.notify_all()
            return True

    def put(self, request: WriteRequest, timeout: float | None = None) -> None:
        """Blocking put: the producer absorbs back-pressure when full."""
        with self._cond:
            if not self._cond.wait_for(
                lambda: self._closed or len(self._items) < self.capacity, timeout
            ):
                raise StorageError("ring buffer put timed out")
            if self._closed:
                raise BufferClosed("ring buffer is closed")
            self._items.append(request)
            self._cond.notify_all()

    def take_batch(
        self, max_items: int | None = None, timeout: float | None = None
    ) -> list[WriteRequest]:
        """Drain up to max_items in FIFO order; [] once closed and empty."""
        with self._cond:
            self._cond.wait_for(lambda: self._items or self._closed, timeout)
            n = len(self._items) if max_items is None else min(max_items, len(self._items))
            batch = self._items[:n]
            del self._items[:n]
            if batch:
                self._cond.notify_all()
            return batch

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


@dataclass
class CoalesceStats:
    """Counters exposed by the coalescing writer."""

    batches: int = 0
    requests: int = 0
    repositionings: int = 0
    batch_log: list[tuple[tuple[tuple[int, int], ...], int]] | None = None


def _coalesced_write(fs, batch: list[WriteRequest]) -> int:
    """Write one drained batch, merging adjacent offsets; returns run count.

    Requests within a batch never overlap in this protocol (blocks are
    disjoint); overlapping requests would land in offset order.
    """
    if not batch:
        return 0
    ordered = sorted(batch, key=lambda w: w.offset)
    runs = 0
    start = ordered[0].offset
    buffers = [ordered[0].data]
    end = ordered[0].end
    for req in ordered[1:]:
        if req.offset == end:
            buffers.append(req.data)
            end = req.end
        else:
            fs.writev_at(start, buffers)
            runs += 1
            start, end, buffers = req.offset, req.end, [req.data]
    fs.writev_at(start, buffers)
    return runs + 1


def flush_coalesced(
    ring: RingBuffer,
    fs,
    stats: CoalesceStats | None = None,
    max_batch: int | None = None,
) -> int:
    """Drain one batch from the ring onto the stream; returns requests written.

    Adjacent-by-offset requests in the batch merge into single vectored
    writes, so repositionings equal the number of maximal contiguous runs.
    Intended to be called from the disk thread only.
    """
    batch = ring.take_batch(max_batch, timeout=0)
    if not batch:
        return 0
    runs = _coalesced_write(fs, batch)
    if stats is not None:
        stats.batches += 1
        stats.requests += len(batch)
        stats.repositionings += runs
        if stats.batch_log is not None:
            stats.batch_log.append(
                (tuple((w.offset, len(w.data)) for w in batch), runs)
            )
    return len(batch)


class SyncDiskEngine:
    """Blocking engine: bytes are durable in the file image on return."""

    mode = DiskEngineMode.SYNC
    extra_thread_count = 0

    def __init__(self, fs):
        self.fs = fs
        self.stats = CoalesceStats()
        self._completed: list[tuple[int, int, Exception | None]] = []
        self._last_end: int | None = None
        self._closed = False

    def can_accept(self) -> bool:
        return not self._closed

    def write(self, request: WriteRequest) -> Future:
        if self._closed:
            raise BufferClosed("engine is closed")
        fut: Future = Future()
        try:
            self.fs.write_at(request.offset, request.data)
        except OSError as exc:
            fut.set_exception(exc)
            self._completed.append((request.offset, len(request.data), exc))
            raise
        if self._last_end != request.offset:
            self.stats.repositionings += 1
        self._last_end = request.end
        self.stats.requests += 1
        fut.set_result(None)
        self._completed.append((request.offset, len(request.data), None))
        return fut

    def pop_completed(self) -> list[tuple[int, int, Exception | None]]:
        out = self._completed
        self._completed = []
        return out

    def flush(self) -> None:
        self.fs.flush()

    def close(self) -> None:
        self._closed = True


class AsyncDiskEngine:
    """Nonblocking engine: a dedicated disk thread drains a ring buffer.

    The producer thread enqueues and keeps servicing sockets; a full ring
    reports can_accept() False so the caller defers instead of blocking.
    """

    mode = DiskEngineMode.ASYNC
    extra_thread_count = 1

    def __init__(
        self,
        fs,
        capacity: int = DEFAULT_RING_SLOTS,
        record_batches: bool = False,
        name: str = "disk",
    ):
        self.fs = fs
        self.ring = RingBuffer(capacity)
        self.stats = CoalesceStats(batch_log=[] if record_batches else None)
        self._futures: list[Future] = []
        self._completed: list[tuple[int, int, Exception | None]] = []
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)
        self._inflight = 0
        self._failed: Exception | None = None
        self._closed = False
        self.thread = threading.Thread(target=self._disk_loop, name=name, daemon=True)
        self.thread.start()

    def can_accept(self) -> bool:
        return not self._closed and self._failed is None and len(self.ring) < self.ring.capacity

    def write(self, request: WriteRequest) -> Future:
        if self._closed:
            raise BufferClosed("engine is closed")
        if self._failed is not None:
            raise StorageError(f"disk thread failed: {self._failed}")
        fut: Future = Future()
        with self._lock:
            self._futures.append(fut)
            self._inflight += 1
        try:
            self.ring.put(request)  # blocks only if the caller ignored can_accept()
        except BufferClosed:
            with self._lock:
                self._futures.remove(fut)
                self._inflight -= 1
            raise
        return fut

    def _disk_loop(self) -> None:
        while True:
            batch = self.ring.take_batch(timeout=0.2)
            if not batch:
                if self.ring.closed:
                    break
                continue
            error: Exception | None = None
            try:
                runs = _coalesced_write(self.fs, batch)
            except OSError as exc:
                error = exc
                runs = 0
            with self._lock:
                self.stats.batches += 1
                self.stats.requests += len(batch)
                self.stats.repositionings += runs
                if self.stats.batch_log is not None:
                    self.stats.batch_log.append(
                        (tuple((w.offset, len(w.data)) for w in batch), runs)
                    )
                futures = self._futures[: len(batch)]
                del self._futures[: len(batch)]
                for req, fut in zip(batch, futures):
                    if error is None:
                        fut.set_result(None)
                    else:
                        fut.set_exception(error)
                    self._completed.append((req.offset, len(req.data), error))
                if error is not None:
                    self._failed = error
                self._inflight -= len(batch)
                self._idle.notify_all()

    def pop_completed(self) -> list[tuple[int, int, Exception | None]]:
        with self._lock:
            out = self._completed
            self._completed = []
            return out

    def flush(self, timeout: float | None = 30.0) -> None:
        """Wait until every enqueued request has hit the stream."""
        with self._idle:
            if not self._idle.wait_for(lambda: self._inflight == 0, timeout):
                raise StorageError("disk flush timed out")
        if self._failed is not None:
            raise StorageError(f"disk thread failed: {self._failed}")
        self.fs.flush()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.ring.close()
        self.thread.join(timeout=10)


def make_engine(
    fs, mode: DiskEngineMode, record_batches: bool = False, name: str = "disk"
):
    if mode is DiskEngineMode.ASYNC:
        return AsyncDiskEngine(fs, record_batches=record_batches, name=name)
    return SyncDiskEngine(fs)


def write_block(engine, request: WriteRequest) -> Future:
    """Hand one write to an engine; the token resolves when it is durable.

    Synchronous engines resolve the token before returning; asynchronous
    ones resolve it from the disk thread.
    """
    return engine.write(request)


class BlockSource:
    """Read-side adapter handing file blocks to a sending session."""

    extra_thread_count = 0

    def __init__(self, fs):
        self.fs = fs

    def read(self, descriptor: BlockDescriptor) -> bytes:
        return read_block(self.fs, descriptor)

    def can_accept(self) -> bool:
        return True

    def pop_completed(self) -> list:
        return []

    def flush(self) -> None:
        pass

    def close(self) -> None:
        pass
