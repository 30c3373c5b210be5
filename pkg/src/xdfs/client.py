"""Client API: url-copy transfers and the benchmark harness.

URL schemes:
    xdfs://host:port/path   remote side (exactly one per transfer); the
                            path may itself be the server-side pseudo
                            stream "null:" or "zero:N"
    file:path               local file (bare paths work too)
    zero:N                  local all-zero source of N bytes
    null:                   local counting sink

A remote source makes the transfer a download; a remote destination an
upload.  Block payloads move over n parallel channels and the
destination ends up byte-identical to the source.
"""

from __future__ import annotations

import csv
import json
import os
import socket
import time
from dataclasses import dataclass, field

from .errors import InvariantViolation, XdfsError
from .fsm import client_download_machine, client_upload_machine
from .piod import (
    BlockScheduler,
    LoopConfig,
    SessionContext,
    SessionLoop,
    TransferCounters,
    client_connection_prologue,
)
from .session import negotiate_client, new_session_id
from .storage import (
    BlockSource,
    DiskEngineMode,
    Mode,
    make_engine,
    null_stream,
    open_stream,
    zero_stream,
)
from .transport import Endpoint
from .wire import Direction, NegotiationRequest

DEFAULT_BLOCK_SIZE = 1 << 20
DEFAULT_TCP_WINDOW = 1 << 20


class TransferError(XdfsError):
    pass


@dataclass(frozen=True)
class Url:
    scheme: str           # "xdfs" | "file" | "zero" | "null"
    host: str = ""
    port: int = 0
    path: str = ""
    size: int = 0

    @property
    def endpoint(self) -> Endpoint:
        return Endpoint(self.host, self.port)


def parse_url(text: str) -> Url:
    if text.startswith("xdfs://"):
        rest = text[len("xdfs://"):]
        hostport, sep, path = rest.partition("/")
        if not sep or not path:
            raise InvariantViolation(f"xdfs URL {text!r} needs a path")
        host, sep, port = hostport.rpartition(":")
        if not sep:
            raise InvariantViolation(f"xdfs URL {text!r} needs host:port")
        try:
            port_num = int(port)
        except ValueError:
            raise InvariantViolation(f"bad port in {text!r}") from None
        return Url("xdfs", host=host, port=port_num, path=path)
    if text.startswith("file:"):
        path = text[len("file:"):]
        if not path:
            raise InvariantViolation("file: URL needs a path")
        return Url("file", path=path)
    if text.startswith("zero:"):
        try:
            size = int(text[5:])
        except ValueError:
            raise InvariantViolation(f"bad zero: size in {text!r}") from None
        if size < 0:
            raise InvariantViolation("zero: size must be >= 0")
        return Url("zero", size=size)
    if text == "null:":
        return Url("null")
    if "://" in text:
        raise InvariantViolation(f"unknown URL scheme in {text!r}")
    return Url("file", path=text)


@dataclass
class TransferSpec:
    source_url: str
    dest_url: str
    parallel: int = 1
    block_size: int = DEFAULT_BLOCK_SIZE
    tcp_window: int = DEFAULT_TCP_WINDOW
    disk_mode: DiskEngineMode = DiskEngineMode.SYNC
    force: bool = False
    credentials: bytes = b""
    idle_timeout: float = 60.0

    def validated(self) -> tuple[Url, Url, Direction]:
        source = parse_url(self.source_url)
        dest = parse_url(self.dest_url)
        remote = [u for u in (source, dest) if u.scheme == "xdfs"]
        if len(remote) != 1:
            raise InvariantViolation(
                "exactly one of source/dest must be an xdfs:// URL"
            )
        if source.scheme == "null":
            raise InvariantViolation("null: is only valid as a destination")
        if dest.scheme == "zero":
            raise InvariantViolation("zero: is only valid as a source")
        if not 1 <= self.parallel <= 65535:
            raise InvariantViolation("parallel channel count outside 1..65535")
        direction = Direction.DOWNLOAD if source.scheme == "xdfs" else Direction.UPLOAD
        return source, dest, direction


@dataclass
class TransferReport:
    bytes_transferred: int
    wall_time: float
    throughput: float            # bits per second
    direction: str
    parallel: int
    success: bool
    error: str | None = None
    per_channel: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bytes": self.bytes_transferred,
            "wall_time": self.wall_time,
            "throughput_bps": self.throughput,
            "direction": self.direction,
            "parallel": self.parallel,
            "success": self.success,
            "error": self.error,
        }


def _report(
    counters: TransferCounters,
    direction: Direction,
    parallel: int,
    success: bool,
    error: str | None,
) -> TransferReport:
    wall = max(counters.wall_time, 1e-9)
    payload = counters.payload_bytes
    return TransferReport(
        bytes_transferred=payload,
        wall_time=wall,
        throughput=8 * payload / wall,
        direction=direction.name.lower(),
        parallel=parallel,
        success=success,
        error=error,
        per_channel=counters.per_channel,
    )


def transfer(spec: TransferSpec) -> TransferReport:
    """Run one transfer; failures come back in the report, not as raises."""
    source, dest, direction = spec.validated()
    remote = source if direction is Direction.DOWNLOAD else dest
    local = dest if direction is Direction.DOWNLOAD else source

    extended: dict[str, str] = {}
    if spec.force:
        extended["overwrite"] = "1"
    if direction is Direction.DOWNLOAD:
        if local.scheme == "file" and not spec.force and os.path.exists(local.path):
            return TransferReport(
                0, 1e-9, 0.0, "download", spec.parallel, False,
                error="exists: local destination exists (pass --force)",
            )
    else:
        if spec.disk_mode is DiskEngineMode.ASYNC:
            extended["disk-mode"] = "async"

    fs = None
    engine = None
    try:
        if direction is Direction.UPLOAD:
            fs = (
                zero_stream(source.size)
                if source.scheme == "zero"
                else open_stream(source.path, Mode.READ)
            )
            extended["file-size"] = str(fs.size)

        request = NegotiationRequest(
            session_id=new_session_id(),
            direction=direction,
            channel_index=0,
            channel_count=spec.parallel,
            remote_file_name=remote.path,
            local_file_name=local.path or local.scheme,
            tcp_window_size=spec.tcp_window,
            block_size=spec.block_size,
            credentials=spec.credentials,
            extended_mode=extended,
        )
        try:
            handle = negotiate_client(remote.endpoint, request)
        except XdfsError as exc:
            if fs is not None:
                fs.close()
            return TransferReport(
                0, 1e-9, 0.0, direction.name.lower(), spec.parallel, False,
                error=str(exc),
            )

        if direction is Direction.DOWNLOAD:
            machine = client_download_machine()
            scheduler = None
            if local.scheme == "null":
                fs = null_stream()
            else:
                fs = open_stream(local.path, Mode.WRITE_CREATE)
                fs.truncate(handle.file_size)
            engine = make_engine(fs, spec.disk_mode, name="disk-client")
        else:
            machine = client_upload_machine()
            scheduler = BlockScheduler(fs.size, spec.block_size)
            engine = BlockSource(fs)

        ctx = SessionContext(
            channel_count=spec.parallel,
            file_size=scheduler.file_size if scheduler else handle.file_size,
            block_size=spec.block_size,
            scheduler=scheduler,
        )
        client_connection_prologue(machine, ctx)
        loop = SessionLoop(
            handle.streams,
            machine,
            scheduler,
            engine,
            LoopConfig(idle_timeout=spec.idle_timeout, max_block=spec.block_size),
        )
        _trace, counters = loop.run()
        return _report(
            counters, direction, spec.parallel, machine.completed, loop.error
        )
    finally:
        if engine is not None:
            engine.close()
        if fs is not None:
            fs.close()


# --------------------------------------------------------------------------
# Benchmark harness


@dataclass
class BenchRow:
    parallel: int
    repeats: int
    bytes_per_run: int
    mean_throughput: float
    min_throughput: float
    max_throughput: float
    mean_wall_time: float
    direction: str

    def to_dict(self) -> dict:
        return {
            "parallel": self.parallel,
            "repeats": self.repeats,
            "bytes": self.bytes_per_run,
            "mean_throughput_bps": self.mean_throughput,
            "min_throughput_bps": self.min_throughput,
            "max_throughput_bps": self.max_throughput,
            "mean_wall_time": self.mean_wall_time,
            "direction": self.direction,
        }


class BenchAborted(XdfsError):
    """Sweep stopped at the first failing run; completed rows attached."""

    def __init__(self, cause: str, rows: list[BenchRow]):
        super().__init__(cause)
        self.rows = rows


def bench(
    spec: TransferSpec, repeats: int, sweep: list[int] | None = None
) -> list[BenchRow]:
    """Repeat transfers, optionally sweeping the channel count."""
    if repeats < 1:
        raise InvariantViolation("repeats must be >= 1")
    rows: list[BenchRow] = []
    for n in sweep or [spec.parallel]:
        samples: list[TransferReport] = []
        for _ in range(repeats):
            run_spec = TransferSpec(
                source_url=spec.source_url,
                dest_url=spec.dest_url,
                parallel=n,
                block_size=spec.block_size,
                tcp_window=spec.tcp_window,
                disk_mode=spec.disk_mode,
                force=True,  # benches overwrite their own outputs
                credentials=spec.credentials,
                idle_timeout=spec.idle_timeout,
            )
            report = transfer(run_spec)
            if not report.success:
                raise BenchAborted(report.error or "transfer failed", rows)
            samples.append(report)
        speeds = [s.throughput for s in samples]
        rows.append(
            BenchRow(
                parallel=n,
                repeats=repeats,
                bytes_per_run=samples[0].bytes_transferred,
                mean_throughput=sum(speeds) / len(speeds),
                min_throughput=min(speeds),
                max_throughput=max(speeds),
                mean_wall_time=sum(s.wall_time for s in samples) / len(samples),
                direction=samples[0].direction,
            )
        )
    return rows


def write_rows(rows: list[BenchRow], out, fmt: str = "jsonl") -> None:
    """Serialize bench rows as JSON-lines (default) or CSV."""
    if fmt == "jsonl":
        for row in rows:
            out.write(json.dumps(row.to_dict()) + "\n")
    elif fmt == "csv":
        writer = csv.DictWriter(out, fieldnames=list(rows[0].to_dict()) if rows else [])
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_dict())
    else:
        raise InvariantViolation(f"unknown bench format {fmt!r}")


_SINK_SCRIPT = """
import socket, sys
listener = socket.socket()
listener.bind(("127.0.0.1", 0))
listener.listen(1)
print(listener.getsockname()[1], flush=True)
conn, _ = listener.accept()
conn.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, int(sys.argv[1]))
total = 0
while True:
    data = conn.recv(1 << 20)
    if not data:
        break
    total += len(data)
print(total, flush=True)
"""


def raw_loopback_baseline(
    total_bytes: int, chunk: int = 1 << 20, window: int = 1 << 20
) -> float:
    """Throughput (bits/s) of a bare single-socket same-host copy.

    The reference the protocol stack is measured against: chunked sendall
    into a counting sink that runs in its own process (matching the
    client/daemon topology of a real transfer), with the same socket
    window the stack negotiates.
    """
    import subprocess
    import sys

    sink = subprocess.Popen(
        [sys.executable, "-c", _SINK_SCRIPT, str(window)],
        stdout=subprocess.PIPE,
        text=True,
    )
    try:
        port = int(sink.stdout.readline())
        payload = bytes(chunk)
        sent = 0
        out = socket.create_connection(("127.0.0.1", port))
        out.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if window:
            out.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, window)
        start = time.perf_counter()
        with out:
            while sent < total_bytes:
                piece = min(chunk, total_bytes - sent)
                out.sendall(payload[:piece] if piece != chunk else payload)
                sent += piece
        received = int(sink.stdout.readline())
        elapsed = max(time.perf_counter() - start, 1e-9)
    finally:
        if sink.poll() is None:
            sink.kill()
        sink.wait()
    if received != total_bytes:
        raise TransferError("baseline copy lost bytes")
    return 8 * total_bytes / elapsed
