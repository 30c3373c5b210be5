"""Hybrid server runtime: listener, waiter and common threads plus one
thread per active session.

The listener accepts connections, reads the first frame, routes it
(negotiation vs. an unsupported service event), authenticates and
registers the channel.  When a session fills, the waiter launches its
session thread, which runs the dispatch loop to completion.  The common
thread monitors sessions, expires stale Filling registrations and keeps
the metrics fresh.  Base census is therefore exactly three threads, plus
one per session, plus one disk thread per async-engine session.
"""

from __future__ import annotations

import logging
import os
import queue
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import transport
from .errors import InvariantViolation
from .fsm import server_download_machine, server_upload_machine
from .piod import (
    BlockScheduler,
    LoopConfig,
    SessionContext,
    SessionLoop,
    TransferCounters,
    server_registration_prologue,
)
from .session import (
    AuthDenied,
    Authenticator,
    NegotiationRejected,
    PassThroughAuthenticator,
    SessionRecord,
    SessionRegistry,
    SessionState,
    read_negotiation,
    send_all,
)
from .storage import (
    AsyncDiskEngine,
    BlockSource,
    DiskEngineMode,
    Mode,
    make_engine,
    null_stream,
    open_stream,
    zero_stream,
)
from .transport import Acceptor, ChannelStream, Endpoint, listen
from .wire import (
    MAGIC_REQUEST,
    CHANNEL_HEADER_SIZE,
    Direction,
    MalformedHeader,
    NegotiationReply,
    NegotiationRequest,
    ReplyStatus,
    SessionId,
    decode_channel_header,
    encode_reply,
    try_parse_negotiation,
)

_HANDSHAKE_TIMEOUT = 10.0


@dataclass
class ServerConfig:
    bind: Endpoint
    root_dir: str
    disk_mode: DiskEngineMode = DiskEngineMode.SYNC
    fill_timeout: float = 30.0
    idle_timeout: float = 60.0
    max_sessions: int = 64
    log_sink: str | None = None

    def __post_init__(self):
        if self.max_sessions < 1:
            raise InvariantViolation("max_sessions must be >= 1")
        if not os.path.isdir(self.root_dir):
            raise InvariantViolation(f"root dir {self.root_dir!r} does not exist")


@dataclass
class ServerMetrics:
    active_sessions: int = 0
    session_thread_count: int = 0
    disk_thread_count: int = 0
    total_bytes_in: int = 0
    total_bytes_out: int = 0
    sessions_completed: int = 0
    sessions_failed: int = 0
    per_session: dict = field(default_factory=dict)


def resolve_remote_name(root: str, name: str, direction: Direction):
    """Map a remote file name to ("file", path) | ("zero", n) | ("null", None).

    Plain names resolve lexically under the server root; absolute paths
    and traversal outside the root are refused.
    """
    if name == "null:":
        if direction is not Direction.UPLOAD:
            raise NegotiationRejected("path: null: is a write-only target")
        return ("null", None)
    if name.startswith("zero:"):
        try:
            size = int(name[5:])
        except ValueError:
            raise NegotiationRejected(f"path: bad pseudo-stream {name!r}") from None
        if size < 0:
            raise NegotiationRejected("path: zero: size must be >= 0")
        if direction is not Direction.DOWNLOAD:
            raise NegotiationRejected("path: zero: is a read-only source")
        return ("zero", size)
    if os.path.isabs(name):
        raise NegotiationRejected("path: absolute remote paths are not allowed")
    norm = os.path.normpath(name)
    if norm.startswith("..") or norm == ".":
        raise NegotiationRejected("path: remote path escapes the server root")
    full = os.path.normpath(os.path.join(root, norm))
    if os.path.commonpath([os.path.abspath(root), os.path.abspath(full)]) != (
        os.path.abspath(root)
    ):
        raise NegotiationRejected("path: remote path escapes the server root")
    return ("file", full)


@dataclass
class _LiveSession:
    record: SessionRecord
    thread: threading.Thread | None = None
    engine: object | None = None
    counters: TransferCounters | None = None


class Server:
    """Running server handle; create with serve()."""

    def __init__(self, cfg: ServerConfig, authenticator: Authenticator | None = None):
        self.cfg = cfg
        self.registry = SessionRegistry()
        self.auth = authenticator or PassThroughAuthenticator()
        self.acceptor: Acceptor | None = None
        self._stopping = threading.Event()
        self._cancel = threading.Event()
        self._queue: queue.Queue = queue.Queue()
        self._live: dict[bytes, _LiveSession] = {}
        self._live_lock = threading.Lock()
        self._totals = ServerMetrics()
        self._threads: list[threading.Thread] = []
        self._log = logging.getLogger(f"xdfs.server.{id(self):x}")
        self._log.setLevel(logging.INFO)
        self._log.propagate = False
        if cfg.log_sink:
            handler = logging.FileHandler(cfg.log_sink)
        else:
            handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(message)s")
        )
        self._log.handlers = [handler]

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self.acceptor = listen(self.cfg.bind)
        self._log.info("listening on %s root=%s", self.acceptor.endpoint, self.cfg.root_dir)
        for name, target in (
            ("listener", self._listener_loop),
            ("waiter", self._waiter_loop),
            ("common", self._common_loop),
        ):
            thread = threading.Thread(target=target, name=f"xferd-{name}", daemon=True)
            thread.start()
            self._threads.append(thread)

    @property
    def endpoint(self) -> Endpoint:
        return self.acceptor.endpoint

    def shutdown(self, grace: float = 10.0) -> ServerMetrics:
        """Stop accepting, let sessions finish within grace, then cancel."""
        self._stopping.set()
        if self.acceptor is not None:
            self.acceptor.close()
        expired = self.registry.expire_stale(0)
        for sid in expired:
            self._log.warning("session %s expired at shutdown", sid)
        deadline = time.monotonic() + grace
        while time.monotonic() < deadline and self._session_threads_alive():
            time.sleep(0.02)
        if self._session_threads_alive():
            self._cancel.set()
        with self._live_lock:
            threads = [ls.thread for ls in self._live.values() if ls.thread]
        for thread in threads:
            thread.join(timeout=10)
        self._queue.put(None)
        for thread in self._threads:
            thread.join(timeout=10)
        metrics = self.metrics()
        self._log.info(
            "shutdown: %d completed, %d failed",
            metrics.sessions_completed,
            metrics.sessions_failed,
        )
        for handler in self._log.handlers:
            handler.close()
        return metrics

    def _session_threads_alive(self) -> bool:
        with self._live_lock:
            return any(ls.thread and ls.thread.is_alive() for ls in self._live.values())

    # -- metrics ---------------------------------------------------------------

    def thread_census(self) -> dict:
        """Runtime thread accounting: base trio + sessions + disk threads."""
        with self._live_lock:
            sessions = sum(
                1 for ls in self._live.values() if ls.thread and ls.thread.is_alive()
            )
            disk = sum(
                1
                for ls in self._live.values()
                if isinstance(ls.engine, AsyncDiskEngine) and ls.engine.thread.is_alive()
            )
        base = sum(1 for t in self._threads if t.is_alive())
        return {
            "base": base,
            "sessions": sessions,
            "disk": disk,
            "total": base + sessions + disk,
        }

    def metrics(self) -> ServerMetrics:
        _filling, active = self.registry.counts()
        census = self.thread_census()
        with self._live_lock:
            per_session = {
                ls.record.session_id.hex: ls.counters
                for ls in self._live.values()
                if ls.counters is not None
            }
        return ServerMetrics(
            active_sessions=active,
            session_thread_count=census["sessions"],
            disk_thread_count=census["disk"],
            total_bytes_in=self._totals.total_bytes_in,
            total_bytes_out=self._totals.total_bytes_out,
            sessions_completed=self._totals.sessions_completed,
            sessions_failed=self._totals.sessions_failed,
            per_session=per_session,
        )

    # -- listener ----------------------------------------------------------

    def _listener_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                stream = self.acceptor.accept(timeout=0.2)
            except OSError:
                break
            if stream is None:
                continue
            try:
                self._handle_connection(stream)
            except Exception as exc:  # per-connection faults never kill the server
                self._log.error("connection handling failed: %s", exc)
                stream.close()

    def _read_service_request(self, stream: ChannelStream):
        """First frame decides the service: negotiation or a channel event."""
        deadline = time.monotonic() + _HANDSHAKE_TIMEOUT
        buf = bytearray()
        while True:
            if len(buf) >= 4:
                if bytes(buf[:4]) == MAGIC_REQUEST:
                    parsed = try_parse_negotiation(bytes(buf))
                    if parsed is not None:
                        return ("negotiation", parsed[0])
                elif len(buf) >= CHANNEL_HEADER_SIZE:
                    header = decode_channel_header(bytes(buf[:CHANNEL_HEADER_SIZE]))
                    return ("event", header)
            if len(buf) > 1 << 20:
                raise MalformedHeader("oversized handshake frame")
            if not transport.poll_readiness([(stream, transport.READ)], 0.1):
                if time.monotonic() > deadline:
                    raise MalformedHeader("handshake timed out")
                continue
            data = stream.recv(65536)
            if data is None:
                continue
            if data == b"":
                raise MalformedHeader("peer closed during handshake")
            buf.extend(data)

    def _reject(self, stream: ChannelStream, sid: SessionId | None, reason: str) -> None:
        try:
            reply = NegotiationReply(
                status=ReplyStatus.REJECTED,
                session_id=sid or SessionId(b"\x01" + b"\x00" * 15),
                reason=reason,
            )
            send_all(stream, encode_reply(reply), timeout=5.0)
        except Exception:
            pass
        finally:
            stream.close()

    def _handle_connection(self, stream: ChannelStream) -> None:
        try:
            kind, payload = self._read_service_request(stream)
        except MalformedHeader as exc:
            self._log.warning("malformed handshake: %s", exc)
            self._reject(stream, None, f"malformed: {exc}")
            return
        if kind == "event":
            self._log.warning("service %s requested; not implemented", payload.event.name)
            self._reject(stream, None, f"mode: {payload.event.name} not implemented")
            return

        req: NegotiationRequest = payload
        sid = req.session_id
        try:
            self.auth.authenticate(req.credentials)
        except AuthDenied as exc:
            self._log.warning("session %s auth denied", sid)
            self._reject(stream, sid, f"auth: {exc}")
            return

        registering = self.registry.get(sid) is None
        resolved = None
        file_size = 0
        if registering:
            try:
                resolved = resolve_remote_name(
                    self.cfg.root_dir, req.remote_file_name, req.direction
                )
                file_size = self._prepare_target(req, resolved)
            except NegotiationRejected as exc:
                self._log.warning("session %s rejected: %s", sid, exc.reason)
                self._reject(stream, sid, exc.reason)
                return
            filling, active = self.registry.counts()
            if filling + active >= self.cfg.max_sessions:
                self._reject(stream, sid, "busy: session limit reached")
                return

        if hasattr(stream, "set_window"):
            try:
                stream.set_window(req.tcp_window_size)
                achieved = stream.achieved_window
            except OSError:
                achieved = None
        else:
            achieved = None

        try:
            record, role = self.registry.register_or_join(stream, req)
        except Exception as exc:
            self._reject(stream, sid, f"register: {exc}")
            return
        if role.value == "Registrar":
            record.meta["resolved"] = resolved
            record.meta["file_size"] = file_size
            self._log.info(
                "session %s registered: %s n=%d %s window=%s",
                sid,
                req.direction.name.lower(),
                req.channel_count,
                req.remote_file_name,
                achieved,
            )
        reply = NegotiationReply(
            status=ReplyStatus.ACCEPTED,
            session_id=sid,
            file_size=record.meta.get("file_size", 0),
        )
        try:
            send_all(stream, encode_reply(reply), timeout=5.0)
        except Exception as exc:
            self._log.warning("session %s reply failed: %s", sid, exc)
            stream.close()
            return
        if record.state is SessionState.ACTIVE and record.meta.get("queued") is None:
            record.meta["queued"] = True
            self._log.info("session %s active with %d channels", sid, len(record.joined))
            self._queue.put(record)

    def _prepare_target(self, req: NegotiationRequest, resolved) -> int:
        """Validate the target and return the download file size (0 upload)."""
        kind, target = resolved
        if req.direction is Direction.DOWNLOAD:
            if kind == "zero":
                return target
            if kind == "null":
                raise NegotiationRejected("path: null: is a write-only target")
            try:
                return os.stat(target).st_size
            except FileNotFoundError:
                raise NegotiationRejected(
                    f"notfound: {req.remote_file_name}"
                ) from None
            except PermissionError:
                raise NegotiationRejected(f"denied: {req.remote_file_name}") from None
        if kind == "file":
            if os.path.exists(target) and req.extended_mode.get("overwrite") != "1":
                raise NegotiationRejected(
                    "exists: destination exists (pass overwrite/--force)"
                )
            # create and truncate now: an Accepted reply means the upload
            # target exists, even for zero-block transfers
            try:
                os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
                with open(target, "wb"):
                    pass
            except PermissionError:
                raise NegotiationRejected(f"denied: {req.remote_file_name}") from None
        return 0

    # -- waiter / sessions ---------------------------------------------------

    def _waiter_loop(self) -> None:
        while True:
            record = self._queue.get()
            if record is None:
                return
            live = _LiveSession(record=record)
            thread = threading.Thread(
                target=self._run_server_session,
                args=(record, live),
                name=f"session-{record.session_id}",
                daemon=True,
            )
            live.thread = thread
            with self._live_lock:
                self._live[record.session_id.value] = live
            thread.start()

    def _run_server_session(self, record: SessionRecord, live: _LiveSession) -> None:
        sid = record.session_id
        req = record.params
        streams = record.streams_by_index()
        fs = None
        engine = None
        try:
            kind, target = record.meta["resolved"]
            if record.direction is Direction.DOWNLOAD:
                machine = server_download_machine()
                fs = zero_stream(target) if kind == "zero" else open_stream(target, Mode.READ)
                scheduler = BlockScheduler(fs.size, req.block_size)
                engine = BlockSource(fs)
            else:
                machine = server_upload_machine()
                if kind == "null":
                    fs = null_stream()
                else:
                    os.makedirs(os.path.dirname(target) or ".", exist_ok=True)
                    fs = open_stream(target, Mode.WRITE_CREATE)
                    presize = req.extended_mode.get("file-size")
                    if presize is not None and presize.isdigit():
                        fs.truncate(int(presize))
                scheduler = None
                mode = self.cfg.disk_mode
                wanted = req.extended_mode.get("disk-mode")
                if wanted in ("sync", "async"):
                    mode = DiskEngineMode(wanted)
                engine = make_engine(fs, mode, name=f"disk-{sid}")
            live.engine = engine
            ctx = SessionContext(
                channel_count=record.expected_channels,
                file_size=scheduler.file_size if scheduler else 0,
                block_size=req.block_size,
                scheduler=scheduler,
            )
            server_registration_prologue(machine, ctx, record.requests)
            loop = SessionLoop(
                streams,
                machine,
                scheduler,
                engine,
                LoopConfig(
                    idle_timeout=self.cfg.idle_timeout,
                    max_block=req.block_size,
                    cancel=self._cancel,
                ),
            )
            live.counters = loop.counters
            trace, counters = loop.run()
            with self._live_lock:
                self._totals.total_bytes_in += counters.bytes_received
                self._totals.total_bytes_out += counters.bytes_sent
                if machine.completed:
                    self._totals.sessions_completed += 1
                else:
                    self._totals.sessions_failed += 1
            if machine.completed:
                self._log.info(
                    "session %s done: %d bytes in, %d bytes out, %d loops",
                    sid,
                    counters.bytes_received,
                    counters.bytes_sent,
                    counters.loop_iterations,
                )
            else:
                self._log.error("session %s failed: %s", sid, loop.error)
        except Exception as exc:
            self._log.error("session %s crashed: %s", sid, exc)
            with self._live_lock:
                self._totals.sessions_failed += 1
            for stream in streams:
                stream.close()
        finally:
            if engine is not None:
                engine.close()
            if fs is not None:
                fs.close()
            self.registry.remove(sid)
            with self._live_lock:
                self._live.pop(sid.value, None)

    # -- common (monitoring) -------------------------------------------------

    def _common_loop(self) -> None:
        while not self._stopping.wait(0.25):
            for sid in self.registry.expire_stale(self.cfg.fill_timeout):
                self._log.warning("session %s expired while filling", sid)


def serve(cfg: ServerConfig, authenticator: Authenticator | None = None) -> Server:
    """Start a server and return its running handle."""
    server = Server(cfg, authenticator)
    server.start()
    return server
