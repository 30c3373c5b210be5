"""Command-line entry points: the xferd daemon and the xduc url-copy tool.

Exit codes: 0 success, 2 usage error, 3 transfer/runtime error.
"""

from __future__ import annotations

import argparse
import signal
import sys
import threading

from .client import BenchAborted, TransferSpec, bench, transfer, write_rows
from .errors import InvariantViolation, XdfsError
from .server import ServerConfig, serve
from .storage import DiskEngineMode
from .transport import Endpoint

_SIZE_SUFFIXES = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}


def parse_size(text: str) -> int:
    """Byte counts with optional k/m/g suffix: '64k', '1m', '4096'."""
    raw = text.strip().lower()
    factor = 1
    if raw and raw[-1] in _SIZE_SUFFIXES:
        factor = _SIZE_SUFFIXES[raw[-1]]
        raw = raw[:-1]
    try:
        value = int(raw) * factor
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("size must be >= 0")
    return value


def _human_rate(bps: float) -> str:
    for unit, scale in (("Gb/s", 1e9), ("Mb/s", 1e6), ("Kb/s", 1e3)):
        if bps >= scale:
            return f"{bps / scale:.2f} {unit}"
    return f"{bps:.0f} b/s"


def xduc_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="xduc",
        description="Copy a file to or from a transfer server over n parallel channels.",
    )
    parser.add_argument("src", help="source URL (xdfs://host:port/path, file:path, zero:N)")
    parser.add_argument("dst", help="destination URL (xdfs://host:port/path, file:path, null:)")
    parser.add_argument("-p", "--parallel", type=int, default=1,
                        help="number of parallel channels (default 1)")
    parser.add_argument("--bs", type=parse_size, default=1 << 20,
                        help="block size in bytes (default 1m)")
    parser.add_argument("--tcp-bs", type=parse_size, default=1 << 20,
                        help="TCP window size in bytes (default 1m)")
    parser.add_argument("--disk-mode", choices=("sync", "async"), default="sync")
    parser.add_argument("--force", action="store_true",
                        help="overwrite an existing destination")
    parser.add_argument("--bench", action="store_true",
                        help="benchmark instead of a single copy")
    parser.add_argument("--repeats", type=int, default=1,
                        help="bench runs per sweep point (default 1)")
    parser.add_argument("--sweep", default=None,
                        help='comma-separated channel counts, e.g. "1,2,4,8"')
    parser.add_argument("--out", default=None,
                        help="write bench rows to this file (.jsonl or .csv)")
    args = parser.parse_args(argv)

    spec = TransferSpec(
        source_url=args.src,
        dest_url=args.dst,
        parallel=args.parallel,
        block_size=args.bs,
        tcp_window=args.tcp_bs,
        disk_mode=DiskEngineMode(args.disk_mode),
        force=args.force,
    )
    try:
        spec.validated()
    except InvariantViolation as exc:
        parser.error(str(exc))  # exits 2

    if args.bench:
        sweep = None
        if args.sweep:
            try:
                sweep = [int(x) for x in args.sweep.split(",") if x.strip()]
            except ValueError:
                parser.error(f"bad sweep {args.sweep!r}")
        rows = []
        code = 0
        try:
            rows = bench(spec, repeats=args.repeats, sweep=sweep)
        except BenchAborted as exc:
            rows = exc.rows
            print(f"bench aborted: {exc}", file=sys.stderr)
            code = 3
        except XdfsError as exc:
            print(f"bench failed: {exc}", file=sys.stderr)
            return 3
        fmt = "csv" if (args.out or "").endswith(".csv") else "jsonl"
        if args.out:
            with open(args.out, "w", encoding="utf-8", newline="") as fh:
                write_rows(rows, fh, fmt)
        else:
            write_rows(rows, sys.stdout, fmt)
        return code

    report = transfer(spec)
    if not report.success:
        print(f"transfer failed: {report.error}", file=sys.stderr)
        return 3
    print(
        f"{report.bytes_transferred} bytes {report.direction}ed over "
        f"{report.parallel} channel(s) in {report.wall_time:.3f}s "
        f"({_human_rate(report.throughput)})"
    )
    return 0


def xferd_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="xferd", description="Transfer server daemon.")
    sub = parser.add_subparsers(dest="command", required=True)
    srv = sub.add_parser("serve", help="run the server")
    srv.add_argument("--bind", required=True, help="HOST:PORT to listen on")
    srv.add_argument("--root", required=True, help="directory remote paths resolve under")
    srv.add_argument("--disk-mode", choices=("sync", "async"), default="sync")
    srv.add_argument("--fill-timeout", type=float, default=30.0)
    srv.add_argument("--idle-timeout", type=float, default=60.0)
    srv.add_argument("--max-sessions", type=int, default=64)
    srv.add_argument("--log", default=None, help="log file (default stderr)")
    args = parser.parse_args(argv)

    try:
        cfg = ServerConfig(
            bind=Endpoint.parse(args.bind),
            root_dir=args.root,
            disk_mode=DiskEngineMode(args.disk_mode),
            fill_timeout=args.fill_timeout,
            idle_timeout=args.idle_timeout,
            max_sessions=args.max_sessions,
            log_sink=args.log,
        )
    except InvariantViolation as exc:
        parser.error(str(exc))

    try:
        server = serve(cfg)
    except XdfsError as exc:
        print(f"cannot start server: {exc}", file=sys.stderr)
        return 3

    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"xferd serving on {server.endpoint}", file=sys.stderr)
    stop.wait()
    server.shutdown(grace=10.0)
    return 0


if __name__ == "__main__":
    sys.exit(xduc_main())
