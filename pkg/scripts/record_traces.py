#!/usr/bin/env python3
"""Regenerate the conformance golden traces in tests/traces/.

Runs the canonical lockstep scenarios (n in {1,4}, upload and download)
on the deterministic simulator and dumps both machines' transition
traces.  Run from the repository root after any intentional protocol
change, then review the diff like any other golden update.
"""

from __future__ import annotations

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from xdfs.harness import run_sim_transfer
from xdfs.wire import Direction

TRACE_DIR = pathlib.Path(__file__).resolve().parent.parent / "tests" / "traces"

BLOCK_SIZE = 4096
FILE_SIZE = 3 * BLOCK_SIZE + 7
PAYLOAD = bytes(i % 251 for i in range(FILE_SIZE))

SCENARIOS = [
    (Direction.DOWNLOAD, 1),
    (Direction.DOWNLOAD, 4),
    (Direction.UPLOAD, 1),
    (Direction.UPLOAD, 4),
]


def main() -> int:
    TRACE_DIR.mkdir(parents=True, exist_ok=True)
    for direction, n in SCENARIOS:
        result = run_sim_transfer(direction, PAYLOAD, n=n, block_size=BLOCK_SIZE)
        assert result.ok, (direction, n, result.client_error, result.server_error)
        assert result.dest_bytes == PAYLOAD
        stem = f"{direction.name.lower()}_n{n}"
        for side, trace in (("client", result.client_trace), ("server", result.server_trace)):
            path = TRACE_DIR / f"{stem}_{side}.trace"
            path.write_text(trace.dump(), encoding="utf-8")
            print(f"wrote {path} ({len(trace.steps)} transitions)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
