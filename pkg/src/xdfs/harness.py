"""In-process transfer harness over the simulated network.

Runs a client-side and a server-side session loop against sim_pair
channels, either lockstep on one thread (fully deterministic: used for
conformance goldens) or on two threads.  No sockets, no server daemon;
this is the conformance-testing surface of the protocol stack.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

from .fsm import (
    FsmTrace,
    Machine,
    client_download_machine,
    client_upload_machine,
    server_download_machine,
    server_upload_machine,
)
from .piod import (
    BlockScheduler,
    LoopConfig,
    SessionContext,
    SessionLoop,
    TransferCounters,
    client_connection_prologue,
    server_registration_prologue,
)
from .storage import (
    BlockSource,
    BufferStream,
    DiskEngineMode,
    make_engine,
)
from .transport import SimNetConfig, SimNetwork
from .wire import Direction, NegotiationRequest, SessionId

_TEST_SESSION_ID = SessionId(bytes(range(1, 17)))


@dataclass
class SimTransferResult:
    client_trace: FsmTrace
    server_trace: FsmTrace
    client_counters: TransferCounters
    server_counters: TransferCounters
    destination: BufferStream
    network: SimNetwork
    client_error: str | None
    server_error: str | None
    receiver_stats: object = None  # CoalesceStats of the receiving engine

    @property
    def ok(self) -> bool:
        return self.client_error is None and self.server_error is None

    @property
    def dest_bytes(self) -> bytes:
        return self.destination.getvalue()


def lockstep(loops: list[SessionLoop], max_rounds: int = 2_000_000) -> None:
    """Alternate run_once across loops until all finish; deterministic."""
    for loop in loops:
        loop.start()
    for _ in range(max_rounds):
        if all(loop.finished for loop in loops):
            return
        moved = False
        for loop in loops:
            if not loop.finished:
                moved |= loop.run_once(timeout=0)
        if not moved:
            # only paced configurations (latency/bandwidth) ever get here
            time.sleep(0.0005)
    raise RuntimeError("lockstep did not converge")


def threaded(loops: list[SessionLoop]) -> None:
    threads = [
        threading.Thread(target=loop.run, name=f"sim-loop-{i}", daemon=True)
        for i, loop in enumerate(loops)
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()


def build_requests(
    direction: Direction,
    n: int,
    block_size: int,
    file_size: int,
    session_id: SessionId = _TEST_SESSION_ID,
    arrival_order: list[int] | None = None,
) -> list[NegotiationRequest]:
    order = arrival_order if arrival_order is not None else list(range(n))
    return [
        NegotiationRequest(
            session_id=session_id,
            direction=direction,
            channel_index=i,
            channel_count=n,
            remote_file_name="remote.bin",
            local_file_name="local.bin",
            block_size=block_size,
            extended_mode={"file-size": str(file_size)},
        )
        for i in order
    ]


def run_sim_transfer(
    direction: Direction,
    payload: bytes,
    n: int = 1,
    block_size: int = 4096,
    sim: SimNetConfig | None = None,
    receiver_disk: DiskEngineMode = DiskEngineMode.SYNC,
    mode: str = "lockstep",
    idle_timeout: float = 20.0,
    record_batches: bool = False,
    arrival_order: list[int] | None = None,
) -> SimTransferResult:
    """One full upload or download across the simulated network."""
    cfg = sim or SimNetConfig()
    network = SimNetwork(cfg, n)
    file_size = len(payload)
    source = BufferStream(payload)
    destination = BufferStream()

    if direction is Direction.UPLOAD:
        sender_machine, receiver_machine = client_upload_machine(), server_upload_machine()
        sender_streams = network.client_streams
        receiver_streams = network.server_streams
    else:
        sender_machine, receiver_machine = server_download_machine(), client_download_machine()
        sender_streams = network.server_streams
        receiver_streams = network.client_streams

    scheduler = BlockScheduler(file_size, block_size)
    sender_ctx = SessionContext(n, file_size, block_size, scheduler)
    receiver_ctx = SessionContext(n, file_size, block_size, None)

    requests = build_requests(direction, n, block_size, file_size,
                              arrival_order=arrival_order)
    if direction is Direction.UPLOAD:
        client_connection_prologue(sender_machine, sender_ctx)
        server_registration_prologue(receiver_machine, receiver_ctx, requests)
    else:
        server_registration_prologue(sender_machine, sender_ctx, requests)
        client_connection_prologue(receiver_machine, receiver_ctx)

    destination.truncate(file_size)
    sender_engine = BlockSource(source)
    receiver_engine = make_engine(
        destination, receiver_disk, record_batches=record_batches, name="sim-disk"
    )
    loop_cfg = LoopConfig(idle_timeout=idle_timeout, max_block=block_size)
    sender_loop = SessionLoop(sender_streams, sender_machine, scheduler, sender_engine, loop_cfg)
    receiver_loop = SessionLoop(receiver_streams, receiver_machine, None, receiver_engine, loop_cfg)

    try:
        if mode == "lockstep":
            lockstep([sender_loop, receiver_loop])
        else:
            threaded([sender_loop, receiver_loop])
    finally:
        receiver_engine.close()

    if direction is Direction.UPLOAD:
        client_loop, server_loop = sender_loop, receiver_loop
        client_machine, server_machine = sender_machine, receiver_machine
    else:
        client_loop, server_loop = receiver_loop, sender_loop
        client_machine, server_machine = receiver_machine, sender_machine

    return SimTransferResult(
        client_trace=client_machine.trace,
        server_trace=server_machine.trace,
        client_counters=client_loop.counters,
        server_counters=server_loop.counters,
        destination=destination,
        network=network,
        client_error=client_loop.error,
        server_error=server_loop.error,
        receiver_stats=getattr(receiver_engine, "stats", None),
    )
