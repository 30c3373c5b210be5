"""Machine behaviour: scripted flows, purity, lifecycles, hostile events."""

import copy

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdfs.errors import InvariantViolation
from xdfs.fsm import (
    AckLifecycle,
    BroadcastEof,
    ChannelConnected,
    CloseSession,
    DiskReady,
    EndOfFile,
    ExceptionReceived,
    HeaderReceived,
    IllegalTransition,
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
    advance_lifecycle,
    client_download_machine,
    client_upload_machine,
    server_download_machine,
    server_upload_machine,
    step_server_download,
    SERVER_DOWNLOAD,
    ServerDownloadState,
    ClientDownloadState,
)
from xdfs.piod import BlockScheduler, SessionContext
from xdfs.wire import (
    BlockDescriptor,
    ChannelEvent,
    ChannelHeader,
    Direction,
    ExceptionHeader,
    ExceptionStatus,
    NegotiationRequest,
    SessionId,
    OK_EXCEPTION,
)

SID = SessionId(b"\x02" * 16)
BS = 4096


def request(i, n, direction=Direction.DOWNLOAD):
    return NegotiationRequest(
        session_id=SID,
        direction=direction,
        channel_index=i,
        channel_count=n,
        remote_file_name="f.bin",
        block_size=BS,
    )


def ctx_for(n, file_size):
    return SessionContext(n, file_size, BS, BlockScheduler(file_size, BS))


def register(machine, ctx, n, direction=Direction.DOWNLOAD):
    for i in range(n):
        machine.feed(ctx, ChannelConnected(i))
        machine.feed(ctx, NegotiationReceived(request(i, n, direction)))


class TestServerRegistration:
    def test_single_channel_fast_path(self):
        m = server_download_machine()
        ctx = ctx_for(1, BS)
        m.feed(ctx, ChannelConnected(0))
        assert m.phase is ServerDownloadState.SESSION_LOOKUP
        m.feed(ctx, NegotiationReceived(request(0, 1)))
        assert m.phase is ServerDownloadState.CHANNELS_READY

    def test_waits_for_remaining_channels(self):
        # with n=4 the machine must hold at RegisterChannel until the 4th join
        m = server_download_machine()
        ctx = ctx_for(4, BS)
        for i in range(3):
            m.feed(ctx, ChannelConnected(i))
            m.feed(ctx, NegotiationReceived(request(i, 4)))
            assert m.phase is ServerDownloadState.REGISTER_CHANNEL
        m.feed(ctx, ChannelConnected(3))
        m.feed(ctx, NegotiationReceived(request(3, 4)))
        assert m.phase is ServerDownloadState.CHANNELS_READY

    def test_dispatch_entry_fills_write_list(self):
        m = server_download_machine()
        ctx = ctx_for(2, BS)
        register(m, ctx, 2)
        actions = m.feed(ctx, DiskReady())
        assert actions == [MoveToWriteList(0), MoveToWriteList(1)]
        assert m.phase is ServerDownloadState.DISPATCH

    def test_mismatched_channel_count_is_illegal(self):
        m = server_download_machine()
        ctx = ctx_for(2, BS)
        m.feed(ctx, ChannelConnected(0))
        with pytest.raises(IllegalTransition):
            m.feed(ctx, NegotiationReceived(request(0, 3)))


class TestSenderPlane:
    def _dispatching(self, n=1, blocks=3):
        m = server_download_machine()
        ctx = ctx_for(n, blocks * BS)
        register(m, ctx, n)
        m.feed(ctx, DiskReady())
        return m, ctx

    def test_write_ready_emits_read_header_payload_marknotdone(self):
        m, ctx = self._dispatching()
        actions = m.feed(ctx, WriteReady(0))
        block = BlockDescriptor(0, BS)
        assert actions == [
            ReadBlockFromDisk(block),
            SendHeader(0, ChannelHeader(ChannelEvent.XFTSM, block)),
            SendBlockPayload(0, block),
            MoveToReadList(0, AckLifecycle.NOT_DONE),
        ]
        assert m.state.lifecycles[0] is AckLifecycle.NOT_DONE

    def test_ok_ack_moves_channel_back_to_write_list(self):
        m, ctx = self._dispatching()
        actions = m.feed(ctx, WriteReady(0))
        ctx.scheduler.next_block()  # runtime consumes the issued block
        actions = m.feed(ctx, ExceptionReceived(0, OK_EXCEPTION))
        assert actions == [MoveToWriteList(0)]
        assert m.state.lifecycles[0] is AckLifecycle.DONE

    def test_error_ack_routes_to_error_with_close(self):
        m, ctx = self._dispatching()
        m.feed(ctx, WriteReady(0))
        ctx.scheduler.next_block()
        actions = m.feed(
            ctx,
            ExceptionReceived(0, ExceptionHeader(ExceptionStatus.ERROR, 5, "disk full")),
        )
        assert actions == [CloseSession()]
        assert m.phase is ServerDownloadState.ERROR

    def test_every_error_ack_reaches_error_from_both_rest_states(self):
        # enumerate the sender transition table: ExceptionReceived(Error)
        # must land in Error wherever it is legal
        for phase_name in ("Dispatch", "CollectAcks"):
            m, ctx = self._dispatching(n=2, blocks=2)
            m.feed(ctx, WriteReady(0))
            ctx.scheduler.next_block()
            m.feed(ctx, WriteReady(1))
            ctx.scheduler.next_block()
            if phase_name == "CollectAcks":
                m.feed(ctx, EndOfFile())
                assert m.phase.value == "CollectAcks"
            m.feed(
                ctx,
                ExceptionReceived(1, ExceptionHeader(ExceptionStatus.ERROR, 9, "x")),
            )
            assert m.phase.value == "Error"

    def test_eof_with_outstanding_acks_collects_then_terminates(self):
        m, ctx = self._dispatching(n=1, blocks=1)
        m.feed(ctx, WriteReady(0))
        ctx.scheduler.next_block()
        m.feed(ctx, EndOfFile())
        assert m.phase is ServerDownloadState.COLLECT_ACKS
        actions = m.feed(ctx, ExceptionReceived(0, OK_EXCEPTION))
        assert actions == [BroadcastEof(ChannelEvent.EOFT), CloseSession()]
        assert m.phase is ServerDownloadState.TERMINATE

    def test_eof_with_everything_acked_terminates_directly(self):
        m, ctx = self._dispatching(n=1, blocks=1)
        m.feed(ctx, WriteReady(0))
        ctx.scheduler.next_block()
        m.feed(ctx, ExceptionReceived(0, OK_EXCEPTION))
        actions = m.feed(ctx, EndOfFile())
        assert actions == [BroadcastEof(ChannelEvent.EOFT), CloseSession()]
        assert m.phase is ServerDownloadState.TERMINATE

    def test_exhausted_write_ready_parks_channel(self):
        m, ctx = self._dispatching(n=2, blocks=1)
        m.feed(ctx, WriteReady(0))
        ctx.scheduler.next_block()
        actions = m.feed(ctx, WriteReady(1))
        assert actions == [MoveToReadList(1, AckLifecycle.FIRST_TIME)]

    def test_unexpected_ack_is_illegal(self):
        m, ctx = self._dispatching()
        with pytest.raises(IllegalTransition):
            m.feed(ctx, ExceptionReceived(0, OK_EXCEPTION))


class TestReceiverPlane:
    def _dispatching(self, n=1):
        m = client_download_machine()
        ctx = SessionContext(n, 0, BS, None)
        for i in range(n):
            m.feed(ctx, ChannelConnected(i))
        m.feed(ctx, DiskReady())
        return m, ctx

    def test_block_header_writes_and_acks(self):
        m, ctx = self._dispatching(n=3)
        block = BlockDescriptor(0, 1 << 20)
        payload = b"\x01" * (1 << 20)
        actions = m.feed(
            ctx, HeaderReceived(2, ChannelHeader(ChannelEvent.XFTSM, block), payload)
        )
        assert isinstance(actions[0], WriteBlockToDisk)
        assert actions[0].request.offset == 0
        assert actions[1] == SendException(2, OK_EXCEPTION)

    def test_eoft_with_no_pending_writes_terminates(self):
        m, ctx = self._dispatching()
        actions = m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.EOFT)))
        assert actions == [CloseSession()]
        assert m.phase is ClientDownloadState.TERMINATE

    def test_eoft_waits_for_disk_drain(self):
        from xdfs.fsm import BlockIoDone

        m, ctx = self._dispatching()
        block = BlockDescriptor(0, 4)
        m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.XFTSM, block), b"abcd"))
        m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.EOFT)))
        assert m.phase is ClientDownloadState.CHECK_EOF
        actions = m.feed(ctx, BlockIoDone(block))
        assert actions == [CloseSession()]
        assert m.phase is ClientDownloadState.TERMINATE

    def test_eofr_marks_channel_reusable_and_data_resumes(self):
        m, ctx = self._dispatching(n=2)
        m.feed(ctx, HeaderReceived(1, ChannelHeader(ChannelEvent.EOFR)))
        assert 1 in m.state.idle
        block = BlockDescriptor(0, 4)
        m.feed(ctx, HeaderReceived(1, ChannelHeader(ChannelEvent.CONM, block), b"wxyz"))
        assert 1 not in m.state.idle

    def test_path_mode_switch_is_refused_with_error_exception(self):
        m, ctx = self._dispatching()
        actions = m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.XPATHM)))
        assert len(actions) == 1
        exc = actions[0].exception
        assert exc.status is ExceptionStatus.ERROR
        assert "path mode" in exc.message

    def test_zero_copy_event_is_refused(self):
        m, ctx = self._dispatching()
        actions = m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.ZXDFS)))
        assert actions[0].exception.status is ExceptionStatus.ERROR

    def test_noop_is_silent(self):
        m, ctx = self._dispatching()
        assert m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.NOOP))) == []

    def test_wrong_direction_data_header_is_illegal(self):
        m, ctx = self._dispatching()
        block = BlockDescriptor(0, 4)
        with pytest.raises(IllegalTransition):
            m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.XFTSMU, block), b"aaaa"))

    def test_peer_close_before_eof_is_fatal(self):
        m, ctx = self._dispatching(n=2)
        actions = m.feed(ctx, PeerClosed(1))
        assert actions == [CloseSession()]
        assert m.phase is ClientDownloadState.ERROR


class TestClientUpload:
    def test_stays_in_collect_acks_until_last_ok(self):
        m = client_upload_machine()
        ctx = ctx_for(2, 2 * BS)
        for i in range(2):
            m.feed(ctx, ChannelConnected(i))
        m.feed(ctx, DiskReady())
        for i in range(2):
            m.feed(ctx, WriteReady(i))
            ctx.scheduler.next_block()
        m.feed(ctx, ExceptionReceived(0, OK_EXCEPTION))
        m.feed(ctx, EndOfFile())
        assert m.phase.value == "CollectAcks"  # channel 1 still NotDone
        actions = m.feed(ctx, ExceptionReceived(1, OK_EXCEPTION))
        assert actions == [BroadcastEof(ChannelEvent.EOFT), CloseSession()]
        assert m.phase.value == "Terminate"

    def test_upload_headers_carry_the_upload_event(self):
        m = client_upload_machine()
        ctx = ctx_for(1, BS)
        m.feed(ctx, ChannelConnected(0))
        m.feed(ctx, DiskReady())
        actions = m.feed(ctx, WriteReady(0))
        assert actions[1].header.event is ChannelEvent.XFTSMU


class TestServerUpload:
    def test_out_of_order_blocks_write_at_their_offsets(self):
        m = server_upload_machine()
        ctx = SessionContext(2, 2 * BS, BS, None)
        for i in range(2):
            m.feed(ctx, ChannelConnected(i))
            m.feed(ctx, NegotiationReceived(request(i, 2, Direction.UPLOAD)))
        m.feed(ctx, DiskReady())
        late = BlockDescriptor(BS, BS)
        early = BlockDescriptor(0, BS)
        a1 = m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.XFTSMU, late), b"B" * BS))
        a2 = m.feed(ctx, HeaderReceived(1, ChannelHeader(ChannelEvent.XFTSMU, early), b"A" * BS))
        assert a1[0].request.offset == BS
        assert a2[0].request.offset == 0

    def test_reassembly_is_arrival_order_independent(self):
        # every permutation of block arrivals rebuilds the same file image
        import itertools

        blocks = [
            (BlockDescriptor(i * BS, BS), bytes([65 + i]) * BS) for i in range(3)
        ]
        images = set()
        for order in itertools.permutations(range(3)):
            m = server_upload_machine()
            ctx = SessionContext(1, 3 * BS, BS, None)
            m.feed(ctx, ChannelConnected(0))
            m.feed(ctx, NegotiationReceived(request(0, 1, Direction.UPLOAD)))
            m.feed(ctx, DiskReady())
            image = bytearray(3 * BS)
            for idx in order:
                block, payload = blocks[idx]
                actions = m.feed(
                    ctx,
                    HeaderReceived(0, ChannelHeader(ChannelEvent.XFTSMU, block), payload),
                )
                req_out = actions[0].request
                image[req_out.offset:req_out.offset + len(req_out.data)] = req_out.data
            images.add(bytes(image))
        assert len(images) == 1
        assert images.pop() == b"A" * BS + b"B" * BS + b"C" * BS


class TestPurityAndTerminals:
    def test_step_is_pure(self):
        m = server_download_machine()
        ctx = ctx_for(1, BS)
        register(m, ctx, 1)
        m.feed(ctx, DiskReady())
        state = copy.deepcopy(m.state)
        ev = WriteReady(0)
        out1 = step_server_download(m.state, ctx, ev)
        out2 = step_server_download(m.state, ctx, ev)
        assert out1 == out2
        assert m.state == state  # inputs not mutated

    def test_terminals_are_absorbing(self):
        m = client_download_machine()
        ctx = SessionContext(1, 0, BS, None)
        m.feed(ctx, ChannelConnected(0))
        m.feed(ctx, DiskReady())
        m.feed(ctx, HeaderReceived(0, ChannelHeader(ChannelEvent.EOFT)))
        assert m.terminal
        for ev in (DiskReady(), PeerClosed(0), WriteReady(0)):
            with pytest.raises(IllegalTransition):
                m.feed(ctx, ev)

    def test_error_is_absorbing(self):
        m = server_download_machine()
        ctx = ctx_for(1, BS)
        register(m, ctx, 1)
        m.feed(ctx, PeerClosed(0))
        assert m.phase is ServerDownloadState.ERROR
        with pytest.raises(IllegalTransition):
            m.feed(ctx, DiskReady())


class TestAckLifecycle:
    def test_legal_moves(self):
        assert advance_lifecycle(AckLifecycle.FIRST_TIME, AckLifecycle.NOT_DONE)
        assert advance_lifecycle(AckLifecycle.NOT_DONE, AckLifecycle.DONE)
        assert advance_lifecycle(AckLifecycle.DONE, AckLifecycle.NOT_DONE)

    @pytest.mark.parametrize(
        "bad",
        [
            (AckLifecycle.FIRST_TIME, AckLifecycle.DONE),
            (AckLifecycle.DONE, AckLifecycle.FIRST_TIME),
            (AckLifecycle.NOT_DONE, AckLifecycle.FIRST_TIME),
        ],
    )
    def test_illegal_moves(self, bad):
        with pytest.raises(InvariantViolation):
            advance_lifecycle(*bad)

    @given(st.lists(st.sampled_from(["send", "ack"]), max_size=60))
    @settings(max_examples=100, deadline=None)
    def test_random_walks_stay_legal(self, ops):
        # drive a single-channel sender with an arbitrary send/ack order;
        # every surviving trace keeps the lifecycle inside the legal moves
        m = server_download_machine()
        ctx = ctx_for(1, 1 << 20)  # plenty of blocks
        register(m, ctx, 1)
        m.feed(ctx, DiskReady())
        for op in ops:
            ev = WriteReady(0) if op == "send" else ExceptionReceived(0, OK_EXCEPTION)
            before = m.state.lifecycles[0]
            try:
                actions = m.feed(ctx, ev)
            except IllegalTransition:
                continue
            for action in actions:
                if isinstance(action, SendBlockPayload):
                    ctx.scheduler.next_block()
            after = m.state.lifecycles[0]
            if after is not before:
                advance_lifecycle(before, after)  # raises if illegal


class TestDeclaredEnvelopes:
    def test_actions_and_successors_stay_inside_declared_sets(self):
        # run a real transfer and check every recorded transition against
        # the table's declared emits/goes sets
        import os

        from xdfs.harness import run_sim_transfer

        payload = os.urandom(7 * BS + 5)
        result = run_sim_transfer(Direction.UPLOAD, payload, n=3, block_size=BS)
        from xdfs.fsm import CLIENT_UPLOAD, SERVER_UPLOAD

        for spec, trace in (
            (CLIENT_UPLOAD, result.client_trace),
            (SERVER_UPLOAD, result.server_trace),
        ):
            for step in trace.steps:
                phase = spec.phases(step.state_before)
                rule = spec.table[(phase, type(step.event))]
                for action in step.actions:
                    assert type(action) in rule.emits, (
                        f"{spec.name}: {type(action).__name__} not declared for "
                        f"{step.state_before}/{type(step.event).__name__}"
                    )
                assert step.state_after in rule.goes | {step.state_before}
