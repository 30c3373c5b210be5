"""Shared fixtures, strategies and independent oracles."""

from __future__ import annotations

import random
import string

import pytest
from hypothesis import strategies as st

from xdfs.wire import (
    BlockDescriptor,
    ChannelEvent,
    ChannelHeader,
    Direction,
    ExceptionHeader,
    ExceptionStatus,
    NegotiationReply,
    NegotiationRequest,
    ReplyStatus,
    SessionId,
    BLOCK_EVENTS,
    MAX_BLOCK_SIZE,
    MIN_BLOCK_SIZE,
)


def assert_partition(descriptors, total: int) -> None:
    """Interval-union oracle: descriptors tile [0, total) exactly.

    Independent of the scheduler: sort by offset and scan for gaps,
    overlaps and coverage.
    """
    if total == 0:
        assert not descriptors, "blocks issued for an empty file"
        return
    ordered = sorted(descriptors, key=lambda d: d.offset)
    cursor = 0
    for d in ordered:
        assert d.offset == cursor, f"gap or overlap at offset {cursor} (got {d.offset})"
        cursor = d.offset + d.length
    assert cursor == total, f"coverage ends at {cursor}, expected {total}"


def contiguous_runs(batch) -> int:
    """Run-count oracle: sort (offset, length) pairs and count breaks."""
    if not batch:
        return 0
    ordered = sorted(batch)
    runs = 1
    end = ordered[0][0] + ordered[0][1]
    for offset, length in ordered[1:]:
        if offset != end:
            runs += 1
        end = offset + length
    return runs


# -- hypothesis strategies ---------------------------------------------------

session_ids = st.binary(min_size=16, max_size=16).filter(
    lambda b: b != b"\x00" * 16
).map(SessionId)

block_descriptors = st.tuples(
    st.integers(min_value=0, max_value=(1 << 53)),
    st.integers(min_value=1, max_value=0xFFFFFFFF),
).map(lambda t: BlockDescriptor(*t))

channel_headers = st.one_of(
    st.sampled_from(
        [e for e in ChannelEvent if e not in BLOCK_EVENTS]
    ).map(ChannelHeader),
    st.tuples(st.sampled_from(sorted(BLOCK_EVENTS)), block_descriptors).map(
        lambda t: ChannelHeader(*t)
    ),
)

exception_headers = st.one_of(
    st.just(ExceptionHeader(ExceptionStatus.OK)),
    st.tuples(
        st.integers(min_value=0, max_value=0xFFFF),
        st.text(max_size=200),
    ).map(lambda t: ExceptionHeader(ExceptionStatus.ERROR, t[0], t[1])),
)

_texts = st.text(max_size=80)


@st.composite
def negotiation_requests(draw):
    count = draw(st.integers(min_value=1, max_value=64))
    return NegotiationRequest(
        session_id=draw(session_ids),
        direction=draw(st.sampled_from(Direction)),
        channel_index=draw(st.integers(min_value=0, max_value=count - 1)),
        channel_count=count,
        remote_file_name=draw(st.text(min_size=1, max_size=120)),
        local_file_name=draw(_texts),
        tcp_window_size=draw(st.integers(min_value=0, max_value=(1 << 40))),
        block_size=draw(st.integers(min_value=MIN_BLOCK_SIZE, max_value=MAX_BLOCK_SIZE)),
        credentials=draw(st.binary(max_size=64)),
        extended_mode=draw(
            st.dictionaries(st.text(max_size=20), st.text(max_size=40), max_size=4)
        ),
    )


negotiation_replies = st.one_of(
    st.tuples(session_ids, st.integers(min_value=0, max_value=(1 << 60))).map(
        lambda t: NegotiationReply(ReplyStatus.ACCEPTED, t[0], file_size=t[1])
    ),
    st.tuples(session_ids, st.text(min_size=1, max_size=120)).map(
        lambda t: NegotiationReply(ReplyStatus.REJECTED, t[0], reason=t[1])
    ),
)


# -- fast plain-random generators (bulk round-trip runs) ----------------------


def random_request(rng: random.Random) -> NegotiationRequest:
    count = rng.randint(1, 32)
    alphabet = string.ascii_letters + "/._-αβγδ данные 数据"
    name = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 40)))
    ext = {
        f"k{j}": "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 10)))
        for j in range(rng.randint(0, 3))
    }
    return NegotiationRequest(
        session_id=SessionId((rng.getrandbits(128) | 1).to_bytes(16, "little")),
        direction=rng.choice(list(Direction)),
        channel_index=rng.randrange(count),
        channel_count=count,
        remote_file_name=name,
        local_file_name=name[::-1],
        tcp_window_size=rng.randrange(1 << 30),
        block_size=rng.randint(MIN_BLOCK_SIZE, 1 << 24),
        credentials=rng.randbytes(rng.randint(0, 32)),
        extended_mode=ext,
    )


def random_channel_header(rng: random.Random) -> ChannelHeader:
    event = rng.choice(list(ChannelEvent))
    if event in BLOCK_EVENTS:
        offset = rng.randrange(1 << 50)
        length = rng.randint(1, 0xFFFFFFFF)
        return ChannelHeader(event, BlockDescriptor(offset, length))
    return ChannelHeader(event)


def random_exception(rng: random.Random) -> ExceptionHeader:
    if rng.random() < 0.3:
        return ExceptionHeader(ExceptionStatus.OK)
    msg = "".join(rng.choice(string.printable[:80] + "é漢") for _ in range(rng.randint(0, 60)))
    return ExceptionHeader(ExceptionStatus.ERROR, rng.randrange(1 << 16), msg)


def random_reply(rng: random.Random) -> NegotiationReply:
    sid = SessionId((rng.getrandbits(128) | 1).to_bytes(16, "little"))
    if rng.random() < 0.5:
        return NegotiationReply(ReplyStatus.ACCEPTED, sid, file_size=rng.randrange(1 << 50))
    return NegotiationReply(ReplyStatus.REJECTED, sid, reason="r" * rng.randint(1, 30))


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240811)
