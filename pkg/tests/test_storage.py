"""Storage: positional streams, engines, ring buffer, coalescing."""

import os
import random
import threading

import pytest

from conftest import contiguous_runs
from xdfs.errors import InvariantViolation
from xdfs.storage import (
    AsyncDiskEngine,
    BufferClosed,
    BufferStream,
    CoalesceStats,
    DiskEngineMode,
    Mode,
    RingBuffer,
    SyncDiskEngine,
    WriteRequest,
    flush_coalesced,
    null_stream,
    open_stream,
    read_block,
    write_block,
    zero_stream,
)
from xdfs.wire import BlockDescriptor


class TestFileStream:
    def test_open_read_knows_size(self, tmp_path):
        path = tmp_path / "ten.bin"
        path.write_bytes(b"0123456789")
        with open_stream(str(path), Mode.READ) as fs:
            assert fs.size == 10

    def test_open_missing_is_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            open_stream(str(tmp_path / "nope"), Mode.READ)

    def test_unicode_path_round_trip(self, tmp_path):
        path = tmp_path / "данные-数据.bin"
        with open_stream(str(path), Mode.WRITE_CREATE) as fs:
            fs.write_at(0, b"abc")
        with open_stream(str(path), Mode.READ) as fs:
            assert fs.read_at(0, 3) == b"abc"

    def test_write_create_truncates(self, tmp_path):
        path = tmp_path / "t.bin"
        path.write_bytes(b"old content")
        with open_stream(str(path), Mode.WRITE_CREATE) as fs:
            fs.write_at(0, b"n")
        assert path.read_bytes() == b"n"

    def test_out_of_order_positional_writes(self, tmp_path):
        path = tmp_path / "o.bin"
        with open_stream(str(path), Mode.WRITE_CREATE) as fs:
            fs.write_at(1 << 20, b"far")
            fs.write_at(0, b"near")
        data = path.read_bytes()
        assert data[:4] == b"near"
        assert data[1 << 20:(1 << 20) + 3] == b"far"

    def test_read_only_stream_refuses_writes(self, tmp_path):
        path = tmp_path / "r.bin"
        path.write_bytes(b"x")
        with open_stream(str(path), Mode.READ) as fs:
            with pytest.raises(Exception):
                fs.write_at(0, b"y")


class TestReadBlock:
    def test_tail_clamp(self, tmp_path):
        path = tmp_path / "ten.bin"
        path.write_bytes(b"0123456789")
        with open_stream(str(path), Mode.READ) as fs:
            assert read_block(fs, BlockDescriptor(8, 4)) == b"89"

    def test_full_read(self, tmp_path):
        path = tmp_path / "ten.bin"
        path.write_bytes(b"0123456789")
        with open_stream(str(path), Mode.READ) as fs:
            assert read_block(fs, BlockDescriptor(0, 10)) == b"0123456789"

    def test_offset_at_eof_gives_empty(self, tmp_path):
        path = tmp_path / "ten.bin"
        path.write_bytes(b"0123456789")
        with open_stream(str(path), Mode.READ) as fs:
            assert read_block(fs, BlockDescriptor(10, 4)) == b""

    def test_matches_slice_oracle_on_random_probes(self, tmp_path):
        rng = random.Random(7)
        reference = rng.randbytes(100_000)
        path = tmp_path / "ref.bin"
        path.write_bytes(reference)
        with open_stream(str(path), Mode.READ) as fs:
            for _ in range(10_000):
                offset = rng.randrange(0, len(reference) + 100)
                length = rng.randint(1, 5000)
                want = reference[offset:offset + length]
                assert read_block(fs, BlockDescriptor(offset, length)) == want


class TestPseudoStreams:
    def test_zero_stream_reads_zeroes_then_eof(self):
        zs = zero_stream(5)
        assert zs.read_at(0, 10) == b"\x00" * 5
        assert zs.read_at(5, 10) == b""

    def test_null_stream_counts_bytes(self):
        ns = null_stream()
        for _ in range(3):
            ns.write_at(0, b"\x00" * (1 << 20))
        assert ns.bytes_accepted == 3 << 20


class TestRingBuffer:
    def test_fifo_and_capacity(self):
        ring = RingBuffer(capacity=3)
        for i in range(3):
            assert ring.try_put(WriteRequest(i, b"x"))
        assert not ring.try_put(WriteRequest(3, b"x"))
        assert len(ring) == 3
        batch = ring.take_batch()
        assert [w.offset for w in batch] == [0, 1, 2]

    def test_put_blocks_until_space(self):
        ring = RingBuffer(capacity=1)
        ring.put(WriteRequest(0, b"a"))

        def consume():
            ring.take_batch(1)

        timer = threading.Timer(0.05, consume)
        timer.start()
        ring.put(WriteRequest(1, b"b"), timeout=2)
        timer.join()

    def test_closed_ring_raises(self):
        ring = RingBuffer(2)
        ring.close()
        with pytest.raises(BufferClosed):
            ring.put(WriteRequest(0, b"x"))

    def test_spsc_stress_preserves_order_and_bounds(self):
        ring = RingBuffer(capacity=8)
        total = 5000
        consumed = []
        peak = []

        def producer():
            for i in range(total):
                ring.put(WriteRequest(i, b"p"))
            ring.close()

        def consumer():
            while True:
                batch = ring.take_batch(timeout=1)
                peak.append(len(ring) + len(batch))
                if not batch and ring.closed:
                    return
                consumed.extend(w.offset for w in batch)

        threads = [threading.Thread(target=producer), threading.Thread(target=consumer)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=30)
        assert consumed == list(range(total))
        assert max(peak) <= 8


class TestCoalescing:
    def _drain(self, batch, tmp_path):
        ring = RingBuffer(capacity=len(batch) + 1)
        for request in batch:
            ring.put(request)
        fs = BufferStream()
        stats = CoalesceStats()
        count = flush_coalesced(ring, fs, stats)
        return count, stats, fs

    def test_fully_contiguous_run_is_one_write(self, tmp_path):
        k = 4096
        batch = [WriteRequest(0, b"a" * k), WriteRequest(k, b"b" * k), WriteRequest(2 * k, b"c" * k)]
        count, stats, fs = self._drain(batch, tmp_path)
        assert count == 3
        assert stats.repositionings == 1
        assert fs.getvalue() == b"a" * k + b"b" * k + b"c" * k

    def test_two_separated_runs(self, tmp_path):
        k = 4096
        batch = [WriteRequest(0, b"a" * k), WriteRequest(1 << 20, b"b" * k)]
        count, stats, _ = self._drain(batch, tmp_path)
        assert count == 2
        assert stats.repositionings == 2

    def test_repositionings_match_run_count_oracle(self, tmp_path):
        rng = random.Random(11)
        for _ in range(300):
            offsets = rng.sample(range(0, 400), rng.randint(1, 30))
            batch = [WriteRequest(o * 10, b"z" * 10) for o in offsets]
            count, stats, _ = self._drain(batch, tmp_path)
            oracle = contiguous_runs([(w.offset, len(w.data)) for w in batch])
            assert stats.repositionings == oracle
            assert count == len(batch)

    def test_vectored_write_lands_on_real_files_too(self, tmp_path):
        path = tmp_path / "v.bin"
        with open_stream(str(path), Mode.WRITE_CREATE) as fs:
            ring = RingBuffer(8)
            ring.put(WriteRequest(4, b"5678"))
            ring.put(WriteRequest(0, b"1234"))
            assert flush_coalesced(ring, fs) == 2
        assert path.read_bytes() == b"12345678"


def _random_disjoint_requests(rng, count, chunk=64):
    offsets = rng.sample(range(count * 4), count)
    return [
        WriteRequest(o * chunk, bytes([o % 251]) * rng.randint(1, chunk))
        for o in offsets
    ]


class TestEngines:
    def test_sync_write_then_read_back(self, tmp_path):
        path = tmp_path / "s.bin"
        fs = open_stream(str(path), Mode.WRITE_CREATE)
        engine = SyncDiskEngine(fs)
        token = write_block(engine, WriteRequest(0, b"abcd"))
        assert token.done()
        engine.close()
        fs.close()
        assert path.read_bytes() == b"abcd"

    def test_write_block_token_resolves_on_async_engine(self):
        fs = BufferStream()
        engine = AsyncDiskEngine(fs, capacity=4)
        token = write_block(engine, WriteRequest(4, b"late"))
        token.result(timeout=5)
        engine.close()
        assert fs.getvalue() == b"\x00\x00\x00\x00late"

    def test_async_random_requests_match_image_oracle(self, tmp_path):
        rng = random.Random(13)
        requests = _random_disjoint_requests(rng, 1000)
        image = bytearray(max(w.end for w in requests))
        for w in requests:
            image[w.offset:w.end] = w.data  # independent in-memory oracle

        path = tmp_path / "a.bin"
        fs = open_stream(str(path), Mode.WRITE_CREATE)
        engine = AsyncDiskEngine(fs, capacity=16)
        tokens = [engine.write(w) for w in requests]
        engine.flush()
        for token in tokens:
            assert token.done() and token.exception() is None
        engine.close()
        fs.truncate(len(image))
        fs.close()
        assert path.read_bytes() == bytes(image)

    def test_async_batches_respect_run_count_oracle(self, tmp_path):
        rng = random.Random(17)
        requests = _random_disjoint_requests(rng, 500)
        fs = BufferStream()
        engine = AsyncDiskEngine(fs, capacity=32, record_batches=True)
        for w in requests:
            engine.write(w)
        engine.flush()
        engine.close()
        assert engine.stats.batch_log, "no batches recorded"
        for batch, runs in engine.stats.batch_log:
            assert runs == contiguous_runs(list(batch))

    def test_write_after_close_is_buffer_closed(self):
        engine = AsyncDiskEngine(BufferStream())
        engine.close()
        with pytest.raises(BufferClosed):
            engine.write(WriteRequest(0, b"x"))

    def test_async_engine_adds_exactly_one_thread(self):
        before = threading.active_count()
        engine = AsyncDiskEngine(BufferStream())
        assert threading.active_count() == before + 1
        assert engine.extra_thread_count == 1
        engine.close()
        assert threading.active_count() == before

    def test_sync_engine_adds_no_threads(self):
        before = threading.active_count()
        engine = SyncDiskEngine(BufferStream())
        assert threading.active_count() == before
        assert engine.extra_thread_count == 0
        engine.close()

    def test_io_failure_surfaces_at_token(self):
        class ExplodingStream(BufferStream):
            def writev_at(self, offset, buffers):
                raise OSError("disk detonated")

        engine = AsyncDiskEngine(ExplodingStream(), capacity=4)
        token = engine.write(WriteRequest(0, b"x"))
        with pytest.raises(OSError):
            token.result(timeout=5)
        engine.close()
