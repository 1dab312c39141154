"""Mapping of video frames onto transport streams, and client-side reassembly.

Server and client are application objects driven from the event loop: the
server pushes frames as fast as flow control admits them, the client drains
streams after every event and turns byte ranges back into frames.
"""

from __future__ import annotations

import enum
import itertools
import logging
import struct
from collections import deque
from dataclasses import dataclass

from . import fec
from .errors import ControlStreamCorrupt, FecError, NegotiationError, Truncated
from .fec import FecParams
from .media import Manifest, VideoTrace, frame_payloads
from .transport import CONTROL_STREAM, RELIABLE, UNRELIABLE, Connection

log = logging.getLogger(__name__)


class ProtocolMode(str, enum.Enum):
    TCP_LIKE = "tcp_like"
    QUIC_LIKE = "quic_like"
    CLIPSTREAM = "clipstream"
    CLIPSTREAM_FEC = "clipstream_fec"

    @property
    def partially_reliable(self) -> bool:
        return self in (ProtocolMode.CLIPSTREAM, ProtocolMode.CLIPSTREAM_FEC)

    def __str__(self) -> str:
        return self.value


INTACT = "intact"
RECOVERED = "recovered"
CORRUPTED = "corrupted"
MISSING = "missing"
OUTCOMES = (INTACT, RECOVERED, CORRUPTED, MISSING)

_TYPE_CODES = {"I": 0, "P": 1, "B": 2}
_CODE_TYPES = {v: k for k, v in _TYPE_CODES.items()}
CONTROL_RECORD = struct.Struct("!IBIQIBBHI")
CONTROL_RECORD_SIZE = CONTROL_RECORD.size  # 29

RELIABLE_DATA_STREAM = 2
UNRELIABLE_DATA_STREAM = 1


@dataclass(frozen=True, slots=True)
class ControlRecord:
    video_frame_index: int
    frame_type: str
    stream_id: int
    offset: int
    length: int
    fec: FecParams | None
    payload_length: int


def encode_control_record(rec: ControlRecord) -> bytes:
    if rec.fec is None:
        k = m = shard = 0
    else:
        k, m, shard = rec.fec.k, rec.fec.m, rec.fec.shard_size
    try:
        return CONTROL_RECORD.pack(rec.video_frame_index, _TYPE_CODES[rec.frame_type], rec.stream_id,
                                   rec.offset, rec.length, k, m, shard, rec.payload_length)
    except (KeyError, struct.error) as exc:
        raise ValueError(f"cannot encode {rec!r}: {exc}") from None


def decode_control_record(buf) -> ControlRecord:
    if len(buf) < CONTROL_RECORD_SIZE:
        raise Truncated(f"control record needs {CONTROL_RECORD_SIZE} B, got {len(buf)}")
    idx, code, sid, off, length, k, m, shard, plen = CONTROL_RECORD.unpack_from(buf, 0)
    if code not in _CODE_TYPES:
        raise ControlStreamCorrupt(f"frame type code {code}")
    params = None
    if k:
        try:
            params = FecParams(k, m, shard)
        except (ValueError, FecError) as exc:
            raise ControlStreamCorrupt(f"bad fec parameters: {exc}") from None
    return ControlRecord(idx, _CODE_TYPES[code], sid, off, length, params, plen)


@dataclass(frozen=True, slots=True)
class FrameStatus:
    index: int
    outcome: str
    complete_time: float  # us; math.inf when never finalized
    reliable: bool = True  # whether playback must wait for this frame


# per-process cache of coded P/B frames, keyed by content identity and parity
_coded_cache: dict[tuple, bytes] = {}
_CODED_CACHE_LIMIT = 40_000


def _coded_frame(key: tuple, payload, params: FecParams) -> bytes:
    ck = key + (params.k, params.m, params.shard_size)
    coded = _coded_cache.get(ck)
    if coded is None:
        if len(_coded_cache) >= _CODED_CACHE_LIMIT:
            _coded_cache.clear()
        coded = fec.encode_payload(bytes(payload), params)
        _coded_cache[ck] = coded
    return coded


class VideoServer:
    def __init__(self, trace: VideoTrace, conn: Connection, mode: ProtocolMode, fec_mode: str = "static",
                 shard_size: int = 1200, payload_seed: int = 0):
        self.trace = trace
        self.conn = conn
        self.mode = ProtocolMode(mode)
        self.fec_mode = fec_mode
        self.shard_size = shard_size
        self.payload_seed = payload_seed
        self.payloads = frame_payloads(trace, payload_seed)
        # where each frame starts in the shared payload blob; identifies its content
        self._blob_offsets = list(itertools.accumulate((f.size for f in trace.frames), initial=0))
        self._pending: deque = deque()  # (stream_id, bytes-like, fin)
        self._next_frame = 0
        self._offsets: dict[int, int] = {}
        self._chunk_streams: dict[int, int] = {}
        self._started = False
        self.done = False
        self.records: list[ControlRecord] = []
        self.payload_bytes = {RELIABLE: 0, UNRELIABLE: 0}
        self.frame_counts = {RELIABLE: 0, UNRELIABLE: 0}
        self.coded_bytes = 0  # bytes written for coded frames, parity and padding included
        self.coded_payload_bytes = 0
        self.parity_bytes = 0

    def _start(self) -> None:
        conn = self.conn
        if self.mode.partially_reliable:
            if not conn.unreliable_supported:
                raise NegotiationError(f"{self.mode} needs unreliable streams, peer did not negotiate them")
            rel = conn.open_stream(RELIABLE)
            unrel = conn.open_stream(UNRELIABLE)
            assert rel == RELIABLE_DATA_STREAM and unrel == UNRELIABLE_DATA_STREAM
        elif self.mode is ProtocolMode.TCP_LIKE:
            conn.open_stream(RELIABLE)
        self._started = True

    def _stream_for(self, index: int, reliable: bool) -> int:
        if self.mode.partially_reliable:
            return RELIABLE_DATA_STREAM if reliable else UNRELIABLE_DATA_STREAM
        if self.mode is ProtocolMode.TCP_LIKE:
            return RELIABLE_DATA_STREAM
        chunk = index // self.trace.frames_per_chunk
        sid = self._chunk_streams.get(chunk)
        if sid is None:
            sid = self.conn.open_stream(RELIABLE)
            self._chunk_streams[chunk] = sid
        return sid

    def _enqueue_frame(self, i: int) -> None:
        frame = self.trace.frames[i]
        payload = self.payloads[i]
        reliable = frame.reliable
        sid = self._stream_for(i, reliable)
        params = None
        data = payload
        if self.mode is ProtocolMode.CLIPSTREAM_FEC and not reliable:
            k = fec.data_shards_needed(frame.size, self.shard_size)
            m = fec.parity_policy(k, min(1.0, max(0.0, self.conn.loss_estimate)), self.fec_mode)
            params = FecParams(k, m, self.shard_size)
            data = _coded_frame((self.trace.total_bytes, self.payload_seed, self._blob_offsets[i], frame.size),
                                payload, params)
            self.coded_bytes += len(data)
            self.coded_payload_bytes += frame.size
            self.parity_bytes += m * self.shard_size
        off = self._offsets.get(sid, 0)
        self._offsets[sid] = off + len(data)
        rec = ControlRecord(i, frame.frame_type, sid, off, len(data), params, frame.size)
        self.records.append(rec)
        cls = RELIABLE if reliable else UNRELIABLE
        self.payload_bytes[cls] += frame.size
        self.frame_counts[cls] += 1

        last = i == len(self.trace.frames) - 1
        if self.mode.partially_reliable:
            self._pending.append((CONTROL_STREAM, encode_control_record(rec), last))
            self._pending.append((sid, data, False))
            if last:
                for s in (RELIABLE_DATA_STREAM, UNRELIABLE_DATA_STREAM):
                    self._pending.append((s, b"", True))
        elif self.mode is ProtocolMode.QUIC_LIKE:
            chunk_end = (i + 1) % self.trace.frames_per_chunk == 0
            self._pending.append((sid, data, chunk_end or last))
        else:
            self._pending.append((sid, data, last))

    def serve(self, now: float) -> int:
        """Push as much as flow control admits; returns the number of frames fully handed over."""
        conn = self.conn
        if not conn.established or self.done:
            return self._next_frame
        if not self._started:
            self._start()
        pending = self._pending
        n_frames = len(self.trace.frames)
        while True:
            if not pending:
                if self._next_frame >= n_frames:
                    self.done = True
                    break
                self._enqueue_frame(self._next_frame)
                self._next_frame += 1
            sid, data, fin = pending[0]
            n = conn.stream_write(sid, data, fin)
            if n < len(data):
                if n:
                    pending[0] = (sid, memoryview(data)[n:], fin)
                break
            pending.popleft()
        return self._next_frame - (1 if pending else 0)


def manifest_records(manifest: Manifest, mode: ProtocolMode) -> list[ControlRecord]:
    """Frame layout implied by a manifest for modes without a control stream."""
    mode = ProtocolMode(mode)
    out = []
    offsets: dict[int, int] = {}
    fpc = manifest.frames_per_chunk
    for f in manifest.frames:
        i = f["index"]
        sid = RELIABLE_DATA_STREAM if mode is ProtocolMode.TCP_LIKE else 2 + 2 * (i // fpc)
        off = offsets.get(sid, 0)
        offsets[sid] = off + f["size"]
        out.append(ControlRecord(i, f["type"], sid, off, f["size"], None, f["size"]))
    return out


class _Cursor:
    __slots__ = ("stream_id", "reliable", "queue", "pos", "buf", "zeros")

    def __init__(self, stream_id: int):
        self.stream_id = stream_id
        self.reliable = not stream_id & 1
        self.queue: deque[ControlRecord] = deque()
        self.pos = 0  # stream offset of the next byte to read
        self.buf = bytearray()
        self.zeros: list[tuple[int, int]] = []


class VideoClient:
    """Reassembles frames from whatever the connection has delivered so far.

    ``expected`` (the original payloads) is optional; when given, every intact or
    recovered frame is checked byte for byte and ``mismatches`` counts failures.
    """

    def __init__(self, conn: Connection, mode: ProtocolMode, manifest: Manifest, expected=None):
        self.conn = conn
        self.mode = ProtocolMode(mode)
        self.manifest = manifest
        self.n_frames = len(manifest.frames)
        self.expected = expected
        self.statuses: list[FrameStatus | None] = [None] * self.n_frames
        self.final_count = 0
        self._emitted = 0
        self._ctrl = bytearray()
        self._next_record = 0
        self._cursors: dict[int, _Cursor] = {}
        self.mismatches = 0
        self.outcome_counts = dict.fromkeys(OUTCOMES, 0)
        if not self.mode.partially_reliable:
            for rec in manifest_records(manifest, self.mode):
                self._add_record(rec)
            self._next_record = self.n_frames

    @property
    def complete(self) -> bool:
        return self.final_count == self.n_frames

    def _add_record(self, rec: ControlRecord) -> None:
        cur = self._cursors.get(rec.stream_id)
        if cur is None:
            cur = self._cursors[rec.stream_id] = _Cursor(rec.stream_id)
        expect_off = cur.queue[-1].offset + cur.queue[-1].length if cur.queue else None
        if expect_off is not None and rec.offset != expect_off:
            raise ControlStreamCorrupt(f"frame {rec.video_frame_index} at offset {rec.offset}, expected {expect_off}")
        cur.queue.append(rec)

    def _read_control(self, now: float) -> None:
        data, _ = self.conn.stream_read(CONTROL_STREAM, 1 << 30, now)
        if not data:
            return
        self._ctrl += data
        n = len(self._ctrl) // CONTROL_RECORD_SIZE
        for j in range(n):
            rec = decode_control_record(memoryview(self._ctrl)[j * CONTROL_RECORD_SIZE:(j + 1) * CONTROL_RECORD_SIZE])
            if rec.video_frame_index != self._next_record or rec.video_frame_index >= self.n_frames:
                raise ControlStreamCorrupt(f"record for frame {rec.video_frame_index}, expected {self._next_record}")
            if rec.stream_id & 1 and not (self.mode.partially_reliable and self.conn.accepts_unreliable):
                raise ControlStreamCorrupt(f"record names unreliable stream {rec.stream_id}")
            if rec.fec is not None and rec.length != rec.fec.coded_length:
                raise ControlStreamCorrupt(f"coded length {rec.length} != {rec.fec.coded_length}")
            if rec.fec is None and rec.length != rec.payload_length:
                raise ControlStreamCorrupt("uncoded record length differs from payload length")
            self._next_record += 1
            self._add_record(rec)
        del self._ctrl[:n * CONTROL_RECORD_SIZE]

    def reassemble(self, now: float) -> list[FrameStatus]:
        """Drain readable data; returns newly finalized statuses in frame order."""
        if self.mode.partially_reliable:
            self._read_control(now)
        conn = self.conn
        for cur in self._cursors.values():
            queue = cur.queue
            while queue:
                rec = queue[0]
                end = rec.offset + rec.length
                need = end - cur.pos
                if need > 0:
                    data, zeros = conn.stream_read(cur.stream_id, need, now)
                    if not data:
                        break
                    cur.buf += data
                    cur.pos += len(data)
                    if zeros:
                        cur.zeros.extend(zeros)
                    if cur.pos < end:
                        break
                self._finalize(rec, bytes(cur.buf), cur.zeros, now)
                cur.buf.clear()
                cur.zeros = []
                queue.popleft()
        out = []
        st = self.statuses
        while self._emitted < self.n_frames and st[self._emitted] is not None:
            out.append(st[self._emitted])
            self._emitted += 1
        return out

    def _finalize(self, rec: ControlRecord, buf: bytes, zeros: list, now: float) -> None:
        i = rec.video_frame_index
        reliable = not self.mode.partially_reliable or not rec.stream_id & 1
        payload = None
        if not zeros:
            if rec.fec is None:
                payload = buf
            else:
                (plen,) = fec.LENGTH_PREFIX.unpack_from(buf, 0)
                payload = buf[4:4 + plen]
            outcome = INTACT
        elif rec.fec is not None:
            params = rec.fec
            s = params.shard_size
            erased = set()
            for a, b in zeros:
                erased.update(range((a - rec.offset) // s, (b - 1 - rec.offset) // s + 1))
            shards = fec.ShardSet.from_bytes(buf, params, erased)
            try:
                payload = fec.fec_decode(shards, params)
                outcome = RECOVERED
            except FecError:
                lost = sum(b - a for a, b in zeros)
                outcome = MISSING if lost >= rec.length else CORRUPTED
        else:
            lost = sum(b - a for a, b in zeros)
            outcome = MISSING if lost >= rec.length else CORRUPTED
        if payload is not None and self.expected is not None and payload != self.expected[i]:
            self.mismatches += 1
            log.error("frame %d payload mismatch (%s)", i, outcome)
        self.statuses[i] = FrameStatus(i, outcome, now, reliable)
        self.outcome_counts[outcome] += 1
        self.final_count += 1
