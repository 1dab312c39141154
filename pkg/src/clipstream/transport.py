"""QUIC-style connection with reliable and unreliable streams.

Stream ids carry their reliability class in bit 0 (even = reliable, odd =
unreliable); id 0 is the reliable control stream and always exists. Lost data on
unreliable streams is never retransmitted: the sender moves on to new bytes and
the receiver zero-fills gaps once they are declared lost. FIN markers are
retransmitted on every stream.

The connection is a passive state machine. Every entry point takes ``now`` in
virtual microseconds; nothing here reads a clock or spawns a thread.
"""

from __future__ import annotations

import bisect
import logging
import math
from collections import deque
from dataclasses import dataclass

from . import wire
from .errors import (
    NotEstablished,
    StreamClosed,
    StreamReset,
    StreamsExhausted,
    UnreliableNotNegotiated,
    VersionMismatch,
    WireError,
)
from .wire import (
    FLAG_HANDSHAKE,
    FT_ACK,
    FT_HANDSHAKE,
    FT_MAX_DATA,
    FT_MAX_STREAM_DATA,
    FT_STREAM,
    HEADER,
    STREAM_HDR,
    STREAM_HDR_SIZE,
    HandshakeFrame,
    WireConfig,
    ack_ranges_inclusive,
    decode_packet_raw,
    encode_ack_raw,
)

log = logging.getLogger(__name__)

RELIABLE = "reliable"
UNRELIABLE = "unreliable"
CONTROL_STREAM = 0

INITIAL_RTT = 333_000.0  # us, until the first sample
MAX_ACK_DELAY = 25_000.0
ACK_ELICITING_THRESHOLD = 2
PACKET_THRESHOLD = 3
TIME_THRESHOLD = 9 / 8
GRANULARITY = 1_000.0
INITIAL_WINDOW_PACKETS = 32
MIN_WINDOW_PACKETS = 2
LOSS_EWMA_ALPHA = 0.1
MAX_STREAM_ID = 0xFFFFFFFF


def stream_class(stream_id: int) -> str:
    return UNRELIABLE if stream_id & 1 else RELIABLE


@dataclass(frozen=True)
class TransportParams:
    unreliable_supported: bool = True
    initial_max_data: int = 16 * 1024 * 1024
    initial_max_stream_data: int = 8 * 1024 * 1024
    reorder_window: int = 4200
    reorder_timeout: float = 60_000.0  # us
    version: int = wire.VERSION

    def __post_init__(self):
        if self.initial_max_data < 0 or self.initial_max_stream_data < 0:
            raise ValueError("flow-control limits must be non-negative")
        if self.reorder_timeout < 0:
            raise ValueError("reorder_timeout must be non-negative")


@dataclass(frozen=True)
class NegotiatedParams:
    unreliable_supported: bool
    initiator_max_data: int
    initiator_max_stream_data: int
    responder_max_data: int
    responder_max_stream_data: int


def handshake(initiator_params: TransportParams, responder_params: TransportParams) -> NegotiatedParams:
    if initiator_params.version != responder_params.version:
        raise VersionMismatch(f"{initiator_params.version} != {responder_params.version}")
    return NegotiatedParams(
        unreliable_supported=initiator_params.unreliable_supported and responder_params.unreliable_supported,
        initiator_max_data=initiator_params.initial_max_data,
        initiator_max_stream_data=initiator_params.initial_max_stream_data,
        responder_max_data=responder_params.initial_max_data,
        responder_max_stream_data=responder_params.initial_max_stream_data,
    )


class SentPacketRecord:
    __slots__ = ("packet_number", "send_time", "size", "ranges", "ack_eliciting", "in_flight", "credit")

    def __init__(self, packet_number, send_time, size, ranges, ack_eliciting, in_flight, credit=()):
        self.packet_number = packet_number
        self.send_time = send_time
        self.size = size
        self.ranges = ranges  # list of (stream_id, offset, length, fin)
        self.ack_eliciting = ack_eliciting
        self.in_flight = in_flight
        self.credit = credit  # flow-control updates carried: stream ids, -1 for MAX_DATA

    def __repr__(self):
        return f"SentPacketRecord(pn={self.packet_number}, t={self.send_time}, size={self.size}, ranges={self.ranges})"


class _Intervals:
    """Sorted disjoint half-open intervals; appends at the tail are O(1)."""

    __slots__ = ("starts", "ends")

    def __init__(self):
        self.starts: list[int] = []
        self.ends: list[int] = []

    def add(self, s: int, e: int) -> None:
        if e <= s:
            return
        starts, ends = self.starts, self.ends
        if not starts or s > ends[-1]:
            starts.append(s)
            ends.append(e)
            return
        if s >= starts[-1]:
            if e > ends[-1]:
                ends[-1] = e
            return
        i = bisect.bisect_left(ends, s)
        j = bisect.bisect_right(starts, e)
        if i < j:
            s = min(s, starts[i])
            e = max(e, ends[j - 1])
        starts[i:j] = [s]
        ends[i:j] = [e]

    def prefix_end(self, base: int) -> int:
        """End of the run covering ``base`` (or ``base`` itself when uncovered)."""
        if self.starts and self.starts[0] <= base < self.ends[0]:
            return self.ends[0]
        return base

    def missing(self, s: int, e: int) -> list[tuple[int, int]]:
        out = []
        cur = s
        i = bisect.bisect_right(self.ends, s)
        starts, ends = self.starts, self.ends
        while cur < e and i < len(starts):
            if starts[i] >= e:
                break
            if starts[i] > cur:
                out.append((cur, starts[i]))
            cur = max(cur, ends[i])
            i += 1
        if cur < e:
            out.append((cur, e))
        return out

    def covers(self, s: int, e: int) -> bool:
        return not self.missing(s, e)

    def drop_below(self, bound: int) -> None:
        while self.ends and self.ends[0] <= bound:
            self.starts.pop(0)
            self.ends.pop(0)


class SendStream:
    __slots__ = ("stream_id", "reliable", "buf", "base", "written", "sent", "max_data", "fin",
                 "fin_offset", "fin_sent", "fin_acked", "acked", "lost_bytes", "retransmitted_bytes")

    def __init__(self, stream_id: int, max_data: int):
        self.stream_id = stream_id
        self.reliable = not stream_id & 1
        self.buf = bytearray()
        self.base = 0  # stream offset of buf[0]
        self.written = 0
        self.sent = 0  # next never-sent offset
        self.max_data = max_data
        self.fin = False
        self.fin_offset: int | None = None
        self.fin_sent = False
        self.fin_acked = False
        self.acked = _Intervals()
        self.lost_bytes = 0
        self.retransmitted_bytes = 0

    def slice(self, off: int, n: int) -> bytes:
        i = off - self.base
        return bytes(self.buf[i:i + n])

    def trim(self) -> None:
        if self.reliable:
            keep_from = self.acked.prefix_end(self.base)
        else:
            keep_from = self.sent
        drop = keep_from - self.base
        if drop >= 262_144 or (drop > 0 and drop == len(self.buf)):
            del self.buf[:drop]
            self.base = keep_from

    @property
    def pending(self) -> bool:
        return self.sent < self.written or (self.fin and not self.fin_sent)


class RecvStream:
    __slots__ = ("stream_id", "reliable", "read_offset", "contig", "contig_end", "ooo", "ooo_starts",
                 "max_end", "fin_offset", "zero_filled", "limit", "window", "alarm_fired_for",
                 "bytes_received", "reset")

    def __init__(self, stream_id: int, window: int):
        self.stream_id = stream_id
        self.reliable = not stream_id & 1
        self.read_offset = 0
        self.contig = bytearray()  # bytes in [read_offset, contig_end)
        self.contig_end = 0
        self.ooo: dict[int, tuple[bytes, float]] = {}
        self.ooo_starts: list[int] = []
        self.max_end = 0
        self.fin_offset: int | None = None
        self.zero_filled: list[tuple[int, int]] = []
        self.limit = window
        self.window = window
        self.alarm_fired_for: int | None = None
        self.bytes_received = 0
        self.reset = False

    def insert(self, off: int, data: bytes, fin: bool, now: float) -> bool:
        end = off + len(data)
        if fin:
            self.fin_offset = end
        if end > self.max_end:
            self.max_end = end
        if end <= self.contig_end:
            return False
        self.bytes_received += len(data)
        if off <= self.contig_end:
            self.contig += data[self.contig_end - off:]
            self.contig_end = end
            if self.ooo_starts:
                self._pull()
        else:
            prev = self.ooo.get(off)
            if prev is None:
                bisect.insort(self.ooo_starts, off)
                self.ooo[off] = (data, now)
            elif len(prev[0]) < len(data):
                self.ooo[off] = (data, prev[1])
        return True

    def _pull(self) -> None:
        starts = self.ooo_starts
        while starts and starts[0] <= self.contig_end:
            s = starts.pop(0)
            data, _ = self.ooo.pop(s)
            e = s + len(data)
            if e > self.contig_end:
                self.contig += data[self.contig_end - s:]
                self.contig_end = e

    def gap_end(self) -> int | None:
        """End of the hole right after the contiguous prefix, if one is known."""
        if self.ooo_starts:
            return self.ooo_starts[0]
        if self.fin_offset is not None and self.fin_offset > self.contig_end:
            return self.fin_offset
        return None

    def gap_alarm(self, timeout: float) -> float | None:
        if not self.ooo_starts:
            return None
        s = self.ooo_starts[0]
        if self.alarm_fired_for == s:
            return None
        return self.ooo[s][1] + timeout

    def gap_declared_lost(self, now: float, window: int, timeout: float) -> bool:
        if self.ooo_starts:
            g = self.ooo_starts[0]
            if self.max_end >= g + window:
                return True
            # same sum as gap_alarm, so a fired alarm always releases the gap
            return self.ooo[g][1] + timeout <= now
        # trailing hole below a known FIN: nothing more can arrive past it
        return self.fin_offset is not None and self.fin_offset > self.contig_end

    @property
    def finished(self) -> bool:
        return self.fin_offset is not None and self.read_offset >= self.fin_offset


class Connection:
    """One endpoint of a connection.

    Lifecycle: the client calls :meth:`connect`; datagrams returned by
    :meth:`poll_transmit` are carried by the caller to the peer's
    :meth:`on_datagram`. The caller also fires :meth:`on_timeout` once
    ``now >= next_timeout()``.
    """

    def __init__(self, is_client: bool, params: TransportParams = TransportParams(),
                 connection_id: int = 0, wire_cfg: WireConfig = WireConfig()):
        self.is_client = is_client
        self.params = params
        self.cid = connection_id
        self.wire_cfg = wire_cfg
        self.mtu = wire_cfg.max_datagram
        self.negotiated: NegotiatedParams | None = None
        self.established = False
        self._hs_needed = False
        self._hs_deadline: float | None = None
        self._hs_sent_at: float | None = None
        self._hs_count = 0

        # sender
        self.next_pn = 0
        self.sent: dict[int, SentPacketRecord] = {}
        self.bytes_in_flight = 0
        self.cwnd = INITIAL_WINDOW_PACKETS * self.mtu
        self.min_cwnd = MIN_WINDOW_PACKETS * self.mtu
        self.ssthresh = math.inf
        self.srtt: float | None = None
        self.rttvar = INITIAL_RTT / 2
        self.min_rtt = math.inf
        self.latest_rtt = 0.0
        self.largest_acked = -1
        self.recovery_start = -math.inf
        self.loss_time: float | None = None
        self.pto_count = 0
        self.last_ack_eliciting_sent: float | None = None
        self.loss_estimate = 0.0
        self.retx: deque[tuple[int, int, int, bool]] = deque()
        self.send_streams: dict[int, SendStream] = {}
        self._rr: deque[int] = deque()
        self._in_rr: set[int] = set()
        self._next_reliable = 2
        self._next_unreliable = 1
        self.peer_max_data = 0
        self.conn_written = 0
        self._peer_stream_window = 0

        # receiver
        self.recv_streams: dict[int, RecvStream] = {}
        self._rx_lo: list[int] = []
        self._rx_hi: list[int] = []
        self._largest_rx_time = 0.0
        self._ack_eliciting_unacked = 0
        self._ack_deadline: float | None = None
        self.local_max_data = params.initial_max_data
        self.conn_consumed = 0
        self._pending_max_data = False
        self._pending_msd: dict[int, int] = {}

        # counters
        self.packets_sent = 0
        self.bytes_sent = 0
        self.packets_lost = 0
        self.packets_received = 0
        self.malformed = 0
        self.duplicates = 0
        self.congestion_events = 0
        self.pto_events = 0
        self.stream_bytes_sent: dict[int, int] = {}
        self.emit_log = None  # optional callable(now, bytes_in_flight, cwnd) for property checks

        self.send_streams[CONTROL_STREAM] = SendStream(CONTROL_STREAM, 0)
        self.recv_streams[CONTROL_STREAM] = RecvStream(CONTROL_STREAM, params.initial_max_stream_data)

    # ------------------------------------------------------------------
    # handshake
    def connect(self, now: float) -> None:
        if not self.is_client:
            raise ValueError("only the client initiates the handshake")
        self._hs_needed = True

    def _apply_peer_params(self, peer: dict) -> None:
        peer_params = TransportParams(
            unreliable_supported=peer.get("unreliable_supported", False),
            initial_max_data=peer.get("initial_max_data", 0),
            initial_max_stream_data=peer.get("initial_max_stream_data", 0),
        )
        if self.is_client:
            self.negotiated = handshake(self.params, peer_params)
        else:
            self.negotiated = handshake(peer_params, self.params)
        self.peer_max_data = peer_params.initial_max_data
        for s in self.send_streams.values():
            s.max_data = max(s.max_data, peer_params.initial_max_stream_data)
        self._peer_stream_window = peer_params.initial_max_stream_data
        self.established = True

    @property
    def unreliable_supported(self) -> bool:
        return bool(self.negotiated and self.negotiated.unreliable_supported)

    @property
    def accepts_unreliable(self) -> bool:
        """Whether incoming odd-numbered streams are honoured; our own offer decides until the handshake completes."""
        return self.unreliable_supported if self.established else self.params.unreliable_supported

    def _handshake_frame(self) -> HandshakeFrame:
        p = self.params
        return wire.encode_handshake_params(p.unreliable_supported, p.initial_max_data, p.initial_max_stream_data)

    # ------------------------------------------------------------------
    # streams
    def open_stream(self, cls: str = RELIABLE) -> int:
        if not self.established:
            raise NotEstablished("handshake not complete")
        if cls == UNRELIABLE:
            if not self.unreliable_supported:
                raise UnreliableNotNegotiated("peer did not negotiate unreliable streams")
            sid = self._next_unreliable
            if sid > MAX_STREAM_ID:
                raise StreamsExhausted("no unreliable stream ids left")
            self._next_unreliable += 2
        elif cls == RELIABLE:
            sid = self._next_reliable
            if sid > MAX_STREAM_ID:
                raise StreamsExhausted("no reliable stream ids left")
            self._next_reliable += 2
        else:
            raise ValueError(f"unknown stream class {cls!r}")
        self.send_streams[sid] = SendStream(sid, self._peer_stream_window)
        return sid

    def stream_credit(self, stream_id: int) -> int:
        s = self.send_streams[stream_id]
        return max(0, min(s.max_data - s.written, self.peer_max_data - self.conn_written))

    def stream_write(self, stream_id: int, data=b"", fin: bool = False) -> int:
        s = self.send_streams.get(stream_id)
        if s is None:
            raise StreamClosed(f"stream {stream_id} is not open")
        if s.fin:
            raise StreamClosed(f"stream {stream_id} already finished")
        credit = min(s.max_data - s.written, self.peer_max_data - self.conn_written)
        n = len(data)
        if n > credit:
            n = max(0, credit)
        if n:
            s.buf += data[:n] if n < len(data) else data
            s.written += n
            self.conn_written += n
        if fin and n == len(data):
            s.fin = True
            s.fin_offset = s.written
        if (n or s.fin) and stream_id not in self._in_rr:
            self._rr.append(stream_id)
            self._in_rr.add(stream_id)
        return n

    def stream_read(self, stream_id: int, max_bytes: int, now: float) -> tuple[bytes, list[tuple[int, int]]]:
        """Read up to ``max_bytes``; returns the bytes and any zero-filled (start, end) ranges."""
        rs = self.recv_streams.get(stream_id)
        if rs is None:
            return b"", []
        if rs.reset:
            raise StreamReset(f"stream {stream_id} was reset")
        parts = []
        zeros = []
        want = max_bytes
        start = rs.read_offset
        while want > 0:
            avail = rs.contig_end - rs.read_offset
            if avail > 0:
                take = avail if avail < want else want
                if take == len(rs.contig):
                    parts.append(bytes(rs.contig))
                    rs.contig.clear()
                else:
                    parts.append(bytes(rs.contig[:take]))
                    del rs.contig[:take]
                rs.read_offset += take
                want -= take
                continue
            if rs.reliable:
                break
            g = rs.gap_end()
            if g is None or not rs.gap_declared_lost(now, self.params.reorder_window, self.params.reorder_timeout):
                break
            n = g - rs.read_offset
            if n > want:
                n = want
            parts.append(bytes(n))
            zeros.append((rs.read_offset, rs.read_offset + n))
            rs.read_offset += n
            rs.contig_end = rs.read_offset
            want -= n
            if rs.ooo_starts and rs.ooo_starts[0] <= rs.contig_end:
                rs._pull()
        consumed = rs.read_offset - start
        if consumed:
            if zeros:
                rs.zero_filled.extend(zeros)
            self._on_consumed(rs, consumed)
        if not parts:
            return b"", zeros
        return (parts[0] if len(parts) == 1 else b"".join(parts)), zeros

    def _on_consumed(self, rs: RecvStream, n: int) -> None:
        self.conn_consumed += n
        if rs.limit - rs.read_offset < rs.window // 2:
            rs.limit = rs.read_offset + rs.window
            self._pending_msd[rs.stream_id] = rs.limit
        window = self.params.initial_max_data
        if self.local_max_data - self.conn_consumed < window // 2:
            self.local_max_data = self.conn_consumed + window
            self._pending_max_data = True

    def readable(self, stream_id: int) -> int:
        rs = self.recv_streams.get(stream_id)
        return 0 if rs is None else rs.contig_end - rs.read_offset

    # ------------------------------------------------------------------
    # transmit
    def _ack_due(self, now: float) -> bool:
        return self._ack_eliciting_unacked >= ACK_ELICITING_THRESHOLD or (
            self._ack_deadline is not None and now >= self._ack_deadline)

    def _build_ack(self, now: float) -> bytes:
        lo, hi = self._rx_lo, self._rx_hi
        n = min(len(lo), self.wire_cfg.max_ack_ranges)
        ranges = [(lo[-1 - i], hi[-1 - i]) for i in range(n)]
        delay = int(now - self._largest_rx_time) if now > self._largest_rx_time else 0
        return encode_ack_raw(ranges, delay if delay < 0xFFFFFFFF else 0xFFFFFFFF)

    def _header(self, flags: int = 0) -> bytes:
        pn = self.next_pn
        self.next_pn += 1
        return HEADER.pack(wire.VERSION, flags, self.cid, pn)

    def poll_transmit(self, now: float) -> list[bytes]:
        out: list[bytes] = []
        if self._hs_needed:
            self._hs_needed = False
            frames = [self._handshake_frame()]
            body = b"".join(wire.encode_frame(f) for f in frames)
            out.append(self._header(FLAG_HANDSHAKE) + body)
            self._hs_count += 1
            if self.is_client and not self.established:
                self._hs_sent_at = now
                self._hs_deadline = now + self._pto_period() * (1 << min(self._hs_count - 1, 6))
            self._count_sent(out[-1])
        if not self.established:
            # data may already be arriving while our handshake is outstanding
            if self._ack_eliciting_unacked and self._ack_due(now):
                out.append(self._header() + self._build_ack(now))
                self._ack_eliciting_unacked = 0
                self._ack_deadline = None
                self._count_sent(out[-1])
            return out

        budget_total = self.wire_cfg.mtu_payload
        mtu = self.mtu
        while True:
            can_send = self.bytes_in_flight + mtu <= self.cwnd
            has_data = can_send and (self.retx or self._rr)
            has_ctrl = can_send and (self._pending_max_data or self._pending_msd)
            ack_now = self._ack_eliciting_unacked > 0 and (has_data or has_ctrl or self._ack_due(now))
            if not (has_data or has_ctrl or ack_now):
                break
            parts = []
            budget = budget_total
            if ack_now:
                enc = self._build_ack(now)
                parts.append(enc)
                budget -= len(enc)
                self._ack_eliciting_unacked = 0
                self._ack_deadline = None
            eliciting = False
            credit = ()
            if has_ctrl:
                credit = []
                if self._pending_max_data and budget >= wire.MAX_DATA.size:
                    parts.append(wire.MAX_DATA.pack(wire.FT_MAX_DATA, self.local_max_data))
                    budget -= wire.MAX_DATA.size
                    self._pending_max_data = False
                    credit.append(-1)
                while self._pending_msd and budget >= wire.MAX_STREAM_DATA.size:
                    sid = next(iter(self._pending_msd))
                    limit = self._pending_msd.pop(sid)
                    parts.append(wire.MAX_STREAM_DATA.pack(wire.FT_MAX_STREAM_DATA, sid, limit))
                    budget -= wire.MAX_STREAM_DATA.size
                    credit.append(sid)
                eliciting = bool(credit)
            ranges = []
            if has_data:
                budget = self._fill_stream_frames(parts, ranges, budget)
                if ranges:
                    eliciting = True
            if not parts:
                break
            dg = self._header() + b"".join(parts)
            pn = self.next_pn - 1
            if eliciting:
                self.sent[pn] = SentPacketRecord(pn, now, len(dg), ranges, True, True, credit)
                self.bytes_in_flight += len(dg)
                self.last_ack_eliciting_sent = now
                if self.emit_log is not None:
                    self.emit_log(now, self.bytes_in_flight, self.cwnd, ranges)
            out.append(dg)
            self._count_sent(dg)
        return out

    def _count_sent(self, dg: bytes) -> None:
        self.packets_sent += 1
        self.bytes_sent += len(dg)

    def _fill_stream_frames(self, parts: list, ranges: list, budget: int) -> int:
        retx = self.retx
        streams = self.send_streams
        while budget > STREAM_HDR_SIZE:
            room = budget - STREAM_HDR_SIZE
            if retx:
                sid, off, length, fin = retx[0]
                s = streams[sid]
                if s.reliable and length:
                    todo = s.acked.missing(off, off + length)
                    if not todo:
                        retx.popleft()
                        if fin and not s.fin_acked:
                            retx.appendleft((sid, off + length, 0, True))
                        continue
                    if todo[0] != (off, off + length):
                        retx.popleft()
                        for i, (a, b) in enumerate(reversed(todo)):
                            retx.appendleft((sid, a, b - a, fin and i == 0 and b == off + length))
                        continue
                if fin and length == 0 and s.fin_acked:
                    retx.popleft()
                    continue
                take = length if length <= room else room
                if take < length:
                    retx[0] = (sid, off + take, length - take, fin)
                    part_fin = False
                else:
                    retx.popleft()
                    part_fin = fin
                data = s.slice(off, take) if take else b""
                parts.append(STREAM_HDR.pack(wire.FT_STREAM, sid, off, take, 1 if part_fin else 0))
                parts.append(data)
                ranges.append((sid, off, take, part_fin))
                s.retransmitted_bytes += take
                budget -= STREAM_HDR_SIZE + take
                continue
            rr = self._rr
            if not rr:
                break
            sid = rr[0]
            s = streams[sid]
            avail = s.written - s.sent
            take = avail if avail <= room else room
            fin = s.fin and not s.fin_sent and s.sent + take == s.fin_offset
            if take == 0 and not fin:
                rr.popleft()
                self._in_rr.discard(sid)
                continue
            off = s.sent
            data = s.slice(off, take) if take else b""
            s.sent += take
            if fin:
                s.fin_sent = True
            if not s.reliable:
                s.trim()
            parts.append(STREAM_HDR.pack(wire.FT_STREAM, sid, off, take, 1 if fin else 0))
            parts.append(data)
            ranges.append((sid, off, take, fin))
            self.stream_bytes_sent[sid] = self.stream_bytes_sent.get(sid, 0) + take
            budget -= STREAM_HDR_SIZE + take
            rr.rotate(-1)
            if not s.pending:
                rr.remove(sid)
                self._in_rr.discard(sid)
        return budget

    # ------------------------------------------------------------------
    # receive
    def on_datagram(self, data: bytes, now: float) -> list[tuple]:
        try:
            _, cid, pn, frames = decode_packet_raw(data)
        except WireError as exc:
            self.malformed += 1
            log.debug("dropping malformed datagram: %s", exc)
            return []
        if cid != self.cid:
            self.malformed += 1
            return []
        self.packets_received += 1
        dup = not self._record_rx(pn, now)
        if dup:
            self.duplicates += 1
        events: list[tuple] = []
        eliciting = False
        for f in frames:
            t = f[0]
            if t == FT_STREAM:
                eliciting = True
                if not dup:
                    self._on_stream_frame(f[1], f[2], f[3], f[4], now, events)
            elif t == FT_ACK:
                self._on_ack(ack_ranges_inclusive(f[1], f[3], f[4]), f[2], now)
            elif t == FT_MAX_STREAM_DATA:
                eliciting = True
                s = self.send_streams.get(f[1])
                if s is not None and f[2] > s.max_data:
                    s.max_data = f[2]
            elif t == FT_MAX_DATA:
                eliciting = True
                if f[1] > self.peer_max_data:
                    self.peer_max_data = f[1]
            elif t == FT_HANDSHAKE:
                eliciting = True
                self._on_handshake(HandshakeFrame(f[1]), now, events)
        if eliciting:
            self._ack_eliciting_unacked += 1
            if self._ack_deadline is None:
                self._ack_deadline = now + MAX_ACK_DELAY
        return events

    def _on_handshake(self, f: HandshakeFrame, now: float, events: list) -> None:
        peer = wire.decode_handshake_params(f)
        if self.is_client:
            if not self.established:
                self._apply_peer_params(peer)
                self._hs_deadline = None
                if self._hs_sent_at is not None:
                    self._rtt_sample(now - self._hs_sent_at, 0.0)
                events.append(("handshake_complete",))
        else:
            if not self.established:
                self._apply_peer_params(peer)
                events.append(("handshake_complete",))
            self._hs_needed = True  # (re)send our parameters

    def _record_rx(self, pn: int, now: float) -> bool:
        lo, hi = self._rx_lo, self._rx_hi
        if not hi or pn > hi[-1]:
            self._largest_rx_time = now
            if hi and pn == hi[-1] + 1:
                hi[-1] = pn
            else:
                lo.append(pn)
                hi.append(pn)
                if len(lo) > 4 * self.wire_cfg.max_ack_ranges:
                    del lo[0]
                    del hi[0]
            return True
        i = bisect.bisect_left(hi, pn)
        if i < len(lo) and lo[i] <= pn:
            return False
        if lo and pn < lo[0] and len(lo) >= 4 * self.wire_cfg.max_ack_ranges:
            return False  # older than anything we still track
        lo.insert(i, pn)
        hi.insert(i, pn)
        if i + 1 < len(lo) and lo[i + 1] == pn + 1:
            hi[i] = hi[i + 1]
            del lo[i + 1]
            del hi[i + 1]
        if i > 0 and hi[i - 1] == pn - 1:
            hi[i - 1] = hi[i]
            del lo[i]
            del hi[i]
        return True

    def _on_stream_frame(self, sid: int, offset: int, data: bytes, fin: bool, now: float, events: list) -> None:
        rs = self.recv_streams.get(sid)
        if rs is None:
            if sid & 1 and not self.accepts_unreliable:
                self.malformed += 1
                return
            rs = RecvStream(sid, self.params.initial_max_stream_data)
            self.recv_streams[sid] = rs
        if rs.insert(offset, data, fin, now):
            events.append(("stream_data", sid))

    # ------------------------------------------------------------------
    # recovery
    def _pto_period(self) -> float:
        srtt = self.srtt if self.srtt is not None else INITIAL_RTT
        return srtt + max(4 * self.rttvar, GRANULARITY) + MAX_ACK_DELAY

    def _rtt_sample(self, latest: float, ack_delay: float) -> None:
        self.latest_rtt = latest
        if latest < self.min_rtt:
            self.min_rtt = latest
        adjusted = latest - ack_delay if latest - ack_delay >= self.min_rtt else latest
        if self.srtt is None:
            self.srtt = adjusted
            self.rttvar = adjusted / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - adjusted)
            self.srtt = 0.875 * self.srtt + 0.125 * adjusted

    def _on_ack(self, ranges_desc: list[tuple[int, int]], ack_delay_us: int, now: float) -> None:
        """Process inclusive (low, high) acknowledged ranges, newest first."""
        largest = ranges_desc[0][1]
        if largest >= self.next_pn or not self.sent:
            return
        asc = ranges_desc[::-1]
        nr = len(asc)
        i = 0
        newly = []
        for pn in self.sent:
            if pn > largest:
                break
            while i < nr and asc[i][1] < pn:
                i += 1
            if i == nr:
                break
            if asc[i][0] <= pn:
                newly.append(pn)
        if not newly:
            return
        records = [self.sent.pop(pn) for pn in newly]
        if largest > self.largest_acked:
            self.largest_acked = largest
        last = records[-1]
        if last.packet_number == largest and last.ack_eliciting:
            self._rtt_sample(now - last.send_time, float(ack_delay_us))
        cwnd_limited = self.bytes_in_flight + 2 * self.mtu >= self.cwnd
        for p in records:
            if p.in_flight:
                self.bytes_in_flight -= p.size
            for sid, off, length, fin in p.ranges:
                s = self.send_streams[sid]
                if s.reliable:
                    s.acked.add(off, off + length)
                    s.trim()
                if fin:
                    s.fin_acked = True
            self.loss_estimate *= 1 - LOSS_EWMA_ALPHA
            if p.send_time > self.recovery_start and cwnd_limited:
                if self.cwnd < self.ssthresh:
                    self.cwnd += p.size
                else:
                    self.cwnd += self.mtu * p.size / self.cwnd
        self.pto_count = 0
        self.detect_losses(now)

    def detect_losses(self, now: float) -> list[SentPacketRecord]:
        self.loss_time = None
        if self.largest_acked < 0:
            return []
        rtt = max(self.srtt if self.srtt is not None else INITIAL_RTT, self.latest_rtt)
        loss_delay = max(TIME_THRESHOLD * rtt, GRANULARITY)
        largest = self.largest_acked
        lost_pns = []
        for pn, p in self.sent.items():
            if pn > largest:
                break
            # same expression as the armed timer, so a fired timer always declares
            t = p.send_time + loss_delay
            if t <= now or largest - pn >= PACKET_THRESHOLD:
                lost_pns.append(pn)
            elif self.loss_time is None or t < self.loss_time:
                self.loss_time = t
        lost = [self.sent.pop(pn) for pn in lost_pns]
        if lost:
            self._on_lost(lost, now)
        return lost

    def _requeue(self, p: SentPacketRecord) -> None:
        """Account a lost packet: reliable data and FINs go back in the queue, credit is re-announced."""
        self.packets_lost += 1
        self.loss_estimate = self.loss_estimate * (1 - LOSS_EWMA_ALPHA) + LOSS_EWMA_ALPHA
        for sid, off, length, fin in p.ranges:
            s = self.send_streams[sid]
            if s.reliable:
                self.retx.append((sid, off, length, fin))
            else:
                s.lost_bytes += length
                if fin:
                    self.retx.append((sid, off + length, 0, True))
        for sid in p.credit:
            if sid < 0:
                self._pending_max_data = True
            elif sid not in self._pending_msd:
                self._pending_msd[sid] = self.recv_streams[sid].limit

    def _on_lost(self, lost: list[SentPacketRecord], now: float) -> None:
        for p in lost:
            if p.in_flight:
                self.bytes_in_flight -= p.size
            self._requeue(p)
        if lost[-1].send_time > self.recovery_start:
            self.recovery_start = now
            self.congestion_events += 1
            self.ssthresh = max(self.cwnd / 2, self.min_cwnd)
            self.cwnd = self.ssthresh

    def _pto_deadline(self) -> float | None:
        if self.bytes_in_flight <= 0 or self.last_ack_eliciting_sent is None:
            return None
        return self.last_ack_eliciting_sent + self._pto_period() * (1 << min(self.pto_count, 16))

    def _on_pto(self, now: float) -> None:
        """Probe timeout: every outstanding packet is declared lost and the window collapses."""
        self.pto_count += 1
        self.pto_events += 1
        lost = list(self.sent.values())
        self.sent.clear()
        self.loss_time = None
        for p in lost:
            self._requeue(p)
        self.bytes_in_flight = 0
        self.ssthresh = max(self.cwnd / 2, self.min_cwnd)
        self.cwnd = self.min_cwnd
        self.recovery_start = now
        self.congestion_events += 1

    # ------------------------------------------------------------------
    # timers
    def next_timeout(self) -> float | None:
        best = self._ack_deadline if self._ack_eliciting_unacked else None
        for t in (self.loss_time, self._hs_deadline):
            if t is not None and (best is None or t < best):
                best = t
        if self.loss_time is None:
            t = self._pto_deadline()
            if t is not None and (best is None or t < best):
                best = t
        timeout = self.params.reorder_timeout
        for rs in self.recv_streams.values():
            if rs.ooo_starts and not rs.reliable:
                t = rs.gap_alarm(timeout)
                if t is not None and (best is None or t < best):
                    best = t
        return best

    def on_timeout(self, now: float) -> None:
        if self._hs_deadline is not None and now >= self._hs_deadline and not self.established:
            self._hs_needed = True
            self._hs_deadline = None
        if self.loss_time is not None and now >= self.loss_time:
            self.detect_losses(now)
        elif self.loss_time is None:
            t = self._pto_deadline()
            if t is not None and now >= t:
                self._on_pto(now)
        timeout = self.params.reorder_timeout
        for rs in self.recv_streams.values():
            if rs.ooo_starts and not rs.reliable:
                t = rs.gap_alarm(timeout)
                if t is not None and now >= t:
                    rs.alarm_fired_for = rs.ooo_starts[0]
