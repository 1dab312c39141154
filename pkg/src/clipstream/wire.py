"""Bit-exact packet and frame codec.

All integers are big-endian and fixed width::

    packet  = version u8 | flags u8 | connection_id u64 | packet_number u64 | frames
    PADDING = 0x00
    STREAM  = 0x01 | stream_id u32 | offset u64 | length u16 | flags u8 (bit0 FIN) | data
    ACK     = 0x02 | largest u64 | ack_delay_us u32 | range_count u16
                   | first_run_length u64 | (gap u64 | run_length u64) * range_count
    HANDSHAKE = 0x03 | param_count u8 | (tag u8 | len u16 | value) * count
    MAX_DATA  = 0x04 | limit u64
    MAX_STREAM_DATA = 0x05 | stream_id u32 | limit u64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Union

from .errors import (
    EmptySet,
    InvalidFrame,
    OversizedPacket,
    Truncated,
    UnknownFrameType,
    UnknownVersion,
)

VERSION = 0x01
FLAG_HANDSHAKE = 0x01

HEADER = struct.Struct("!BBQQ")
HEADER_SIZE = HEADER.size  # 18

FT_PADDING = 0x00
FT_STREAM = 0x01
FT_ACK = 0x02
FT_HANDSHAKE = 0x03
FT_MAX_DATA = 0x04
FT_MAX_STREAM_DATA = 0x05

STREAM_HDR = struct.Struct("!BIQHB")
STREAM_HDR_SIZE = STREAM_HDR.size  # 16
ACK_HDR = struct.Struct("!BQIHQ")
ACK_HDR_SIZE = ACK_HDR.size  # 23
ACK_RANGE = struct.Struct("!QQ")
MAX_DATA = struct.Struct("!BQ")
MAX_STREAM_DATA = struct.Struct("!BIQ")

_U16 = 0xFFFF
_U32 = 0xFFFFFFFF
_U64 = 0xFFFFFFFFFFFFFFFF

# handshake parameter tags
TAG_UNRELIABLE_SUPPORTED = 0x01
TAG_INITIAL_MAX_DATA = 0x02
TAG_INITIAL_MAX_STREAM_DATA = 0x03


@dataclass(frozen=True)
class WireConfig:
    mtu_payload: int = 1400
    max_ack_ranges: int = 32

    def __post_init__(self):
        if self.mtu_payload < 64:
            raise ValueError("mtu_payload must be >= 64")
        if self.max_ack_ranges < 1:
            raise ValueError("max_ack_ranges must be >= 1")

    @property
    def max_datagram(self) -> int:
        return HEADER_SIZE + self.mtu_payload


@dataclass(frozen=True)
class PacketHeader:
    connection_id: int
    packet_number: int
    flags: int = 0
    version: int = VERSION

    @property
    def is_handshake(self) -> bool:
        return bool(self.flags & FLAG_HANDSHAKE)


@dataclass(frozen=True, slots=True)
class Padding:
    pass


@dataclass(frozen=True, slots=True)
class StreamFrame:
    stream_id: int
    offset: int
    data: bytes
    fin: bool = False

    @property
    def length(self) -> int:
        return len(self.data)


@dataclass(frozen=True, slots=True)
class AckFrame:
    largest_acked: int
    first_run_length: int
    ranges: tuple[tuple[int, int], ...] = ()
    ack_delay_us: int = 0

    def packet_ranges(self) -> list[tuple[int, int]]:
        """Inclusive (low, high) packet-number ranges, newest first."""
        return ack_ranges_inclusive(self.largest_acked, self.first_run_length, self.ranges)

    def packet_numbers(self) -> set[int]:
        pns: set[int] = set()
        for low, high in self.packet_ranges():
            pns.update(range(low, high + 1))
        return pns


@dataclass(frozen=True, slots=True)
class HandshakeFrame:
    params: tuple[tuple[int, bytes], ...] = ()


@dataclass(frozen=True, slots=True)
class MaxDataFrame:
    limit: int


@dataclass(frozen=True, slots=True)
class MaxStreamDataFrame:
    stream_id: int
    limit: int


Frame = Union[Padding, StreamFrame, AckFrame, HandshakeFrame, MaxDataFrame, MaxStreamDataFrame]


def _check_uint(value, bits: int, what: str) -> None:
    if not isinstance(value, int) or value < 0 or value >> bits:
        raise InvalidFrame(f"{what} must fit in u{bits}, got {value!r}")


def ack_frame_size(range_count: int) -> int:
    return ACK_HDR_SIZE + ACK_RANGE.size * range_count


def encode_frame(frame: Frame) -> bytes:
    if isinstance(frame, StreamFrame):
        _check_uint(frame.stream_id, 32, "stream_id")
        _check_uint(frame.offset, 64, "offset")
        n = len(frame.data)
        if n > _U16:
            raise InvalidFrame(f"stream frame data too long ({n} B)")
        if frame.offset + n > _U64:
            raise InvalidFrame("stream frame end offset overflows u64")
        return STREAM_HDR.pack(FT_STREAM, frame.stream_id, frame.offset, n, 1 if frame.fin else 0) + bytes(frame.data)
    if isinstance(frame, Padding):
        return b"\x00"
    if isinstance(frame, AckFrame):
        _check_uint(frame.largest_acked, 64, "largest_acked")
        _check_uint(frame.ack_delay_us, 32, "ack_delay_us")
        _check_uint(frame.first_run_length, 64, "first_run_length")
        if frame.first_run_length < 1 or frame.first_run_length > frame.largest_acked + 1:
            raise InvalidFrame("first_run_length out of range")
        if len(frame.ranges) > _U16:
            raise InvalidFrame("too many ack ranges")
        low = frame.largest_acked - frame.first_run_length + 1
        parts = [ACK_HDR.pack(FT_ACK, frame.largest_acked, frame.ack_delay_us, len(frame.ranges), frame.first_run_length)]
        for gap, run in frame.ranges:
            _check_uint(gap, 64, "gap")
            _check_uint(run, 64, "run_length")
            high = low - gap - 1
            if run < 1 or high - run + 1 < 0:
                raise InvalidFrame("ack range descends below packet number 0")
            low = high - run + 1
            parts.append(ACK_RANGE.pack(gap, run))
        return b"".join(parts)
    if isinstance(frame, HandshakeFrame):
        if len(frame.params) > 0xFF:
            raise InvalidFrame("too many handshake params")
        parts = [bytes((FT_HANDSHAKE, len(frame.params)))]
        for tag, value in frame.params:
            _check_uint(tag, 8, "param tag")
            if len(value) > _U16:
                raise InvalidFrame("handshake param value too long")
            parts.append(struct.pack("!BH", tag, len(value)) + bytes(value))
        return b"".join(parts)
    if isinstance(frame, MaxDataFrame):
        _check_uint(frame.limit, 64, "limit")
        return MAX_DATA.pack(FT_MAX_DATA, frame.limit)
    if isinstance(frame, MaxStreamDataFrame):
        _check_uint(frame.stream_id, 32, "stream_id")
        _check_uint(frame.limit, 64, "limit")
        return MAX_STREAM_DATA.pack(FT_MAX_STREAM_DATA, frame.stream_id, frame.limit)
    raise InvalidFrame(f"not a frame: {frame!r}")


def encode_packet(header: PacketHeader, frames: Iterable[Frame], cfg: WireConfig = WireConfig()) -> bytes:
    if header.version != VERSION:
        raise InvalidFrame(f"unsupported version {header.version}")
    _check_uint(header.flags, 8, "flags")
    _check_uint(header.connection_id, 64, "connection_id")
    _check_uint(header.packet_number, 64, "packet_number")
    body = b"".join(encode_frame(f) for f in frames)
    if len(body) > cfg.mtu_payload:
        raise OversizedPacket(f"frames need {len(body)} B, budget is {cfg.mtu_payload} B")
    return HEADER.pack(header.version, header.flags, header.connection_id, header.packet_number) + body


def decode_header(buf) -> PacketHeader:
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"packet shorter than header ({len(buf)} B)")
    version, flags, cid, pn = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnknownVersion(f"version {version:#04x}")
    return PacketHeader(connection_id=cid, packet_number=pn, flags=flags, version=version)


def decode_packet_raw(buf) -> tuple[int, int, int, list[tuple]]:
    """Parse a packet into (flags, connection_id, packet_number, frames) with tuple frames.

    Frame tuples start with the frame type code:
    ``(FT_STREAM, stream_id, offset, data, fin)``,
    ``(FT_ACK, largest, ack_delay_us, first_run_length, ranges)``,
    ``(FT_HANDSHAKE, params)``, ``(FT_MAX_DATA, limit)``,
    ``(FT_MAX_STREAM_DATA, stream_id, limit)``; padding bytes are skipped.
    """
    end = len(buf)
    if end < HEADER_SIZE:
        raise Truncated(f"packet shorter than header ({end} B)")
    version, flags, cid, pn = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnknownVersion(f"version {version:#04x}")
    frames: list[tuple] = []
    pos = HEADER_SIZE
    try:
        while pos < end:
            ftype = buf[pos]
            if ftype == FT_STREAM:
                _, sid, off, n, fl = STREAM_HDR.unpack_from(buf, pos)
                pos += STREAM_HDR_SIZE
                if pos + n > end:
                    raise Truncated("stream data runs past end of packet")
                frames.append((FT_STREAM, sid, off, buf[pos:pos + n], fl & 1 == 1))
                pos += n
            elif ftype == FT_ACK:
                _, largest, delay, count, first = ACK_HDR.unpack_from(buf, pos)
                pos += ACK_HDR_SIZE
                if pos + ACK_RANGE.size * count > end:
                    raise Truncated("ack ranges run past end of packet")
                ranges = tuple(ACK_RANGE.iter_unpack(buf[pos:pos + ACK_RANGE.size * count])) if count else ()
                pos += ACK_RANGE.size * count
                frames.append((FT_ACK, largest, delay, first, ranges))
            elif ftype == FT_PADDING:
                pos += 1
            elif ftype == FT_HANDSHAKE:
                if pos + 2 > end:
                    raise Truncated("handshake frame header")
                count = buf[pos + 1]
                pos += 2
                params = []
                for _ in range(count):
                    tag, n = struct.unpack_from("!BH", buf, pos)
                    pos += 3
                    if pos + n > end:
                        raise Truncated("handshake param value")
                    params.append((tag, bytes(buf[pos:pos + n])))
                    pos += n
                frames.append((FT_HANDSHAKE, tuple(params)))
            elif ftype == FT_MAX_DATA:
                _, limit = MAX_DATA.unpack_from(buf, pos)
                pos += MAX_DATA.size
                frames.append((FT_MAX_DATA, limit))
            elif ftype == FT_MAX_STREAM_DATA:
                _, sid, limit = MAX_STREAM_DATA.unpack_from(buf, pos)
                pos += MAX_STREAM_DATA.size
                frames.append((FT_MAX_STREAM_DATA, sid, limit))
            else:
                raise UnknownFrameType(f"frame type {ftype:#04x} at byte {pos}")
    except struct.error as exc:
        raise Truncated(str(exc)) from None
    return flags, cid, pn, frames


def decode_packet(buf) -> tuple[PacketHeader, list[Frame]]:
    buf = bytes(buf)
    flags, cid, pn, raw = decode_packet_raw(buf)
    frames: list[Frame] = []
    # padding is collapsed by the raw parser; count the bytes it skipped
    pos = HEADER_SIZE
    for f in raw:
        while buf[pos] == FT_PADDING:
            frames.append(Padding())
            pos += 1
        t = f[0]
        if t == FT_STREAM:
            frames.append(StreamFrame(f[1], f[2], f[3], f[4]))
            pos += STREAM_HDR_SIZE + len(f[3])
        elif t == FT_ACK:
            frames.append(AckFrame(f[1], f[3], f[4], f[2]))
            pos += ACK_HDR_SIZE + ACK_RANGE.size * len(f[4])
        elif t == FT_HANDSHAKE:
            frames.append(HandshakeFrame(f[1]))
            pos += 2 + sum(3 + len(v) for _, v in f[1])
        elif t == FT_MAX_DATA:
            frames.append(MaxDataFrame(f[1]))
            pos += MAX_DATA.size
        else:
            frames.append(MaxStreamDataFrame(f[1], f[2]))
            pos += MAX_STREAM_DATA.size
    frames.extend(Padding() for _ in range(len(buf) - pos))
    return PacketHeader(connection_id=cid, packet_number=pn, flags=flags, version=VERSION), frames


def ack_ranges_inclusive(largest: int, first_run_length: int, ranges) -> list[tuple[int, int]]:
    """Inclusive (low, high) packet-number ranges, newest first."""
    high = largest
    low = high - first_run_length + 1
    out = [(low, high)]
    for gap, run in ranges:
        high = low - gap - 1
        low = high - run + 1
        out.append((low, high))
    return out


def encode_ack_raw(ranges_desc: list[tuple[int, int]], ack_delay_us: int) -> bytes:
    """ACK frame bytes straight from inclusive ranges (newest first, already capped)."""
    low, high = ranges_desc[0]
    parts = [ACK_HDR.pack(FT_ACK, high, ack_delay_us, len(ranges_desc) - 1, high - low + 1)]
    prev_low = low
    for lo, hi in ranges_desc[1:]:
        parts.append(ACK_RANGE.pack(prev_low - hi - 1, hi - lo + 1))
        prev_low = lo
    return b"".join(parts)


def ack_from_ranges(ranges_desc: list[tuple[int, int]], ack_delay_us: int = 0, max_ranges: int = 32) -> AckFrame:
    """Build an ACK frame from inclusive (low, high) ranges sorted newest first."""
    ranges_desc = ranges_desc[:max_ranges]
    low, high = ranges_desc[0]
    out = []
    prev_low = low
    for lo, hi in ranges_desc[1:]:
        out.append((prev_low - hi - 1, hi - lo + 1))
        prev_low = lo
    return AckFrame(high, high - low + 1, tuple(out), ack_delay_us)


def ranges_from_set(received: Iterable[int]) -> list[tuple[int, int]]:
    """Collapse packet numbers into inclusive (low, high) ranges, newest first."""
    pns = sorted(set(received), reverse=True)
    if not pns:
        raise EmptySet("no packet numbers to acknowledge")
    out = []
    high = low = pns[0]
    for pn in pns[1:]:
        if pn == low - 1:
            low = pn
        else:
            out.append((low, high))
            high = low = pn
    out.append((low, high))
    return out


def encode_ack_ranges(received: Iterable[int], cfg: WireConfig = WireConfig(), ack_delay_us: int = 0) -> AckFrame:
    return ack_from_ranges(ranges_from_set(received), ack_delay_us, cfg.max_ack_ranges)


def decode_ack_ranges(ack: AckFrame) -> set[int]:
    return ack.packet_numbers()


def encode_handshake_params(unreliable_supported: bool, max_data: int | None = None,
                            max_stream_data: int | None = None) -> HandshakeFrame:
    params = [(TAG_UNRELIABLE_SUPPORTED, bytes((1 if unreliable_supported else 0,)))]
    if max_data is not None:
        params.append((TAG_INITIAL_MAX_DATA, max_data.to_bytes(8, "big")))
    if max_stream_data is not None:
        params.append((TAG_INITIAL_MAX_STREAM_DATA, max_stream_data.to_bytes(8, "big")))
    return HandshakeFrame(tuple(params))


def decode_handshake_params(frame: HandshakeFrame) -> dict:
    """Unknown tags are skipped, as a peer may advertise parameters we do not use."""
    out: dict = {}
    for tag, value in frame.params:
        if tag == TAG_UNRELIABLE_SUPPORTED and len(value) == 1:
            out["unreliable_supported"] = value[0] == 1
        elif tag == TAG_INITIAL_MAX_DATA and len(value) == 8:
            out["initial_max_data"] = int.from_bytes(value, "big")
        elif tag == TAG_INITIAL_MAX_STREAM_DATA and len(value) == 8:
            out["initial_max_stream_data"] = int.from_bytes(value, "big")
    return out
