"""Video frame traces: generation, CSV ingestion, reliability tags and manifests."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidParams, InvariantViolation, ParseError

CSV_HEADER = ["index", "pts_ms", "type", "size_bytes"]
FRAME_TYPES = ("I", "P", "B")

# Table-1 frame counts: 75 I-frames + 7031 P/B frames.
DEFAULT_FRAME_COUNT = 7106


@dataclass(frozen=True, slots=True)
class FrameRecord:
    index: int
    pts: float  # ms
    frame_type: str
    size: int

    @property
    def reliable(self) -> bool:
        return tag_frame(self) == "reliable"


@dataclass(frozen=True)
class ChunkLayout:
    frames_per_chunk: int
    chunks: tuple[tuple[int, int], ...]  # [start, end)

    @classmethod
    def for_count(cls, n_frames: int, frames_per_chunk: int = 96) -> "ChunkLayout":
        if frames_per_chunk < 1:
            raise InvalidParams("frames_per_chunk must be >= 1")
        chunks = tuple((s, min(s + frames_per_chunk, n_frames)) for s in range(0, n_frames, frames_per_chunk))
        return cls(frames_per_chunk, chunks)

    def chunk_of(self, index: int) -> int:
        return index // self.frames_per_chunk


@dataclass(frozen=True)
class VideoTrace:
    fps: float
    frames: tuple[FrameRecord, ...]
    duration: float  # seconds
    frames_per_chunk: int = 96
    seed: int | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def layout(self) -> ChunkLayout:
        return ChunkLayout.for_count(len(self.frames), self.frames_per_chunk)

    @property
    def total_bytes(self) -> int:
        return sum(f.size for f in self.frames)

    def validate(self) -> None:
        if self.fps <= 0:
            raise InvariantViolation("fps must be positive")
        for i, f in enumerate(self.frames):
            if f.index != i:
                raise InvariantViolation(f"frame {i} carries index {f.index}")
            if f.size < 1:
                raise InvariantViolation(f"frame {i} has size {f.size}")
            if f.frame_type not in FRAME_TYPES:
                raise InvariantViolation(f"frame {i} has type {f.frame_type!r}")
            if i % self.frames_per_chunk == 0 and f.frame_type != "I":
                raise InvariantViolation(f"chunk starting at frame {i} does not start with an I-frame")


@dataclass(frozen=True)
class GeneratorParams:
    duration_s: float = 296.21
    fps: float = 24.0
    total_bytes: int = 176_000_000
    i_frame_byte_share: float = 0.12
    i_frame_count_share: float = 1 / 96
    size_jitter: float = 0.2
    seed: int = 0
    # None derives the count from duration * fps
    frame_count: int | None = DEFAULT_FRAME_COUNT

    def n_frames(self) -> int:
        if self.frame_count is not None:
            return self.frame_count
        return round(self.duration_s * self.fps)

    def frames_per_chunk(self) -> int:
        return round(1 / self.i_frame_count_share)


def pts_ms(index: int, fps: float) -> float:
    return index * 1000.0 / fps


def _apportion(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer sizes proportional to weights, summing exactly to total (largest remainder)."""
    exact = weights * (total / weights.sum())
    sizes = np.floor(exact).astype(np.int64)
    short = total - int(sizes.sum())
    if short:
        order = np.argsort(-(exact - sizes), kind="stable")
        sizes[order[:short]] += 1
    return sizes


def generate_trace(params: GeneratorParams = GeneratorParams()) -> VideoTrace:
    p = params
    if not (0 < p.i_frame_byte_share < 1 and 0 < p.i_frame_count_share < 1):
        raise InvalidParams("frame shares must lie strictly between 0 and 1")
    if p.fps <= 0 or p.duration_s <= 0 or p.total_bytes <= 0 or p.size_jitter < 0:
        raise InvalidParams("fps, duration, total_bytes must be positive and jitter >= 0")
    n = p.n_frames()
    fpc = p.frames_per_chunk()
    if n < 1:
        raise InvalidParams("trace would contain no frames")
    is_i = np.arange(n) % fpc == 0
    n_i = int(is_i.sum())
    n_pb = n - n_i
    # an all-I trace (at most one chunk of one frame) takes every byte
    i_bytes = round(p.total_bytes * p.i_frame_byte_share) if n_pb else p.total_bytes
    pb_bytes = p.total_bytes - i_bytes
    if i_bytes < n_i or (n_pb and pb_bytes < n_pb):
        raise InvalidParams("per-frame mean size would be below one byte")

    rng = np.random.default_rng(p.seed)
    if p.size_jitter > 0:
        sigma = math.sqrt(math.log1p(p.size_jitter ** 2))
        weights = rng.lognormal(-sigma * sigma / 2, sigma, size=n)
    else:
        weights = np.ones(n)
    sizes = np.empty(n, dtype=np.int64)
    sizes[is_i] = _apportion(weights[is_i], i_bytes)
    if n_pb:
        sizes[~is_i] = _apportion(weights[~is_i], pb_bytes)
    if (sizes < 1).any():
        raise InvalidParams("jitter produced an empty frame")

    frames = []
    for i in range(n):
        pos = i % fpc
        if pos == 0:
            ftype = "I"
        elif pos % 3 == 0:
            ftype = "P"
        else:
            ftype = "B"
        frames.append(FrameRecord(i, pts_ms(i, p.fps), ftype, int(sizes[i])))
    trace = VideoTrace(p.fps, tuple(frames), p.duration_s, fpc, seed=p.seed)
    trace.validate()
    return trace


def trace_to_csv(trace: VideoTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for f in trace.frames:
        w.writerow([f.index, int(f.pts), f.frame_type, f.size])
    return buf.getvalue()


def parse_trace_csv(text: str, fps: float = 24.0, frames_per_chunk: int = 96,
                    duration: float | None = None) -> VideoTrace:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("empty trace", 1)
    start = 0
    header = [c.strip() for c in lines[0].split(",")]
    if header == CSV_HEADER:
        start = 1
    elif not header[0].lstrip("-").isdigit():
        raise ParseError(f"unexpected header {lines[0]!r}", 1)
    frames = []
    for lineno, row in enumerate(csv.reader(lines[start:]), start=start + 1):
        if not row or not "".join(row).strip():
            continue
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
        try:
            index = int(row[0])
            pts = float(row[1])
            size = int(row[3])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        ftype = row[2].strip().upper()
        if ftype not in FRAME_TYPES:
            raise ParseError(f"unknown frame type {row[2]!r}", lineno)
        if index != len(frames):
            raise ParseError(f"expected index {len(frames)}, got {index}", lineno)
        if size < 1:
            raise ParseError(f"frame size must be >= 1, got {size}", lineno)
        if abs(pts - pts_ms(index, fps)) >= 1.0:
            raise ParseError(f"pts {pts} does not match index {index} at {fps} fps", lineno)
        frames.append(FrameRecord(index, pts, ftype, size))
    if not frames:
        raise ParseError("trace has no frames", len(lines))
    trace = VideoTrace(fps, tuple(frames), duration if duration is not None else len(frames) / fps, frames_per_chunk)
    trace.validate()
    return trace


def tag_frame(frame: FrameRecord) -> str:
    return "reliable" if frame.frame_type == "I" else "unreliable"


@dataclass(frozen=True)
class Manifest:
    fps: float
    duration_s: float
    frames_per_chunk: int
    frames: tuple[dict, ...]

    @property
    def chunks(self) -> tuple[tuple[int, int], ...]:
        return ChunkLayout.for_count(len(self.frames), self.frames_per_chunk).chunks

    def to_json(self) -> str:
        return json.dumps({
            "fps": self.fps,
            "duration_s": self.duration_s,
            "frames_per_chunk": self.frames_per_chunk,
            "frames": list(self.frames),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        obj = json.loads(text)
        return cls(obj["fps"], obj["duration_s"], obj["frames_per_chunk"], tuple(obj["frames"]))


def build_manifest(trace: VideoTrace, layout: ChunkLayout | None = None) -> Manifest:
    layout = layout or trace.layout
    frames = tuple(
        {"index": f.index, "pts_ms": f.pts, "type": f.frame_type, "size": f.size, "reliable": f.reliable}
        for f in trace.frames
    )
    return Manifest(trace.fps, trace.duration, layout.frames_per_chunk, frames)


@lru_cache(maxsize=4)
def _payload_blob(total: int, seed: int) -> bytes:
    return np.random.default_rng(seed).bytes(total)


def frame_payloads(trace: VideoTrace, seed: int = 0) -> list[memoryview]:
    """Deterministic synthetic frame contents (the bitstream itself is out of scope)."""
    blob = memoryview(_payload_blob(trace.total_bytes, seed))
    out = []
    off = 0
    for f in trace.frames:
        out.append(blob[off:off + f.size])
        off += f.size
    return out
