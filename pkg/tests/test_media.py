import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipstream.errors import InvalidParams, InvariantViolation, ParseError
from clipstream.media import (
    FrameRecord,
    GeneratorParams,
    Manifest,
    build_manifest,
    frame_payloads,
    generate_trace,
    parse_trace_csv,
    tag_frame,
    trace_to_csv,
)


@pytest.fixture(scope="module")
def default_trace():
    return generate_trace()


def test_default_counts(default_trace):
    frames = default_trace.frames
    assert len(frames) == 7106
    assert sum(f.frame_type == "I" for f in frames) == 75
    assert sum(f.frame_type != "I" for f in frames) == 7031
    assert default_trace.total_bytes == 176_000_000


def test_default_byte_split(default_trace):
    i_bytes = sum(f.size for f in default_trace.frames if f.frame_type == "I")
    assert i_bytes == round(0.12 * 176e6)
    pb = [f.size for f in default_trace.frames if f.frame_type != "I"]
    assert sum(pb) / len(pb) == pytest.approx(0.88 * 176e6 / 7031)
    assert sum(pb) / len(pb) == pytest.approx(22030, abs=5)


def test_zero_jitter_sizes():
    tr = generate_trace(GeneratorParams(size_jitter=0.0))
    assert {f.size for f in tr.frames if f.frame_type == "I"} == {281_600}


def test_chunks_and_manifest(default_trace):
    chunks = default_trace.layout.chunks
    assert len(chunks) == 75
    assert chunks[0] == (0, 96) and chunks[-1] == (7104, 7106)
    m = build_manifest(default_trace)
    assert Manifest.from_json(m.to_json()) == m
    assert m.chunks == chunks


def test_single_chunk_manifest():
    tr = generate_trace(GeneratorParams(frame_count=96, duration_s=4.0, total_bytes=10_000_000))
    assert len(build_manifest(tr).chunks) == 1


def test_deterministic_per_seed():
    a = generate_trace(GeneratorParams(seed=3))
    b = generate_trace(GeneratorParams(seed=3))
    c = generate_trace(GeneratorParams(seed=4))
    assert a == b
    assert a != c


def test_tags():
    assert tag_frame(FrameRecord(0, 0.0, "I", 1)) == "reliable"
    assert tag_frame(FrameRecord(1, 41.0, "P", 1)) == "unreliable"
    assert tag_frame(FrameRecord(2, 83.0, "B", 1)) == "unreliable"


def test_parse_minimal_csv():
    tr = parse_trace_csv("0,0,I,1000\n1,41,P,100")
    assert [(f.frame_type, f.size) for f in tr.frames] == [("I", 1000), ("P", 100)]


def test_parse_errors():
    with pytest.raises(ParseError):
        parse_trace_csv("")
    with pytest.raises(ParseError):
        parse_trace_csv("0,0,X,10")
    with pytest.raises(ParseError):
        parse_trace_csv("0,0,I,10\n5,41,P,10")
    with pytest.raises(ParseError) as exc:
        parse_trace_csv("index,pts_ms,type,size_bytes\n0,0,I,10\n1,41,P")
    assert exc.value.line == 3


def test_chunk_boundary_must_be_i_frame():
    with pytest.raises(InvariantViolation):
        parse_trace_csv("0,0,I,10\n1,41,P,10", frames_per_chunk=1)


def test_csv_roundtrip(default_trace):
    back = parse_trace_csv(trace_to_csv(default_trace), duration=default_trace.duration)
    assert [(f.frame_type, f.size) for f in back.frames] == [(f.frame_type, f.size) for f in default_trace.frames]


def test_bad_generator_params():
    with pytest.raises(InvalidParams):
        generate_trace(GeneratorParams(total_bytes=10))
    with pytest.raises(InvalidParams):
        generate_trace(GeneratorParams(i_frame_byte_share=1.0))


def test_payloads_cover_trace():
    tr = generate_trace(GeneratorParams(frame_count=200, duration_s=200 / 24, total_bytes=2_000_000))
    pl = frame_payloads(tr, seed=1)
    assert [len(p) for p in pl] == [f.size for f in tr.frames]
    assert bytes(pl[5]) == bytes(frame_payloads(tr, seed=1)[5])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2000), st.integers(0, 1000), st.floats(0.0, 1.0))
def test_generator_shares(n, seed, jitter):
    total = 400 * n
    tr = generate_trace(GeneratorParams(frame_count=n, duration_s=n / 24, total_bytes=total,
                                        size_jitter=jitter, seed=seed))
    assert tr.total_bytes == total
    n_i = sum(f.frame_type == "I" for f in tr.frames)
    assert n_i == -(-n // 96)
    i_share = sum(f.size for f in tr.frames if f.frame_type == "I") / total
    if n > n_i:
        assert abs(i_share - 0.12) <= 0.01
