"""End-to-end acceptance checks, one test per criterion.

The matrix-backed criteria run the full default experiment (4 modes x 8 loss
rates x 10 repetitions on the 7106-frame trace). Expect this module to take
hours of wall-clock time on a single core.
"""
import math
import time
from pathlib import Path

import pytest

import test_fec
import test_netem
import test_transport
import test_wire
from clipstream.harness import (
    DEFAULT_LOSS_RATES,
    ExperimentConfig,
    emit_report,
    run_matrix,
    run_seed,
    simulate,
)
from clipstream.media import generate_trace
from clipstream.netem import LinkConfig
from clipstream.transport import CONTROL_STREAM

RESULTS = Path(__file__).resolve().parent.parent / "results"
MODES = ("tcp_like", "quic_like", "clipstream", "clipstream_fec")


def _medians(report, metric):
    return {(a.mode, a.loss): a.median[metric] for a in report.aggregates}


def _table(report, metric):
    med = _medians(report, metric)
    head = "loss      " + "".join(f"{m:>16}" for m in MODES)
    lines = [head] + [f"{p:<10.4f}" + "".join(f"{med[m, p]:>16.6f}" for m in MODES) for p in DEFAULT_LOSS_RATES]
    return f"median {metric}\n" + "\n".join(lines)


@pytest.fixture(scope="session")
def matrix():
    cfg = ExperimentConfig()
    t0 = time.perf_counter()
    report = run_matrix(cfg)
    wall = time.perf_counter() - t0
    data = emit_report(report, "csv")
    RESULTS.mkdir(exist_ok=True)
    (RESULTS / "default_matrix.csv").write_bytes(data)
    (RESULTS / "default_matrix.gnuplot").write_bytes(emit_report(report, "gnuplot"))
    (RESULTS / "default_matrix_wall_seconds.txt").write_text(f"{wall:.1f}\n")
    return cfg, report, data, wall


@pytest.fixture(scope="session")
def trace():
    return generate_trace()


@pytest.fixture(scope="session")
def zero_loss_runs(trace):
    runs = {}
    for mode in MODES:
        t0 = time.perf_counter()
        detail = simulate(mode, LinkConfig(), trace, seed=run_seed(0, mode, 0.0, 0))
        runs[mode] = (detail, time.perf_counter() - t0)
    return runs


def test_criterion_01_zero_loss_baseline(matrix, zero_loss_runs):
    _, report, _, _ = matrix
    rows = [r for r in report.rows if r.loss == 0.0]
    assert len(rows) == 40
    bad = [(r.mode, r.rep, r.buf_ratio, r.rate_buf) for r in rows
           if not (r.completed and r.buf_ratio < 0.0025 and r.rate_buf < 0.0025)]
    assert not bad, f"zero-loss runs over the 0.25% bound: {bad}"
    for mode, (detail, wall) in zero_loss_runs.items():
        assert detail.row.buf_ratio < 0.0025 and detail.row.rate_buf < 0.0025, mode
        assert wall < 60.0, f"{mode} zero-loss run took {wall:.1f} s"


def test_criterion_02_clipstream_stall_immunity(matrix):
    _, report, _, _ = matrix
    rate, ratio = _medians(report, "rate_buf"), _medians(report, "buf_ratio")
    bad = [(m, p, rate[m, p], ratio[m, p]) for m in ("clipstream", "clipstream_fec") for p in DEFAULT_LOSS_RATES
           if not (rate[m, p] <= 0.0002 and ratio[m, p] <= 0.01)]
    assert not bad, f"cells over bound (mode, loss, rateBuf, bufRatio): {bad}\n{_table(report, 'buf_ratio')}"


def test_criterion_03_protocol_ordering(matrix):
    _, report, _, _ = matrix
    q, b = _medians(report, "assim"), _medians(report, "buf_ratio")
    bad = []
    for p in (p for p in DEFAULT_LOSS_RATES if p >= 0.0032):
        if not q["clipstream_fec", p] >= q["clipstream", p] > q["quic_like", p] >= q["tcp_like", p]:
            bad.append(("aSSIM", p))
        if not b["tcp_like", p] >= b["quic_like", p] > b["clipstream", p] >= b["clipstream_fec", p]:
            bad.append(("bufRatio", p))
    assert not bad, f"ordering violated at {bad}\n{_table(report, 'assim')}\n{_table(report, 'buf_ratio')}"


def test_criterion_04_monotone_degradation(matrix):
    _, report, _, _ = matrix
    q = _medians(report, "assim")
    bad = [(m, p0, p1) for m in MODES for p0, p1 in zip(DEFAULT_LOSS_RATES, DEFAULT_LOSS_RATES[1:])
           if not q[m, p1] <= q[m, p0]]
    assert not bad, f"aSSIM rises between loss rates {bad}\n{_table(report, 'assim')}"


def test_criterion_05_reliability_split(trace, zero_loss_runs):
    i_frames = [f for f in trace.frames if f.frame_type == "I"]
    expect_bytes = sum(f.size for f in i_frames)
    assert len(trace.frames) == 7106 and len(i_frames) == 75
    for mode in ("clipstream", "clipstream_fec"):
        server = zero_loss_runs[mode][0].server
        rel, unrel = server.payload_bytes["reliable"], server.payload_bytes["unreliable"]
        assert server.frame_counts == {"reliable": 75, "unreliable": 7031}
        assert rel == expect_bytes and rel + unrel == trace.total_bytes
        assert abs(rel / (rel + unrel) - 0.12) <= 0.01
        # what actually went onto the reliable frame stream, read back from the connection
        conn = zero_loss_runs[mode][0].world.server
        reliable_streams = [s for sid, s in conn.send_streams.items() if sid != CONTROL_STREAM and sid % 2 == 0]
        assert sum(s.written for s in reliable_streams) == expect_bytes


def test_criterion_06_fec_exhaustive_mds():
    t0 = time.perf_counter()
    test_fec.test_exhaustive_mds_small_codes()
    test_fec.test_three_of_six_is_insufficient()
    assert time.perf_counter() - t0 < 60.0


def test_criterion_07_transport_properties():
    # each of these runs 1000 hypothesis examples
    test_transport.test_reliable_streams_are_byte_exact_under_loss()
    test_transport.test_unreliable_bytes_never_sent_twice()
    test_transport.test_zero_fill_matches_injected_losses()
    test_transport.test_cwnd_and_in_flight_conservation()
    test_wire.test_ack_range_codec_roundtrip_property()


def test_criterion_08_determinism(matrix):
    cfg, _, data, _ = matrix
    again = emit_report(run_matrix(cfg), "csv")
    assert again == data


def test_criterion_09_emulator_calibration():
    test_netem.test_empirical_loss_rate_within_three_sigma()
    test_netem.test_serialization_of_1500_bytes_at_20mbps()


def test_criterion_10_desk_scale_runtime(matrix):
    _, report, _, wall = matrix
    assert len(report.rows) == 320
    assert all(math.isfinite(r.assim) for r in report.rows)
    assert wall < 600.0, f"full matrix took {wall:.0f} s"
