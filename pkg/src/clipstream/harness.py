"""Experiment driver: protocol x loss matrix, aggregation and report emission."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache

from .errors import ConfigError
from .media import GeneratorParams, VideoTrace, build_manifest, frame_payloads, generate_trace, parse_trace_csv
from .netem import DuplexLink, LinkConfig, World
from .player import PlaybackConfig, assim, buf_ratio, frame_ssim, mos_class, rate_buf, simulate_playback
from .session import MISSING, FrameStatus, ProtocolMode, VideoClient, VideoServer
from .transport import Connection, TransportParams

log = logging.getLogger(__name__)

US_PER_S = 1_000_000.0
DEFAULT_LOSS_RATES = (0.0, 0.0008, 0.0016, 0.0032, 0.0064, 0.0128, 0.0256, 0.0512)
ALL_MODES = tuple(ProtocolMode)
METRICS = ("buf_ratio", "rate_buf", "assim")


@dataclass(frozen=True)
class ExperimentConfig:
    modes: tuple = ALL_MODES
    loss_rates: tuple = DEFAULT_LOSS_RATES
    repetitions: int = 10
    link: LinkConfig = field(default_factory=LinkConfig)
    trace_params: GeneratorParams = field(default_factory=GeneratorParams)
    trace_csv: str | None = None  # path; overrides trace_params
    base_seed: int = 0
    deadline_factor: float = 4.0
    fec_mode: str = "static"
    workers: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.deadline_factor <= 1.0:
            raise ConfigError("the virtual deadline must exceed the video duration")
        if not self.modes:
            raise ConfigError("at least one mode is required")
        object.__setattr__(self, "modes", tuple(ProtocolMode(m) for m in self.modes))
        object.__setattr__(self, "loss_rates", tuple(float(p) for p in self.loss_rates))
        for p in self.loss_rates:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"loss rate {p} outside [0, 1]")
        if self.fec_mode not in ("static", "adaptive"):
            raise ConfigError(f"unknown fec mode {self.fec_mode!r}")


@dataclass(frozen=True)
class RunRow:
    mode: str
    loss: float
    rep: int
    seed: int
    buf_ratio: float
    rate_buf: float
    assim: float
    mos: str
    startup_delay: float  # seconds
    bytes_sent: int
    fec_overhead_ratio: float
    completed: bool

    def sort_key(self):
        return (ALL_MODES.index(ProtocolMode(self.mode)), self.loss, self.rep)


@dataclass(frozen=True)
class Aggregate:
    mode: str
    loss: float
    n: int
    mean: dict
    median: dict
    stddev: dict


@dataclass
class RunReport:
    rows: list[RunRow]
    aggregates: list[Aggregate]


def run_seed(base_seed: int, mode, loss: float, rep: int) -> int:
    digest = hashlib.sha256(f"{ProtocolMode(mode).value}|{loss!r}|{rep}".encode()).digest()
    return (base_seed ^ int.from_bytes(digest[:8], "big")) & 0xFFFFFFFFFFFFFFFF


@lru_cache(maxsize=4)
def load_trace(params: GeneratorParams, csv_path: str | None) -> VideoTrace:
    if csv_path is None:
        return generate_trace(params)
    with open(csv_path) as fh:
        return parse_trace_csv(fh.read(), fps=params.fps, frames_per_chunk=params.frames_per_chunk())


@dataclass
class RunDetail:
    """Everything a run produced; ``row`` is the reportable summary."""

    row: RunRow
    statuses: list
    server: VideoServer
    client: VideoClient
    world: World
    events: object


def simulate(mode, link_cfg: LinkConfig, trace: VideoTrace, seed: int, deadline: float | None = None,
             fec_mode: str = "static", verify: bool = False, transport_params: TransportParams | None = None,
             client_params: TransportParams | None = None) -> RunDetail:
    mode = ProtocolMode(mode)
    if deadline is None:
        deadline = 4.0 * trace.duration * US_PER_S
    params = transport_params or TransportParams()
    server_conn = Connection(False, params, connection_id=seed & 0xFFFFFFFFFFFFFFFF)
    client_conn = Connection(True, client_params or params, connection_id=seed & 0xFFFFFFFFFFFFFFFF)
    link = DuplexLink(link_cfg.with_seed(seed))
    world = World(server_conn, client_conn, link)
    server = VideoServer(trace, server_conn, mode, fec_mode=fec_mode)
    expected = frame_payloads(trace) if verify else None
    client = VideoClient(client_conn, mode, build_manifest(trace), expected=expected)

    def app(now):
        server.serve(now)
        client.reassemble(now)

    world.app_hooks.append(app)
    client_conn.connect(0.0)
    world.run(deadline, stop=lambda: client.complete)
    completed = client.complete
    statuses = [st if st is not None else FrameStatus(i, MISSING, math.inf, not mode.partially_reliable or trace.frames[i].reliable)
                for i, st in enumerate(client.statuses)]
    cfg = PlaybackConfig(trace.fps, trace.frames_per_chunk)
    events = simulate_playback(statuses, cfg, deadline)
    ssims = frame_ssim(events.displayed, cfg.quality_model, trace.frames_per_chunk)
    a = assim(ssims, events, cfg)
    duration_us = trace.duration * US_PER_S
    overhead = (server.coded_bytes - server.coded_payload_bytes) / trace.total_bytes if server.coded_bytes else 0.0
    row = RunRow(
        mode=mode.value,
        loss=link_cfg.loss_rate,
        rep=-1,
        seed=seed,
        buf_ratio=buf_ratio(events, duration_us),
        rate_buf=rate_buf(events, len(trace.frames)),
        assim=a,
        mos=mos_class(min(1.0, max(0.0, a))),
        startup_delay=min(events.start_time, deadline) / US_PER_S,
        bytes_sent=server_conn.bytes_sent,
        fec_overhead_ratio=overhead,
        completed=completed,
    )
    return RunDetail(row, statuses, server, client, world, events)


def run_once(mode, link_cfg: LinkConfig, trace: VideoTrace, seed: int, deadline: float | None = None,
             fec_mode: str = "static", rep: int = -1) -> RunRow:
    row = simulate(mode, link_cfg, trace, seed, deadline, fec_mode).row
    return replace(row, rep=rep)


def _run_job(job) -> RunRow:
    cfg, mode, loss, rep = job
    trace = load_trace(cfg.trace_params, cfg.trace_csv)
    seed = run_seed(cfg.base_seed, mode, loss, rep)
    link = replace(cfg.link, loss_rate=loss)
    deadline = cfg.deadline_factor * trace.duration * US_PER_S
    row = run_once(mode, link, trace, seed, deadline, cfg.fec_mode, rep)
    log.info("%s loss=%.4f rep=%d bufRatio=%.5f rateBuf=%.6f aSSIM=%.4f completed=%s",
             row.mode, loss, rep, row.buf_ratio, row.rate_buf, row.assim, row.completed)
    return row


def aggregate(rows: list[RunRow], modes, loss_rates) -> list[Aggregate]:
    out = []
    for mode in modes:
        mode = ProtocolMode(mode).value
        for loss in loss_rates:
            cell = [r for r in rows if r.mode == mode and r.loss == loss]
            mean, median, sd = {}, {}, {}
            for m in METRICS:
                # failed runs carry NaN metrics and are left out of the statistics
                vals = [v for v in (getattr(r, m) for r in cell) if math.isfinite(v)]
                if vals:
                    mean[m] = statistics.fmean(vals)
                    median[m] = statistics.median(vals)
                    sd[m] = statistics.pstdev(vals) if len(vals) > 1 else 0.0
                else:
                    mean[m] = median[m] = sd[m] = math.nan
            out.append(Aggregate(mode, loss, len(cell), mean, median, sd))
    return out


def _safe_job(job) -> RunRow:
    try:
        return _run_job(job)
    except Exception:  # a broken run must not sink the matrix
        cfg, mode, loss, rep = job
        log.exception("run %s loss=%s rep=%d failed", mode, loss, rep)
        return RunRow(ProtocolMode(mode).value, loss, rep, run_seed(cfg.base_seed, mode, loss, rep),
                      math.nan, math.nan, math.nan, "bad", math.nan, 0, math.nan, False)


def run_matrix(cfg: ExperimentConfig) -> RunReport:
    jobs = [(cfg, mode, loss, rep) for mode in cfg.modes for loss in cfg.loss_rates for rep in range(cfg.repetitions)]
    load_trace(cfg.trace_params, cfg.trace_csv)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_safe_job, jobs, chunksize=1))
    else:
        rows = [_safe_job(job) for job in jobs]
    rows.sort(key=RunRow.sort_key)
    return RunReport(rows, aggregate(rows, cfg.modes, cfg.loss_rates))


# --------------------------------------------------------------------------
# report formats

ROW_FIELDS = [f.name for f in fields(RunRow)]
AGG_FIELDS = ["mode", "loss", "n"] + [f"{stat}_{m}" for stat in ("mean", "median", "stddev") for m in METRICS]
AGG_MARKER = "#aggregates"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _agg_values(a: Aggregate) -> list:
    vals = [a.mode, a.loss, a.n]
    for stat in (a.mean, a.median, a.stddev):
        vals.extend(stat[m] for m in METRICS)
    return vals


def emit_report(report: RunReport, fmt: str = "csv") -> bytes:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in report.rows:
            w.writerow([_fmt(getattr(r, name)) for name in ROW_FIELDS])
        if report.aggregates:
            buf.write(AGG_MARKER + "\n")
            w.writerow(AGG_FIELDS)
            for a in report.aggregates:
                w.writerow([_fmt(v) for v in _agg_values(a)])
        return buf.getvalue().encode()
    if fmt == "json":
        obj = {"runs": [asdict(r) for r in report.rows], "aggregates": [asdict(a) for a in report.aggregates]}
        return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()
    if fmt == "gnuplot":
        modes = list(dict.fromkeys(a.mode for a in report.aggregates))
        losses = sorted(set(a.loss for a in report.aggregates))
        cells = {(a.mode, a.loss): a for a in report.aggregates}
        blocks = []
        for m in METRICS:
            lines = [f"# median {m}", "loss_pct " + " ".join(modes)]
            for loss in losses:
                vals = [repr(cells[(mode, loss)].median[m]) if (mode, loss) in cells else "NaN" for mode in modes]
                lines.append(" ".join([repr(round(loss * 100, 6))] + vals))
            blocks.append("\n".join(lines))
        return ("\n\n\n".join(blocks) + "\n").encode()
    raise ConfigError(f"unknown report format {fmt!r}")


def _parse(value: str, kind):
    if kind is bool:
        return value == "true"
    return kind(value)


def parse_report_csv(data: bytes | str) -> RunReport:
    text = data.decode() if isinstance(data, bytes) else data
    run_part, _, agg_part = text.partition(AGG_MARKER + "\n")
    kinds = {"mode": str, "loss": float, "rep": int, "seed": int, "buf_ratio": float, "rate_buf": float,
             "assim": float, "mos": str, "startup_delay": float, "bytes_sent": int,
             "fec_overhead_ratio": float, "completed": bool}
    rows = []
    reader = csv.reader(io.StringIO(run_part))
    header = next(reader, None)
    if header is not None and header != ROW_FIELDS:
        raise ValueError(f"unexpected run header {header}")
    for rec in reader:
        if rec:
            rows.append(RunRow(**{k: _parse(v, kinds[k]) for k, v in zip(ROW_FIELDS, rec)}))
    aggs = []
    if agg_part:
        reader = csv.reader(io.StringIO(agg_part))
        next(reader)
        for rec in reader:
            if not rec:
                continue
            nums = [float(v) for v in rec[3:]]
            k = len(METRICS)
            aggs.append(Aggregate(rec[0], float(rec[1]), int(rec[2]),
                                  dict(zip(METRICS, nums[:k])), dict(zip(METRICS, nums[k:2 * k])),
                                  dict(zip(METRICS, nums[2 * k:]))))
    return RunReport(rows, aggs)
