"""Command-line entry point: ``clipstream run`` and ``clipstream gen-trace``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ClipStreamError, ConfigError
from .harness import DEFAULT_LOSS_RATES, ExperimentConfig, emit_report, run_matrix
from .media import GeneratorParams, generate_trace, trace_to_csv
from .netem import LinkConfig
from .session import ProtocolMode

MODE_ALIASES = {
    "tcp": ProtocolMode.TCP_LIKE,
    "quic": ProtocolMode.QUIC_LIKE,
    "cs": ProtocolMode.CLIPSTREAM,
    "csfec": ProtocolMode.CLIPSTREAM_FEC,
}


def _modes(text: str) -> tuple:
    out = []
    for part in text.split(","):
        part = part.strip()
        if part in MODE_ALIASES:
            out.append(MODE_ALIASES[part])
        else:
            try:
                out.append(ProtocolMode(part))
            except ValueError:
                raise ConfigError(f"unknown mode {part!r}") from None
    return tuple(out)


def _losses(text: str) -> tuple:
    try:
        vals = tuple(float(x) / 100.0 for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad loss list {text!r}") from None
    if not vals:
        raise ConfigError("empty loss list")
    return vals


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clipstream", description="Partially reliable video streaming experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the protocol x loss matrix")
    r.add_argument("--modes", default="tcp,quic,cs,csfec")
    r.add_argument("--loss", default=",".join(repr(round(x * 100, 4)) for x in DEFAULT_LOSS_RATES),
                   help="loss rates in percent, comma separated")
    r.add_argument("--reps", type=int, default=10)
    r.add_argument("--rate-mbps", type=float, default=20.0)
    r.add_argument("--delay-ms", type=float, default=15.0, help="one-way propagation delay")
    r.add_argument("--buffer-pkts", type=int, default=1000)
    r.add_argument("--trace", default="synthetic", help="'synthetic' or a CSV trace path")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--fec", choices=("static", "adaptive"), default="static")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", default="-")
    r.add_argument("--format", choices=("csv", "json", "gnuplot"), default="csv")

    g = sub.add_parser("gen-trace", help="write a synthetic frame trace as CSV to stdout")
    g.add_argument("--duration", type=float, default=296.21)
    g.add_argument("--fps", type=float, default=24.0)
    g.add_argument("--total-mb", type=float, default=176.0)
    g.add_argument("--seed", type=int, default=0)
    return p


def _configure_logging() -> None:
    level = os.environ.get("CLIPSTREAM_LOG", "error").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def _cmd_run(args) -> int:
    modes = _modes(args.modes)
    losses = _losses(args.loss)
    try:
        link = LinkConfig(rate=args.rate_mbps * 1e6, one_way_delay=args.delay_ms * 1000.0,
                          buffer_capacity=args.buffer_pkts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    trace_csv = None if args.trace == "synthetic" else args.trace
    if trace_csv is not None and not os.path.exists(trace_csv):
        raise ConfigError(f"trace file {trace_csv!r} not found")
    cfg = ExperimentConfig(modes=modes, loss_rates=losses, repetitions=args.reps, link=link,
                           trace_csv=trace_csv, base_seed=args.seed, fec_mode=args.fec,
                           workers=max(1, args.workers))
    data = emit_report(run_matrix(cfg), args.format)
    if args.out == "-":
        sys.stdout.buffer.write(data)
    else:
        with open(args.out, "wb") as fh:
            fh.write(data)
    return 0


def _cmd_gen_trace(args) -> int:
    if args.duration <= 0 or args.fps <= 0 or args.total_mb <= 0:
        raise ConfigError("duration, fps and total size must be positive")
    defaults = GeneratorParams()
    # the reference clip has a known frame count; other durations derive it from fps
    same_clip = (args.duration, args.fps) == (defaults.duration_s, defaults.fps)
    params = GeneratorParams(duration_s=args.duration, fps=args.fps, total_bytes=round(args.total_mb * 1e6),
                             seed=args.seed, frame_count=defaults.frame_count if same_clip else None)
    sys.stdout.write(trace_to_csv(generate_trace(params)))
    return 0


def main(argv=None) -> int:
    _configure_logging()
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_gen_trace(args)
    except ClipStreamError as exc:
        print(f"clipstream: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head)
        sys.stderr.close()
        return 0


if __name__ == "__main__":
    sys.exit(main())
