import argparse
import logging
from pathlib import Path
from typing import Any, Dict

from jinja2 import Environment, FileSystemLoader

from app.commands.common import output_dir, parse_sizes
from app.config import RunConfig
from app.models import Precision
from app.schemas import BenchReport
from app.services.verify import report_to_csv, run_scaling_benchmark
from app.storage import write_atomic, write_manifest

logger = logging.getLogger(__name__)

templates_path = Path(__file__).resolve().parent.parent / "templates"
templates = Environment(
    loader=FileSystemLoader(str(templates_path)),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


def add_parser(subparsers) -> None:
    parser = subparsers.add_parser(
        "bench", help="vanilla vs. height attention scaling sweep"
    )
    parser.add_argument("--sizes", default=None, help="ascending grid sizes, e.g. 4x4x4,8x8x4")
    parser.add_argument("--repeats", type=int, default=None, help="timed runs per size (>= 3)")
    parser.set_defaults(handler=run, overrides=config_overrides)


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "bench_sizes": parse_sizes(args.sizes) if args.sizes else None,
        "bench_repeats": args.repeats,
    }


def render_summary(report: BenchReport) -> str:
    by_size: Dict[str, Dict[str, Any]] = {}
    for rec in report.records:
        key = "x".join(str(d) for d in rec.size)
        row = by_size.setdefault(key, {"size": key, "tokens": rec.tokens})
        row[rec.op] = rec
    rows = list(by_size.values())
    for row in rows:
        vanilla = row["vanilla_attention"].macs_measured
        height = row["height_attention"].macs_measured
        row["ratio"] = vanilla / height if height else None
    return templates.get_template("bench_summary.txt.j2").render(report=report, rows=rows)


def run(args: argparse.Namespace, config: RunConfig) -> int:
    report = run_scaling_benchmark(
        config.bench_sizes,
        config.partition,
        config.bench_channels,
        repeats=config.bench_repeats,
        seed=config.seed,
        dtype=Precision(config.bench_precision).dtype,
        parallel=config.parallel,
        workers=config.workers,
        chunk_size=config.chunk_size,
    )
    out = output_dir(args)
    summary = render_summary(report)
    artifacts = [
        write_atomic(out / "bench.csv", report_to_csv(report).encode("utf-8")),
        write_atomic(out / "bench_summary.txt", summary.encode("utf-8")),
    ]
    write_manifest(out, "bench", config.seed, config.summary(), artifacts)
    logger.info(f"Wrote {artifacts[0]} and {artifacts[1]}")
    print(summary, end="")
    return 0
