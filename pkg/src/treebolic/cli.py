"""Command line harness: ``treebolic <subcommand> --config <path> [--seed N] [--out DIR]``.

Every run writes ``<subcommand>.csv`` and ``<subcommand>.json`` into the
output directory.  Both embed the config hash and seed; the wall-clock
timestamp appears only in the ``#`` header line of the CSV, so the JSON file
and all data rows are byte-identical across repeated runs.

Exit codes: 0 pass, 2 statistical check failed, 1 configuration or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import math
import os
import sys
from typing import Optional, Sequence

from . import __version__
from .experiments import EXPERIMENTS, ExperimentConfig, Report, sample_exits

log = logging.getLogger("treebolic")

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_STAT_FAIL = 2


def _clean(v):
    """JSON-safe value: NaN and infinities become ``None``."""
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        return _clean(v.item())
    return v


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def render_csv(report: Report, meta: Optional[dict] = None) -> str:
    buf = io.StringIO()
    if meta is not None:
        buf.write("# " + json.dumps(_clean(meta), sort_keys=True) + "\n")
    cols = report.columns()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in report.rows:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def render_json(report: Report, cfg: ExperimentConfig) -> str:
    doc = {"experiment": report.name, "config_hash": cfg.hash(), "seed": cfg.sim.get("seed", 0),
           "replicas": cfg.replicas, "config": cfg.to_json(), "passed": report.passed,
           "summary": report.summary, "rows": report.rows}
    return json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n"


def load_config(path: Optional[str], seed: Optional[int]) -> ExperimentConfig:
    raw = {}
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("config must be a JSON object")
    if seed is not None:
        raw.setdefault("sim", {})["seed"] = int(seed)
    return ExperimentConfig.from_json(raw)


def run_experiment(name: str, cfg: ExperimentConfig, out: str, fmt: str, stream=None) -> int:
    report = EXPERIMENTS[name](cfg)
    os.makedirs(out, exist_ok=True)
    meta = {"experiment": name, "config_hash": cfg.hash(), "seed": cfg.sim.get("seed", 0),
            "replicas": f"{cfg.sim.get('replica', 0)}..{cfg.sim.get('replica', 0) + cfg.replicas - 1}",
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "version": __version__}
    csv_text = render_csv(report, meta)
    json_text = render_json(report, cfg)
    with open(os.path.join(out, f"{name}.csv"), "w") as fh:
        fh.write(csv_text)
    with open(os.path.join(out, f"{name}.json"), "w") as fh:
        fh.write(json_text)
    stream = stream or sys.stdout
    stream.write(json_text if fmt == "json" else csv_text)
    return EXIT_PASS if report.passed else EXIT_STAT_FAIL


def run_sample_exits(cfg: ExperimentConfig, out: str, stream=None) -> int:
    batch = sample_exits(cfg)
    os.makedirs(out, exist_ok=True)
    meta = {"experiment": "sample-exits", "config_hash": cfg.hash(), "seed": cfg.sim.get("seed", 0),
            "replicas": f"{cfg.sim.get('replica', 0)}..{cfg.sim.get('replica', 0) + cfg.replicas - 1}",
            "config": cfg.to_json(), "domain": batch.domain.describe(),
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
    buf = io.StringIO()
    batch.write_jsonl(buf, _clean(meta))
    with open(os.path.join(out, "exits.jsonl"), "w") as fh:
        fh.write(buf.getvalue())
    stream = stream or sys.stdout
    stream.write(json.dumps({"n": len(batch), "horizontal": int(batch.horizontal.sum()),
                             "config_hash": cfg.hash()}) + "\n")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="treebolic", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    commands = dict(EXPERIMENTS)
    commands["sample-exits"] = sample_exits
    for name, fn in commands.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").split("\n")[0])
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override sim.seed")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("--format", choices=("json", "csv"), default="json",
                       help="primary emission on stdout")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "sample-exits":
            return run_sample_exits(cfg, args.out)
        return run_experiment(args.command, cfg, args.out, args.format)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            log.exception("traceback")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
