"""Command line: run, audit, report, synth, export-scores.

Exit codes: 0 success, 1 config error, 2 some grid cells failed, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .synthgen import InvalidSpecError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("advbias")


def _cmd_run(args) -> int:
    from .harness import ExperimentConfig, run_grid

    cfg = ExperimentConfig.load(args.config)
    total = cfg.cell_count
    count = 0

    def progress(res):
        nonlocal count
        count += 1
        status = "" if res.status == "ok" else f" [{res.status}]"
        log.info("cell %d: %s%s", count, res.key, status)

    summary = run_grid(cfg, out_dir=args.out, workers=args.workers, resume=args.resume, progress=progress)
    log.info("%d cells: %d run, %d skipped, %d failed -> %s", total, summary.ran, summary.skipped,
             summary.failed, summary.out_dir)
    return summary.exit_code


def _cmd_audit(args) -> int:
    from .harness import AuditInput, emit_report, run_audit
    from .harness.audit import write_rejections

    inp = AuditInput.from_csv(args.input)
    res = run_audit(inp)
    out = Path(args.out)
    emit_report(res.bundle, out)
    write_rejections(out / "rejected_rows.csv", res.rejected)
    if res.rejected:
        log.warning("%d malformed rows rejected; see %s", len(res.rejected), out / "rejected_rows.csv")
    for n in res.bundle.notices:
        log.info("notice: %s", n)
    return EXIT_OK


def _cmd_report(args) -> int:
    from .harness import ResultsBundle, emit_report

    emit_report(ResultsBundle.load(args.results), args.out)
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .synthgen import generate_cohort, load_spec

    generate_cohort(load_spec(args.config)).to_csv(args.out)
    return EXIT_OK


def _cmd_export(args) -> int:
    from .harness import export_scores

    n = export_scores(args.results, args.out)
    log.info("wrote %d rows to %s", n, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advbias", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run (or resume) a poisoning grid")
    r.add_argument("--config", required=True)
    r.add_argument("--workers", type=int, default=None,
                   help="parallel cells (default: $ADVBIAS_WORKERS or 1)")
    r.add_argument("--resume", action="store_true", help="skip cells already completed")
    r.add_argument("--out", default=None, help="results directory (default: config output_dir)")
    r.set_defaults(fn=_cmd_run)

    a = sub.add_parser("audit", help="vulnerability audit of supplied scores")
    a.add_argument("--input", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=_cmd_audit)

    rp = sub.add_parser("report", help="rebuild report tables from a results directory")
    rp.add_argument("--results", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=_cmd_report)

    s = sub.add_parser("synth", help="export a synthetic cohort as CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_synth)

    e = sub.add_parser("export-scores", help="write a grid's scores in audit input format")
    e.add_argument("--results", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=_cmd_export)
    return p


def main(argv=None) -> int:
    from .harness import ConfigError, EmptyResultsError, InvalidAuditError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, InvalidSpecError, InvalidAuditError, EmptyResultsError, json.JSONDecodeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
