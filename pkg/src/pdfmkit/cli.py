"""Command-line front end.

    pdfmkit synth | build-graph | train | embed | eval | forecast | report | pipeline
            [--config FILE] [--seed N] [--out DIR] [--resume] [--workers N] [--set key=value]

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 file/IO error, 4 stale or missing upstream artifacts, 5 data or
numerical failure.  Progress goes to stdout; errors go to stderr as one
JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import yaml

from . import pipeline
from .config import load_config
from .errors import ConfigError, PdfmError, StaleArtifactError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO, EXIT_STALE, EXIT_DATA = 0, 1, 2, 3, 4, 5
OUT_ENV = "PDFMKIT_OUT"


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(item, "overrides look like key.path=value")
        key, raw = item.split("=", 1)
        out[key] = yaml.safe_load(raw)
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="pdfmkit", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in pipeline.STAGES + ("pipeline",):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./pdfmkit-out)")
        p.add_argument("--resume", action="store_true", help="skip stages whose artifacts are current")
        p.add_argument("--workers", type=int, default=1, help="parallel benchmark cells")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _error(code, kind, message, **extra):
    doc = {"error": kind, "message": message}
    doc.update(extra)
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = _parse_set(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out:
            overrides["out_dir"] = args.out
        cfg = load_config(args.config, overrides)
        out = cfg.out_dir or os.environ.get(OUT_ENV) or "pdfmkit-out"
        if args.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        if args.command == "pipeline":
            pipeline.run_pipeline(cfg, out, args.resume, args.workers, progress=print)
        else:
            pipeline.run_stage(cfg, out, args.command, args.resume, args.workers)
            print(f"{args.command}: done ({out})")
        return EXIT_OK
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", str(exc), field=exc.field)
    except StaleArtifactError as exc:
        return _error(EXIT_STALE, "stale-artifact", str(exc), stage=exc.stage)
    except OSError as exc:
        return _error(EXIT_IO, "io", str(exc))
    except PdfmError as exc:
        return _error(EXIT_DATA, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
