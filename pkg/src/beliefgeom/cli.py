"""Command-line entry point: ``beliefgeom run <stage>``, ``import-dump``, ``init-config``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from beliefgeom import io
from beliefgeom.config import ConfigError, dump_config, load_config
from beliefgeom.pipeline import STAGES, ConfigMismatch, LockError, MissingArtifact, import_dump, run

EXIT_OK, EXIT_INTERNAL, EXIT_MISSING, EXIT_MISMATCH = 0, 1, 2, 3
OUT_ENV = "BELIEFGEOM_OUT"

log = logging.getLogger("beliefgeom")


def _out_dir(arg: str | None) -> str:
    out = arg or os.environ.get(OUT_ENV)
    if not out:
        raise ConfigError(f"no output directory: pass --out or set {OUT_ENV}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beliefgeom", description="Belief-geometry discovery pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a pipeline stage")
    r.add_argument("stage", choices=(*STAGES, "all"))
    r.add_argument("--config", help="YAML config (defaults used when omitted)")
    r.add_argument("--seed", type=int, help="override the root seed")
    r.add_argument("--out", help=f"run directory (default ${OUT_ENV})")
    r.add_argument("--resume", action="store_true", help="skip stages already completed under the same config")

    i = sub.add_parser("import-dump", help="validate an external activation dump and add it to a run")
    i.add_argument("path")
    i.add_argument("--name", required=True, help="source name to list under data.external_dumps")
    i.add_argument("--out", help=f"run directory (default ${OUT_ENV})")

    sub.add_parser("init-config", help="print the default config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "init-config":
            sys.stdout.write(dump_config(load_config(None)))
            return EXIT_OK
        if args.command == "import-dump":
            dump = import_dump(args.path, _out_dir(args.out), args.name)
            print(f"imported {args.name}: {dump.data.shape[0]} x {dump.data.shape[1]} {dump.data.dtype}"
                  f"{' with beliefs' if dump.has_beliefs() else ''}")
            return EXIT_OK
        cfg = load_config(args.config, args.seed)
        results = run(args.stage, cfg, _out_dir(args.out), resume=args.resume)
        for stage, res in results.items():
            print(f"{stage}: {res}")
        return EXIT_OK
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigMismatch as exc:
        print(f"error: config mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, io.FormatError, io.CorruptionError, LockError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - top-level guard maps everything else to exit 1
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
