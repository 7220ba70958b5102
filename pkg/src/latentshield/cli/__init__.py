"""Command-line front end.

    latentshield <command> --config run.json [--force] [--jobs N] [--seed N]

Commands: gen-data, train, protect, edit, diagnose, evaluate, report, all.
Failures exit nonzero and print one JSON object to stderr, e.g.
``{"error": "config_error", "message": "...", "command": "protect"}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..checkpoint import CheckpointError, VersionMismatchError
from .config import ConfigError, load_config
from .stages import COMMANDS, STAGES, Context, StageError

EXIT_CODES = {"config_error": 2, "missing_upstream": 3, "output_exists": 4, "checkpoint_error": 5,
              "version_mismatch": 5, "stage_error": 1, "internal_error": 1}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentshield", description="Protective perturbation lab on a toy LDM.")
    p.add_argument("command", choices=list(STAGES) + ["all"])
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--force", action="store_true", help="recompute even if the stage is cached")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for per-image work")
    p.add_argument("--seed", type=int, default=None, help="override the config's global seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(kind, msg, command):
    print(f"error: {msg}", file=sys.stderr)
    print(json.dumps({"error": kind, "message": msg, "command": command}), file=sys.stderr)
    return EXIT_CODES.get(kind, 1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        ctx = Context(cfg, force=args.force, jobs=args.jobs)
        names = [s for s in STAGES if s != "diagnose" or cfg["diagnostics"]] if args.command == "all" \
            else [args.command]
        for name in names:
            status = COMMANDS[name](ctx)
            print(json.dumps(status))
    except ConfigError as e:
        return _fail("config_error", str(e), args.command)
    except VersionMismatchError as e:
        return _fail("version_mismatch", str(e), args.command)
    except CheckpointError as e:
        return _fail("checkpoint_error", str(e), args.command)
    except StageError as e:
        return _fail(e.kind, str(e), args.command)
    except (ValueError, RuntimeError, OSError) as e:
        return _fail("stage_error", f"{type(e).__name__}: {e}", args.command)
    except Exception as e:  # noqa: BLE001 - report anything else as structured JSON too
        return _fail("internal_error", f"{type(e).__name__}: {e}", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
