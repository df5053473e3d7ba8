"""
Command line front end.

Usage: ``pulseline <command> [options]``. On success the command summary
is printed as JSON on stdout. Exit status is 0 on success, 1 on a
processing error and 2 on a usage error.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from . import commands
from .tools import PulselineError

log = logging.getLogger(__name__)

LOG_LEVEL_VARIABLE = "PULSELINE_LOG"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pulseline", description="Contactless pulse-rate estimation from video."
    )
    subparsers = parser.add_subparsers(dest="command", metavar="command")
    subparsers.required = True
    for name in commands.COMMANDS:
        command = commands.get_command_instance(name)
        subparser = subparsers.add_parser(
            name, help=command.summary_line, description=command.summary_line
        )
        command.add_arguments(subparser)
    return parser


def configure_logging(level: Optional[str] = None):
    """Send package logs to stderr, level taken from PULSELINE_LOG."""
    level = level or os.environ.get(LOG_LEVEL_VARIABLE, "WARNING")
    if level.isdigit():
        numeric = int(level)
    else:
        numeric = logging.getLevelName(level.upper())
        if not isinstance(numeric, int):
            numeric = logging.WARNING
    logger = logging.getLogger("pulseline")
    logger.setLevel(numeric)
    if not any(getattr(h, "_pulseline", False) for h in logger.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        handler._pulseline = True  # type: ignore[attr-defined]
        logger.addHandler(handler)


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    command = commands.get_command_instance(args.command)
    try:
        summary = command(args)
    except commands.BadValue as e:
        parser.print_usage(sys.stderr)
        print("pulseline %s: error: %s" % (args.command, e), file=sys.stderr)
        return 2
    except (PulselineError, OSError) as e:
        log.debug("%s failed", command, exc_info=True)
        print("pulseline %s: %s" % (args.command, e), file=sys.stderr)
        return 1
    json.dump(summary, sys.stdout, sort_keys=True, indent=2)
    sys.stdout.write("\n")
    return 0


def main():
    configure_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
