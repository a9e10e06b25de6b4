"""
Command-line entry point for the query reformulation pipeline.
"""
import argparse
import logging
import sys
from typing import List, Optional

from app.api import qerm, runs, stages
from app.core.config import Settings, settings
from app.core.exceptions import ReformulationError

logger = logging.getLogger(__name__)


def configure_logging(config: Settings = settings) -> None:
    """Log to stderr and, when configured, to a file."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if config.log_file:
        handlers.append(logging.FileHandler(config.log_file))
    logging.basicConfig(
        level=getattr(logging, config.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reformulate",
        description="Generate, cluster and aggregate LLM query reformulations for dense retrieval.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    stages.register(subparsers)
    runs.register(subparsers)
    qerm.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(settings)
    try:
        return args.handler(args)
    except ReformulationError as e:
        logger.error(f"{args.command} failed: {e.detail}")
        print(f"error: {e.detail}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
