"""
Shared command-line options and context construction.
"""
import argparse
import json
import logging
from pathlib import Path
from typing import Any

from app.core.config import PipelineConfig, load_config, settings, with_overrides
from app.schemas.schemas import AggregationStrategy
from app.tasks.tasks import RunContext, build_context

logger = logging.getLogger(__name__)


def add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML pipeline configuration")
    parser.add_argument("--strategy", choices=[s.value for s in AggregationStrategy], help="Aggregation strategy override")
    parser.add_argument("--seed", type=int, help="Seed override")
    parser.add_argument("--parallelism", type=int, help="Worker pool size override")


def add_dataset_args(parser: argparse.ArgumentParser) -> None:
    add_config_args(parser)
    parser.add_argument("--dataset-dir", type=Path, required=True, help="BEIR-format dataset directory")
    parser.add_argument("--cache-dir", type=Path, help="Directory for LLM and embedding caches")
    parser.add_argument("--output-dir", type=Path, required=True, help="Directory for run artifacts")


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    return with_overrides(
        cfg,
        aggregation_strategy=getattr(args, "strategy", None),
        seed=getattr(args, "seed", None),
        parallelism=getattr(args, "parallelism", None),
    )


def context_from_args(args: argparse.Namespace, need_index: bool = True) -> RunContext:
    return build_context(resolve_config(args), args.dataset_dir, args.cache_dir, settings, need_index=need_index)


def emit(payload: Any) -> None:
    """Print a command's summary as one JSON document on stdout."""
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))
