"""
Stage subcommands. Each reads the previous stage's artifact from --output-dir
and writes its own, so a run can be resumed from any stage.
"""
import argparse
import logging
from pathlib import Path

from app.api.common import add_config_args, add_dataset_args, context_from_args, emit, resolve_config
from app.core.exceptions import IngestError
from app.db.artifacts import artifact_path
from app.services.retrieval import DatasetPaths, load_qrels
from app.tasks.tasks import (
    stage_aggregate,
    stage_cluster,
    stage_evaluate,
    stage_generate,
    stage_retrieve,
    stage_score,
)

logger = logging.getLogger(__name__)


def handle_generate(args: argparse.Namespace) -> int:
    context = context_from_args(args, need_index=False)
    emit({"generated": str(stage_generate(context, args.output_dir))})
    return 0


def handle_cluster(args: argparse.Namespace) -> int:
    context = context_from_args(args, need_index=False)
    emit({"clusters": str(stage_cluster(context, args.output_dir))})
    return 0


def handle_score(args: argparse.Namespace) -> int:
    context = context_from_args(args, need_index=False)
    emit({"scores": str(stage_score(context, args.output_dir))})
    return 0


def handle_aggregate(args: argparse.Namespace) -> int:
    context = context_from_args(args, need_index=False)
    emit({"aggregated": str(stage_aggregate(context, args.output_dir, explain=args.explain))})
    return 0


def handle_retrieve(args: argparse.Namespace) -> int:
    context = context_from_args(args)
    emit({"run": str(stage_retrieve(context, args.output_dir))})
    return 0


def handle_evaluate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.qrels is not None:
        qrels_path = args.qrels
    elif args.dataset_dir is not None:
        qrels_path = DatasetPaths.from_dir(args.dataset_dir).qrels
    else:
        raise IngestError("evaluate needs --qrels or --dataset-dir")
    run_path = args.run or artifact_path(args.output_dir, "run")
    report = stage_evaluate(run_path, load_qrels(qrels_path), cfg, args.output_dir)
    emit({"run_tag": report.run_tag, "k": report.k, "mean": report.mean, "queries": len(report.per_query)})
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    for name, handler, help_text in (
        ("generate", handle_generate, "Generate N reformulations per prompt"),
        ("cluster", handle_cluster, "Cluster generated queries into 1-3 intents"),
        ("score", handle_score, "Score cluster queries (ScoreDW)"),
        ("aggregate", handle_aggregate, "Aggregate cluster queries into one query"),
        ("retrieve", handle_retrieve, "Retrieve top-k documents for aggregated queries"),
    ):
        parser = subparsers.add_parser(name, help=help_text)
        add_dataset_args(parser)
        if name == "aggregate":
            parser.add_argument("--explain", action="store_true", help="Write per-query weight bundles")
        parser.set_defaults(handler=handler)

    parser = subparsers.add_parser("evaluate", help="Compute nDCG@k for a TREC run file")
    add_config_args(parser)
    parser.add_argument("--run", type=Path, help="TREC run file (default: <output-dir>/run.trec)")
    parser.add_argument("--qrels", type=Path, help="Qrels file")
    parser.add_argument("--dataset-dir", type=Path, help="Dataset directory providing qrels")
    parser.add_argument("--output-dir", type=Path, required=True)
    parser.set_defaults(handler=handle_evaluate)
