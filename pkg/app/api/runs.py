"""
End-to-end subcommands: run, ablate, baseline, compare, cluster-stats and export-finetune.
"""
import argparse
import logging
from pathlib import Path
from typing import Any, List

from app.api.common import add_config_args, add_dataset_args, context_from_args, emit, resolve_config
from app.core.config import settings
from app.core.exceptions import ConfigError, IngestError, QermError
from app.db.artifacts import artifact_path
from app.schemas.schemas import BaselineMethod
from app.services.llm_client import create_gateway
from app.services.retrieval import DatasetPaths, load_qrels
from app.tasks.tasks import (
    ABLATION_KINDS,
    ablate,
    compare_runs,
    export_finetune_pairs,
    load_demonstrations,
    run_baseline,
    run_pipeline,
    write_cluster_stats,
)

logger = logging.getLogger(__name__)

_INTEGER_KINDS = {"prompts", "n_per_prompt", "iterations"}


def check_qerm_args(args: argparse.Namespace) -> None:
    if args.qerm and args.qerm_model is None and not args.reward_url:
        raise QermError("--qerm needs --qerm-model (or --reward-url)")


def handle_run(args: argparse.Namespace) -> int:
    check_qerm_args(args)
    context = context_from_args(args)
    report, manifest = run_pipeline(
        context,
        args.output_dir,
        use_qerm=args.qerm,
        qerm_model_path=args.qerm_model,
        explain=args.explain,
        tag=args.tag,
        reward_url=args.reward_url,
    )
    emit({
        "run_tag": report.run_tag,
        "ndcg": report.mean,
        "k": report.k,
        "queries": len(report.per_query),
        "failures": manifest.failure_count,
        "manifest": str(artifact_path(args.output_dir, "manifest")),
    })
    return 0


def parse_grid(kind: str, raw: str) -> List[Any]:
    values = [item.strip() for item in raw.split(",") if item.strip()]
    try:
        return [int(v) if kind in _INTEGER_KINDS else float(v) for v in values]
    except ValueError as e:
        raise ConfigError(f"invalid ablation grid {raw!r}: {e}") from e


def handle_ablate(args: argparse.Namespace) -> int:
    grid = parse_grid(args.kind, args.grid) if args.grid is not None else None
    if args.kind == "iterations" and args.qerm_model is None and not args.reward_url:
        raise QermError("the iterations ablation needs --qerm-model (or --reward-url)")
    context = context_from_args(args)
    rows, failed = ablate(context, args.kind, args.output_dir, grid, args.qerm_model, args.reward_url)
    emit({
        "rows": [row.model_dump() for row in rows],
        "failed": failed,
        "csv": str(artifact_path(args.output_dir, "ablation")),
    })
    return 0


def handle_baseline(args: argparse.Namespace) -> int:
    demonstrations = load_demonstrations(args.demonstrations) if args.demonstrations is not None else None
    context = context_from_args(args)
    report = run_baseline(context, BaselineMethod(args.method), args.output_dir, demonstrations)
    emit({"run_tag": report.run_tag, "ndcg": report.mean, "k": report.k, "queries": len(report.per_query)})
    return 0


def handle_compare(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.qrels is not None:
        qrels_path = args.qrels
    elif args.dataset_dir is not None:
        qrels_path = DatasetPaths.from_dir(args.dataset_dir).qrels
    else:
        raise IngestError("compare needs --qrels or --dataset-dir")
    results = compare_runs(args.baseline, args.system, load_qrels(qrels_path), cfg, args.output_dir)
    emit([result.model_dump(mode="json") for result in results])
    return 0


def handle_cluster_stats(args: argparse.Namespace) -> int:
    context = context_from_args(args, need_index=False)
    clusters_path = args.clusters or artifact_path(args.output_dir, "clusters")
    emit({"cluster_stats": str(write_cluster_stats(context, clusters_path, args.output_dir))})
    return 0


def handle_export_finetune(args: argparse.Namespace) -> int:
    context = context_from_args(args, need_index=False)
    judge = create_gateway("judge", context.cfg, settings, args.cache_dir)
    pairs, skipped = export_finetune_pairs(context, judge, args.output_dir)
    emit({"pairs": len(pairs), "skipped": len(skipped), "path": str(artifact_path(args.output_dir, "finetune"))})
    return 0


def _add_qerm_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--qerm-model", type=Path, help="Trained reward model JSON")
    parser.add_argument("--reward-url", help="Remote reward classifier endpoint (instead of --qerm-model)")


def register(subparsers: argparse._SubParsersAction) -> None:
    parser = subparsers.add_parser("run", help="Run the full pipeline and evaluate")
    add_dataset_args(parser)
    parser.add_argument("--qerm", action="store_true", help="Wrap each query in the reward-model feedback loop")
    _add_qerm_args(parser)
    parser.add_argument("--explain", action="store_true", help="Write per-query weight bundles")
    parser.add_argument("--tag", help="Run tag for the TREC file")
    parser.set_defaults(handler=handle_run)

    parser = subparsers.add_parser("ablate", help="Sweep one hyperparameter")
    add_dataset_args(parser)
    parser.add_argument("--kind", choices=ABLATION_KINDS, required=True)
    parser.add_argument("--grid", help="Comma-separated grid values (default: the standard sweep for the kind)")
    _add_qerm_args(parser)
    parser.set_defaults(handler=handle_ablate)

    parser = subparsers.add_parser("baseline", help="Run a baseline reformulation method")
    add_dataset_args(parser)
    parser.add_argument("--method", choices=[m.value for m in BaselineMethod], required=True)
    parser.add_argument(
        "--demonstrations", type=Path, help="Few-shot {query, answer} JSONL for the q2d and q2e prompts"
    )
    parser.set_defaults(handler=handle_baseline)

    parser = subparsers.add_parser("compare", help="Paired t-test with Holm correction across runs")
    add_config_args(parser)
    parser.add_argument("--baseline", type=Path, required=True, help="Baseline TREC run")
    parser.add_argument("--system", type=Path, action="append", required=True, help="System TREC run (repeatable)")
    parser.add_argument("--qrels", type=Path)
    parser.add_argument("--dataset-dir", type=Path)
    parser.add_argument("--output-dir", type=Path, required=True)
    parser.set_defaults(handler=handle_compare)

    parser = subparsers.add_parser("cluster-stats", help="Cluster count distribution and similarity")
    add_dataset_args(parser)
    parser.add_argument("--clusters", type=Path, help="clusters.jsonl (default: <output-dir>/clusters.jsonl)")
    parser.set_defaults(handler=handle_cluster_stats)

    parser = subparsers.add_parser("export-finetune", help="Export judged (q_init, q_ref, score) pairs")
    add_dataset_args(parser)
    parser.set_defaults(handler=handle_export_finetune)
