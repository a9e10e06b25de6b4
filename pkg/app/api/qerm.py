"""
Reward-model subcommands: qerm build-dataset, qerm train, qerm loop.
"""
import argparse
import logging
from pathlib import Path

from app.api.common import add_config_args, add_dataset_args, context_from_args, emit, resolve_config
from app.api.runs import handle_run
from app.db.artifacts import artifact_path
from app.tasks.tasks import qerm_build_dataset, qerm_train

logger = logging.getLogger(__name__)


def handle_build_dataset(args: argparse.Namespace) -> int:
    context = context_from_args(args)
    path, skipped = qerm_build_dataset(context, args.output_dir)
    emit({"training_set": str(path), "skipped": skipped})
    return 0


def handle_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    training_path = args.training_set or artifact_path(args.output_dir, "training_set")
    model_path = args.model or artifact_path(args.output_dir, "model")
    emit({"model": str(qerm_train(training_path, cfg, model_path))})
    return 0


def handle_loop(args: argparse.Namespace) -> int:
    args.qerm = True
    return handle_run(args)


def register(subparsers: argparse._SubParsersAction) -> None:
    qerm = subparsers.add_parser("qerm", help="Reward-model dataset, training and feedback loop")
    actions = qerm.add_subparsers(dest="qerm_command", required=True)

    parser = actions.add_parser("build-dataset", help="Label first-pass runs by nDCG against tau")
    add_dataset_args(parser)
    parser.set_defaults(handler=handle_build_dataset)

    parser = actions.add_parser("train", help="Train the logistic reference classifier")
    add_config_args(parser)
    parser.add_argument("--training-set", type=Path, help="Training JSONL (default: <output-dir>/qerm_train.jsonl)")
    parser.add_argument("--model", type=Path, help="Model output path (default: <output-dir>/qerm_model.json)")
    parser.add_argument("--output-dir", type=Path, required=True)
    parser.set_defaults(handler=handle_train)

    parser = actions.add_parser("loop", help="Run the pipeline with the feedback loop")
    add_dataset_args(parser)
    parser.add_argument("--qerm-model", type=Path, help="Trained reward model JSON")
    parser.add_argument("--reward-url", help="Remote reward classifier endpoint")
    parser.add_argument("--explain", action="store_true")
    parser.add_argument("--tag")
    parser.set_defaults(handler=handle_loop)
