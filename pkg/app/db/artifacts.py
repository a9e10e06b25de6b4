"""
Artifact storage: every stage writes its output to disk so later stages can resume.

All writes are atomic (write to a temporary file in the target directory, then rename).
"""
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator, List, Type, TypeVar

from pydantic import BaseModel

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

ARTIFACT_NAMES = {
    "generated": "generated.jsonl",
    "clusters": "clusters.jsonl",
    "scores": "scores.jsonl",
    "aggregated": "aggregated.jsonl",
    "run": "run.trec",
    "metrics": "metrics.json",
    "metrics_csv": "metrics.csv",
    "failures": "failures.jsonl",
    "manifest": "manifest.json",
    "explain": "explain.jsonl",
    "loop": "loop.jsonl",
    "ablation": "ablation.csv",
    "finetune": "finetune.jsonl",
    "training_set": "qerm_train.jsonl",
    "model": "qerm_model.json",
    "comparison": "comparison.json",
    "comparison_csv": "comparison.csv",
    "cluster_stats": "cluster_stats.json",
}


def write_text_atomic(path: Path, content: str) -> Path:
    """Write text so readers never observe a partially written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(content)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_json(path: Path, payload: Any) -> Path:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return write_text_atomic(path, json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_jsonl(path: Path, rows: Iterable[Any]) -> Path:
    lines = []
    for row in rows:
        if isinstance(row, BaseModel):
            lines.append(row.model_dump_json())
        else:
            lines.append(json.dumps(row, sort_keys=True, ensure_ascii=False))
    content = "\n".join(lines) + ("\n" if lines else "")
    logger.debug(f"Writing {len(lines)} rows to {path}")
    return write_text_atomic(path, content)


def iter_jsonl(path: Path) -> Iterator[dict]:
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_number}: invalid JSON line: {e}") from e


def read_jsonl(path: Path, model: Type[ModelT]) -> List[ModelT]:
    return [model.model_validate(row) for row in iter_jsonl(path)]


def artifact_path(output_dir: Path, name: str) -> Path:
    return Path(output_dir) / ARTIFACT_NAMES[name]
