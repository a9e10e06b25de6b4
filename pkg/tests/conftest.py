"""
Shared fixtures: offline datasets, replay fixtures and lookup embeddings.
"""
import contextlib
import io
import shutil
from pathlib import Path

import pytest

from app.core.config import validate_config
from app.db.artifacts import iter_jsonl, write_jsonl, write_text_atomic
from app.services.embedding import MockEmbedder
from app.tasks.tasks import build_context
from scripts.build_demo_dataset import build


@pytest.fixture
def demo_dataset(tmp_path: Path) -> Path:
    """The 10-document demo dataset embedded with the default mock embedder."""
    dataset_dir = tmp_path / "demo"
    with contextlib.redirect_stdout(io.StringIO()):
        build(dataset_dir, dim=64, seed=0)
    return dataset_dir


@pytest.fixture
def demo_context(demo_dataset: Path):
    return build_context(validate_config({"parallelism": 2}), demo_dataset)


@pytest.fixture
def hand_dataset(tmp_path: Path) -> Path:
    """
    Three 2-d documents and one query whose rankings are easy to work out by hand.

    "alpha" = [1, 0]; clusters "c1" = [0.6, 0.8] and "c2" = [-1, 0].
    """
    root = tmp_path / "hand"
    write_jsonl(root / "corpus.jsonl", [
        {"_id": "d1", "title": "", "text": "first"},
        {"_id": "d2", "title": "", "text": "second"},
        {"_id": "d3", "title": "", "text": "third"},
    ])
    write_jsonl(root / "queries.jsonl", [{"_id": "q1", "text": "alpha"}])
    write_text_atomic(root / "qrels" / "test.tsv", "query-id\tcorpus-id\tscore\nq1\td3\t1\n")
    write_jsonl(root / "corpus_embeddings.jsonl", [
        {"id": "d1", "vector": [1.0, 0.0]},
        {"id": "d2", "vector": [0.0, 1.0]},
        {"id": "d3", "vector": [0.6, 0.8]},
    ])
    write_jsonl(root / "replay.jsonl", [
        {"kind": "contextual_expansion", "query": "alpha", "completions": ["alpha one", "alpha two"]},
        {"kind": "clustering_generation", "query": "alpha",
         "completions": ['Sure: {"cluster1": "c1", "cluster2": "c2"}']},
        {"kind": "scoring", "query": "alpha", "completions": ["[80, 30]"]},
    ])
    write_jsonl(root / "lookup.jsonl", [
        {"text": "alpha", "vector": [1.0, 0.0]},
        {"text": "c1", "vector": [0.6, 0.8]},
        {"text": "c2", "vector": [-1.0, 0.0]},
        {"text": "alpha [SEP] c1 [SEP] c2 [SEP]", "vector": [0.0, 1.0]},
    ])
    return root


@pytest.fixture
def hand_config(hand_dataset: Path):
    def make(**overrides):
        raw = {
            "prompt_kinds": ["contextual_expansion"],
            "n_per_prompt": 2,
            "parallelism": 1,
            "providers": {
                "generation": "replay",
                "generation_fixture": str(hand_dataset / "replay.jsonl"),
                "embedding": "lookup",
                "embedding_lookup": str(hand_dataset / "lookup.jsonl"),
            },
        }
        raw.update(overrides)
        return validate_config(raw)
    return make


FIXTURES = Path(__file__).parent / "fixtures"
AUDITED_DIM = 2048


@pytest.fixture
def audited_dataset(tmp_path: Path) -> Path:
    """
    Ten documents, three queries and a replay fixture whose top-1 document is fixed for every strategy.

    Every text uses its own vocabulary, so the mock embedder maps distinct texts to nearly
    orthogonal vectors at this dimension; d1, d3 and d5 repeat the query texts and d2, d4
    and d6 repeat the single cluster query replayed for q1, q2 and q3.
    """
    root = tmp_path / "audited"
    shutil.copytree(FIXTURES / "audited", root)
    embedder = MockEmbedder(dim=AUDITED_DIM, seed=0)
    write_jsonl(
        root / "corpus_embeddings.jsonl",
        [
            {"id": row["_id"], "vector": embedder.embed_one(f"{row['title']} {row['text']}").tolist()}
            for row in iter_jsonl(root / "corpus.jsonl")
        ],
    )
    return root


@pytest.fixture
def audited_config(audited_dataset: Path):
    def make(strategy: str):
        return validate_config({
            "aggregation_strategy": strategy,
            "prompt_kinds": ["contextual_expansion"],
            "n_per_prompt": 2,
            "w0": 0.7,
            "sim_threshold": 0.2,
            "score_threshold": 60,
            "top_k": 1,
            "ndcg_k": 10,
            "parallelism": 1,
            "providers": {
                "generation": "replay",
                "generation_fixture": str(audited_dataset / "replay.jsonl"),
                "embedding": "mock",
                "mock_dim": AUDITED_DIM,
            },
        })
    return make
