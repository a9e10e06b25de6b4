#!/usr/bin/env python3
"""
Build a small BEIR-format demo dataset for smoke runs.

Writes corpus.jsonl, queries.jsonl, qrels/test.tsv and corpus_embeddings.jsonl
(vectors from the mock embedder, so they match the default `mock` provider).
"""
import argparse
import os
import sys
from pathlib import Path

# Add the project root to Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.db.artifacts import write_jsonl, write_text_atomic  # noqa: E402
from app.services.embedding import MockEmbedder  # noqa: E402

DOCUMENTS = [
    ("d1", "Vitamin D and bone health", "Vitamin D improves calcium absorption and bone density in adults."),
    ("d2", "Vitamin D deficiency", "Deficiency causes rickets in children and osteomalacia in adults."),
    ("d3", "Sunlight exposure", "Skin synthesizes vitamin D from ultraviolet B radiation in sunlight."),
    ("d4", "Coffee and sleep", "Caffeine blocks adenosine receptors and delays sleep onset."),
    ("d5", "Caffeine metabolism", "The liver enzyme CYP1A2 metabolizes most caffeine within hours."),
    ("d6", "Sleep hygiene", "Regular schedules and dark rooms improve sleep quality."),
    ("d7", "Dense retrieval", "Dual encoders embed queries and documents into a shared vector space."),
    ("d8", "BM25 ranking", "BM25 scores documents by term frequency and inverse document frequency."),
    ("d9", "Query expansion", "Expanding queries with related terms improves recall in retrieval."),
    ("d10", "Ocean tides", "Tides are caused by the gravitational pull of the moon and sun."),
]

QUERIES = [
    ("q1", "does vitamin d help bones"),
    ("q2", "how does caffeine affect sleep"),
    ("q3", "query expansion for dense retrieval"),
]

QRELS = [
    ("q1", "d1", 2), ("q1", "d2", 1), ("q1", "d3", 1),
    ("q2", "d4", 2), ("q2", "d5", 1), ("q2", "d6", 1),
    ("q3", "d9", 2), ("q3", "d7", 2), ("q3", "d8", 1),
]


def build(output_dir: Path, dim: int, seed: int) -> None:
    embedder = MockEmbedder(dim=dim, seed=seed)
    write_jsonl(output_dir / "corpus.jsonl", ({"_id": i, "title": t, "text": x} for i, t, x in DOCUMENTS))
    write_jsonl(output_dir / "queries.jsonl", ({"_id": i, "text": t} for i, t in QUERIES))
    lines = ["query-id\tcorpus-id\tscore"] + [f"{q}\t{d}\t{g}" for q, d, g in QRELS]
    write_text_atomic(output_dir / "qrels" / "test.tsv", "\n".join(lines) + "\n")
    write_jsonl(
        output_dir / "corpus_embeddings.jsonl",
        ({"id": i, "vector": embedder.embed_one(f"{t} {x}").tolist()} for i, t, x in DOCUMENTS),
    )
    print(f"✅ Demo dataset written to {output_dir} ({len(DOCUMENTS)} docs, {len(QUERIES)} queries, dim {dim})")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("output_dir", type=Path)
    parser.add_argument("--dim", type=int, default=64, help="Must match providers.mock_dim")
    parser.add_argument("--seed", type=int, default=0, help="Must match the pipeline seed")
    args = parser.parse_args()
    build(args.output_dir, args.dim, args.seed)


if __name__ == "__main__":
    main()
