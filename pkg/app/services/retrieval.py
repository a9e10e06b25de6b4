"""
BEIR-format dataset loading, the exact-scan dense index and TREC run files.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from app.core.exceptions import (
    DimensionMismatchError,
    EmptyIndexError,
    IngestError,
    RetrievalError,
    ZeroVectorError,
)
from app.db.artifacts import iter_jsonl, write_text_atomic
from app.schemas.schemas import (
    AggregatedQuery,
    EmbeddingVector,
    Qrels,
    Query,
    RetrievalRun,
    ScoredDoc,
    ScoreFunction,
)
from app.services.embedding import EmbeddingCache, EmbeddingProvider, embed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetPaths:
    corpus: Path
    queries: Path
    qrels: Path
    embeddings: Path

    @classmethod
    def from_dir(cls, dataset_dir: Path) -> "DatasetPaths":
        """Resolve the standard BEIR layout plus a corpus embedding file."""
        root = Path(dataset_dir)
        qrels = root / "qrels" / "test.tsv"
        if not qrels.exists():
            qrels = root / "qrels.tsv"
        embeddings = root / "corpus_embeddings.jsonl"
        if not embeddings.exists():
            embeddings = root / "embeddings.jsonl"
        paths = cls(root / "corpus.jsonl", root / "queries.jsonl", qrels, embeddings)
        for name in ("corpus", "queries", "qrels", "embeddings"):
            if not getattr(paths, name).exists():
                raise IngestError(f"dataset {root} has no {name} file ({getattr(paths, name).name})")
        return paths

    def as_dict(self) -> Dict[str, str]:
        return {name: str(getattr(self, name)) for name in ("corpus", "queries", "qrels", "embeddings")}


@dataclass(frozen=True, eq=False)
class DocIndex:
    doc_ids: Tuple[str, ...]
    matrix: np.ndarray
    dim: int
    metadata: Dict[str, str] = field(default_factory=dict)
    missing_embeddings: int = 0
    norms: np.ndarray = field(init=False, repr=False)
    id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.matrix.shape != (len(self.doc_ids), self.dim):
            raise IngestError(f"matrix shape {self.matrix.shape} does not match {len(self.doc_ids)} ids x {self.dim}")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise IngestError("duplicate document ids in index")
        if not np.all(np.isfinite(self.matrix)):
            raise IngestError("index contains non-finite values")
        self.matrix.setflags(write=False)
        norms = np.linalg.norm(self.matrix, axis=1)
        norms.setflags(write=False)
        # Position of each id in ascending id order, used as the tie-break key.
        id_rank = np.empty(len(self.doc_ids), dtype=np.int64)
        id_rank[np.argsort(np.asarray(self.doc_ids, dtype=object), kind="stable")] = np.arange(len(self.doc_ids))
        object.__setattr__(self, "norms", norms)
        object.__setattr__(self, "id_rank", id_rank)

    def __len__(self) -> int:
        return len(self.doc_ids)


def load_corpus(corpus_path: Path) -> Dict[str, Dict[str, str]]:
    """Read a BEIR corpus.jsonl into {doc id: {title, text}}."""
    corpus = {}
    for row in iter_jsonl(corpus_path):
        if "_id" not in row:
            raise IngestError(f"corpus row without _id in {corpus_path}")
        corpus[str(row["_id"])] = {"title": row.get("title", ""), "text": row.get("text", "")}
    logger.info(f"Loaded {len(corpus)} documents from {corpus_path}")
    return corpus


def load_queries(queries_path: Path, qrels: Optional[Qrels] = None) -> List[Query]:
    """Read a BEIR queries.jsonl; with qrels given, keep only judged queries."""
    queries = []
    seen = set()
    for row in iter_jsonl(queries_path):
        query = Query(id=str(row["_id"]), text=row["text"])
        if query.id in seen:
            raise IngestError(f"duplicate query id {query.id} in {queries_path}")
        seen.add(query.id)
        if qrels is None or query.id in qrels.judgments:
            queries.append(query)
    logger.info(f"Loaded {len(queries)} queries from {queries_path}")
    return queries


def load_qrels(qrels_path: Path) -> Qrels:
    """
    Read qrels as BEIR TSV (query-id, corpus-id, score; optional header)
    or TREC (qid, iter, docid, rel; whitespace separated).
    """
    try:
        frame = pd.read_csv(qrels_path, sep=r"\s+", header=None, dtype=str, engine="python")
    except pd.errors.EmptyDataError:
        return Qrels()
    if frame.empty:
        return Qrels()
    if frame.shape[1] == 4:
        frame = frame[[0, 2, 3]]
    elif frame.shape[1] != 3:
        raise IngestError(f"qrels file {qrels_path} has {frame.shape[1]} columns, expected 3 or 4")
    frame.columns = ["query_id", "doc_id", "grade"]
    if not str(frame.iloc[0]["grade"]).lstrip("-").isdigit():
        frame = frame.iloc[1:]
    judgments: Dict[str, Dict[str, int]] = {}
    for query_id, doc_id, grade in frame.itertuples(index=False):
        judgments.setdefault(str(query_id), {})[str(doc_id)] = int(grade)
    return Qrels(judgments=judgments)


def ingest_corpus(
    corpus_path: Path,
    embeddings_path: Path,
    provider_id: str = "precomputed",
) -> DocIndex:
    """
    Build an index over the documents that have a precomputed embedding.

    Args:
        corpus_path: BEIR corpus.jsonl
        embeddings_path: JSONL of {id, vector}
        provider_id: Recorded in the index metadata

    Returns:
        DocIndex over the intersection of corpus ids and embedding ids, in corpus order
    """
    corpus = load_corpus(corpus_path)
    vectors: Dict[str, List[float]] = {}
    dims = set()
    for row in iter_jsonl(embeddings_path):
        vectors[str(row["id"])] = row["vector"]
        dims.add(len(row["vector"]))
    if len(dims) > 1:
        raise DimensionMismatchError(f"embedding file {embeddings_path} mixes dims {sorted(dims)}")

    doc_ids = [doc_id for doc_id in corpus if doc_id in vectors]
    if not doc_ids:
        raise IngestError(f"no document in {corpus_path} has an embedding in {embeddings_path}")
    missing = len(corpus) - len(doc_ids)
    if missing:
        logger.warning(f"{missing} documents have no embedding and were skipped")

    matrix = np.asarray([vectors[doc_id] for doc_id in doc_ids], dtype=np.float64)
    index = DocIndex(
        doc_ids=tuple(doc_ids),
        matrix=matrix,
        dim=matrix.shape[1],
        metadata={"corpus": str(corpus_path), "embeddings": str(embeddings_path), "provider_id": provider_id},
        missing_embeddings=missing,
    )
    logger.info(f"Indexed {len(index)} documents (dim {index.dim})")
    return index


def _query_vector(
    q: Union[AggregatedQuery, EmbeddingVector],
    embedder: Optional[EmbeddingProvider],
    cache: Optional[EmbeddingCache],
) -> np.ndarray:
    if isinstance(q, EmbeddingVector):
        return q.array
    if q.fused_embedding is not None:
        return q.fused_embedding.array
    if embedder is None:
        raise RetrievalError("a text query needs an embedding provider")
    return embed([q.fused_text], embedder, cache)[0].array


def retrieve(
    index: DocIndex,
    q: Union[AggregatedQuery, EmbeddingVector],
    k: int,
    embedder: Optional[EmbeddingProvider] = None,
    score_fn: ScoreFunction = ScoreFunction.COSINE,
    cache: Optional[EmbeddingCache] = None,
) -> Tuple[ScoredDoc, ...]:
    """
    Exact top-k scan.

    Ties are broken by ascending doc id; k larger than the index returns every document.
    """
    if len(index) == 0:
        raise EmptyIndexError("cannot retrieve from an empty index")
    if k < 1:
        raise RetrievalError(f"k must be at least 1, got {k}")
    vector = _query_vector(q, embedder, cache)
    if vector.shape[0] != index.dim:
        raise DimensionMismatchError(f"query dim {vector.shape[0]} does not match index dim {index.dim}")

    scores = index.matrix @ vector
    if score_fn == ScoreFunction.COSINE:
        query_norm = np.linalg.norm(vector)
        if query_norm == 0.0:
            raise ZeroVectorError("query embedding is the zero vector")
        doc_norms = np.where(index.norms == 0.0, 1.0, index.norms)
        scores = np.clip(scores / (doc_norms * query_norm), -1.0, 1.0)

    order = np.lexsort((index.id_rank, -scores))[: min(k, len(index))]
    return tuple(ScoredDoc(doc_id=index.doc_ids[i], score=float(scores[i])) for i in order)


def write_trec_run(path: Path, run: RetrievalRun) -> Path:
    """Write "qid Q0 docid rank score tag" lines; scores keep full precision."""
    lines = []
    for query_id in sorted(run.results):
        for rank, doc in enumerate(run.results[query_id], start=1):
            lines.append(f"{query_id} Q0 {doc.doc_id} {rank} {doc.score!r} {run.tag}")
    return write_text_atomic(path, "\n".join(lines) + ("\n" if lines else ""))


def read_trec_run(path: Path) -> RetrievalRun:
    rows: Dict[str, List[Tuple[int, ScoredDoc]]] = {}
    tag = "run"
    for line_number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise IngestError(f"{path}:{line_number}: expected 6 fields, got {len(parts)}")
        query_id, _, doc_id, rank, score, tag = parts
        rows.setdefault(query_id, []).append((int(rank), ScoredDoc(doc_id=doc_id, score=float(score))))
    results = {query_id: tuple(doc for _, doc in sorted(ranked, key=lambda item: item[0])) for query_id, ranked in rows.items()}
    return RetrievalRun(tag=tag, results=results)
