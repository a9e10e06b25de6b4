"""
Query aggregation strategies.

DC fuses the queries as text; FW, SimDW and ScoreDW fuse embeddings as
w0 * e_init + sum(w_i * e_i) over the references that pass the strategy's filter.
Every strategy returns the weighted bundle it used so runs can be audited.
"""
import logging
from typing import List, Optional, Sequence

import numpy as np

from app.core.exceptions import AggregationError, DimensionMismatchError, ZeroVectorError
from app.schemas.schemas import (
    AggregatedQuery,
    AggregationStrategy,
    BundleEntry,
    EmbeddingVector,
    InclusionReason,
    Query,
    ScoreList,
    WeightedQueryBundle,
)
from app.services.embedding import cosine

logger = logging.getLogger(__name__)

SEP = " [SEP] "


def aggregate_dc(q_init: Query, refs: Sequence[str]) -> AggregatedQuery:
    """Concatenate the initial query and each reformulation, each followed by the separator."""
    if refs:
        fused_text = "".join(f"{text}{SEP}" for text in [q_init.text, *refs]).rstrip(" ")
    else:
        fused_text = q_init.text
    entries = tuple(
        BundleEntry(text=text, weight=1.0, included=True, reason=InclusionReason.PASSED) for text in refs
    )
    bundle = WeightedQueryBundle(init_text=q_init.text, w0=1.0, entries=entries)
    return AggregatedQuery(strategy=AggregationStrategy.DC, fused_text=fused_text, bundle=bundle)


def split_dc(fused_text: str) -> List[str]:
    """Recover [init, refs...] from a DC string."""
    return [part for part in f"{fused_text} ".split(SEP) if part]


def _check_dims(e_init: EmbeddingVector, e_refs: Sequence[EmbeddingVector]) -> None:
    for index, vector in enumerate(e_refs):
        if vector.dim != e_init.dim:
            raise DimensionMismatchError(
                f"reference {index} has dim {vector.dim}, initial query has dim {e_init.dim}"
            )


def _texts(ref_texts: Optional[Sequence[str]], count: int) -> List[str]:
    if ref_texts is None:
        return [f"ref{i}" for i in range(count)]
    if len(ref_texts) != count:
        raise AggregationError(f"got {len(ref_texts)} reference texts for {count} embeddings")
    return list(ref_texts)


def _fuse(
    strategy: AggregationStrategy,
    e_init: EmbeddingVector,
    e_refs: Sequence[EmbeddingVector],
    w0: float,
    entries: Sequence[BundleEntry],
    init_text: str,
) -> AggregatedQuery:
    fused = w0 * e_init.array
    for vector, entry in zip(e_refs, entries):
        if entry.included:
            fused = fused + entry.weight * vector.array
    bundle = WeightedQueryBundle(init_text=init_text, w0=w0, entries=tuple(entries))
    return AggregatedQuery(
        strategy=strategy,
        fused_embedding=EmbeddingVector.from_array(fused, normalized=False),
        bundle=bundle,
    )


def aggregate_fw(
    e_init: EmbeddingVector,
    e_refs: Sequence[EmbeddingVector],
    w0: float,
    ref_texts: Optional[Sequence[str]] = None,
    init_text: str = "",
) -> AggregatedQuery:
    """Fixed weights: every reference gets (1 - w0) / |refs|."""
    _check_dims(e_init, e_refs)
    texts = _texts(ref_texts, len(e_refs))
    weight = (1.0 - w0) / len(e_refs) if e_refs else 0.0
    entries = [
        BundleEntry(text=text, weight=weight, included=True, reason=InclusionReason.PASSED, embedding=vector)
        for text, vector in zip(texts, e_refs)
    ]
    return _fuse(AggregationStrategy.FW, e_init, e_refs, w0, entries, init_text)


def aggregate_simdw(
    e_init: EmbeddingVector,
    e_refs: Sequence[EmbeddingVector],
    w0: float,
    sim_threshold: float,
    ref_texts: Optional[Sequence[str]] = None,
    init_text: str = "",
) -> AggregatedQuery:
    """
    Similarity-weighted: a reference with cosine(e_init, e_i) >= sim_threshold
    contributes with weight equal to that cosine. A zero reference vector has
    similarity 0.0 and is always left out.

    Raises:
        ZeroVectorError: e_init is the zero vector
    """
    if not np.any(e_init.array):
        raise ZeroVectorError("initial query embedding is the zero vector")
    _check_dims(e_init, e_refs)
    texts = _texts(ref_texts, len(e_refs))
    entries = []
    for text, vector in zip(texts, e_refs):
        if np.any(vector.array):
            similarity = cosine(e_init, vector)
            passed = similarity >= sim_threshold
        else:
            similarity, passed = 0.0, False
        entries.append(
            BundleEntry(
                text=text,
                weight=similarity,
                included=passed,
                reason=InclusionReason.PASSED if passed else InclusionReason.BELOW_THRESHOLD,
                similarity=similarity,
                embedding=vector,
            )
        )
    logger.debug(f"SimDW kept {sum(e.included for e in entries)}/{len(entries)} references")
    return _fuse(AggregationStrategy.SIMDW, e_init, e_refs, w0, entries, init_text)


def aggregate_scoredw(
    e_init: EmbeddingVector,
    e_refs: Sequence[EmbeddingVector],
    scores: ScoreList,
    w0: float,
    score_threshold: float,
    ref_texts: Optional[Sequence[str]] = None,
    init_text: str = "",
) -> AggregatedQuery:
    """
    Score-weighted: a reference whose raw 1-100 score reaches score_threshold
    contributes with weight score / 100.
    """
    if len(scores.scores) != len(e_refs):
        raise AggregationError(f"got {len(scores.scores)} scores for {len(e_refs)} references")
    _check_dims(e_init, e_refs)
    texts = _texts(ref_texts, len(e_refs))
    entries = []
    for text, vector, score in zip(texts, e_refs, scores.scores):
        passed = score >= score_threshold
        entries.append(
            BundleEntry(
                text=text,
                weight=score / 100.0,
                included=passed,
                reason=InclusionReason.PASSED if passed else InclusionReason.BELOW_THRESHOLD,
                score=score,
                embedding=vector,
            )
        )
    return _fuse(AggregationStrategy.SCOREDW, e_init, e_refs, w0, entries, init_text)
