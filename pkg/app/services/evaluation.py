"""
Ranking evaluation: nDCG@k, run-level reports, paired significance testing
with Holm-Bonferroni correction and cluster-set statistics.
"""
import io
import itertools
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from app.core.exceptions import EvaluationError, MisalignedQueriesError
from app.db.artifacts import artifact_path, write_json, write_text_atomic
from app.schemas.schemas import (
    ClusterSet,
    ClusterStats,
    ComparisonResult,
    GainType,
    MetricReport,
    Qrels,
    RetrievalRun,
)
from app.services.embedding import EmbeddingCache, EmbeddingProvider, cosine, embed

logger = logging.getLogger(__name__)


def _gain(grades: np.ndarray, gain: GainType) -> np.ndarray:
    if gain == GainType.EXPONENTIAL:
        return np.power(2.0, grades) - 1.0
    return grades


def _dcg(grades: np.ndarray, gain: GainType) -> float:
    if grades.size == 0:
        return 0.0
    discounts = np.log2(np.arange(2, grades.size + 2))
    return float(np.sum(_gain(grades, gain) / discounts))


def ndcg_at_k(
    ranked: Sequence[str],
    qrels_row: Mapping[str, int],
    k: int = 10,
    gain: GainType = GainType.LINEAR,
) -> float:
    """
    nDCG@k with 1-indexed rank discount log2(i + 1).

    Unjudged documents count as grade 0 and repeated ids count once.
    Returns 0.0 when the query has no relevant document.
    """
    if k < 1:
        raise EvaluationError(f"k must be at least 1, got {k}")
    ranked = list(dict.fromkeys(ranked))[:k]
    grades = np.asarray([max(qrels_row.get(doc_id, 0), 0) for doc_id in ranked], dtype=np.float64)
    ideal = np.sort(np.asarray([g for g in qrels_row.values() if g > 0], dtype=np.float64))[::-1][:k]
    idcg = _dcg(ideal, gain)
    if idcg == 0.0:
        return 0.0
    return min(1.0, _dcg(grades, gain) / idcg)


def evaluate_run(
    run: RetrievalRun,
    qrels: Qrels,
    k: int = 10,
    gain: GainType = GainType.LINEAR,
    failed_queries: Iterable[str] = (),
) -> MetricReport:
    """
    Per-query and mean nDCG@k for a run.

    Queries without any relevant judgment are excluded from the mean and listed.
    """
    per_query: Dict[str, float] = {}
    excluded: List[str] = []
    for query_id in sorted(run.results):
        row = qrels.row(query_id)
        if not any(grade > 0 for grade in row.values()):
            excluded.append(query_id)
            continue
        per_query[query_id] = ndcg_at_k([doc.doc_id for doc in run.results[query_id]], row, k, gain)
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    if excluded:
        logger.info(f"Excluded {len(excluded)} queries without relevant judgments")
    return MetricReport(
        run_tag=run.tag,
        k=k,
        per_query=per_query,
        mean=mean,
        excluded_queries=excluded,
        failed_queries=sorted(failed_queries),
    )


def holm_adjust(p_values: Sequence[float]) -> List[float]:
    """Holm step-down adjustment; results are returned in input order."""
    m = len(p_values)
    order = np.argsort(np.asarray(p_values, dtype=np.float64), kind="stable")
    adjusted = [0.0] * m
    running = 0.0
    for position, index in enumerate(order):
        running = max(running, (m - position) * p_values[index])
        adjusted[index] = min(1.0, running)
    return adjusted


def paired_ttest_holm(
    baseline: Mapping[str, float],
    systems: Mapping[str, Mapping[str, float]],
) -> List[ComparisonResult]:
    """
    Two-sided paired t-tests of every system against the baseline, Holm-adjusted.

    Args:
        baseline: Per-query scores of the reference system
        systems: System name -> per-query scores over the same query ids

    Returns:
        One ComparisonResult per system, in input order; zero-variance
        comparisons are flagged degenerate and left out of the correction
    """
    if not systems:
        raise EvaluationError("at least one system is required for a comparison")
    query_ids = sorted(baseline)
    if len(query_ids) < 2:
        raise EvaluationError(f"paired t-test needs at least 2 queries, got {len(query_ids)}")

    results = []
    for name, scores in systems.items():
        if set(scores) != set(query_ids):
            missing = sorted(set(query_ids) ^ set(scores))
            raise MisalignedQueriesError(f"system {name} is not aligned with the baseline (differs on {missing[:5]})")
        a = np.asarray([scores[q] for q in query_ids], dtype=np.float64)
        b = np.asarray([baseline[q] for q in query_ids], dtype=np.float64)
        diff = a - b
        if np.ptp(diff) == 0.0:
            logger.warning(f"Comparison {name} has zero variance of differences")
            results.append(ComparisonResult(system=name, n=len(diff), mean_difference=float(diff.mean()), degenerate=True))
            continue
        outcome = stats.ttest_rel(a, b)
        results.append(
            ComparisonResult(
                system=name,
                n=len(diff),
                mean_difference=float(diff.mean()),
                t_statistic=float(outcome.statistic),
                p_value=float(outcome.pvalue),
            )
        )

    tested = [i for i, result in enumerate(results) if not result.degenerate]
    adjusted = holm_adjust([results[i].p_value for i in tested])
    for i, p_adjusted in zip(tested, adjusted):
        results[i] = results[i].model_copy(update={"p_adjusted": p_adjusted})
    return results


def cluster_stats(
    cluster_sets: Sequence[ClusterSet],
    provider: EmbeddingProvider,
    cache: Optional[EmbeddingCache] = None,
) -> ClusterStats:
    """Distribution of cluster counts and mean pairwise similarity of multi-cluster sets."""
    if not cluster_sets:
        raise EvaluationError("cluster statistics need at least one cluster set")
    sizes = [len(cluster_set.clusters) for cluster_set in cluster_sets]
    distribution = {size: sizes.count(size) / len(sizes) for size in sorted(set(sizes))}

    similarities: Dict[int, List[float]] = {}
    for cluster_set in cluster_sets:
        if len(cluster_set.clusters) < 2:
            continue
        vectors = embed(list(cluster_set.clusters), provider, cache)
        for a, b in itertools.combinations(vectors, 2):
            similarities.setdefault(len(cluster_set.clusters), []).append(cosine(a, b))
    mean_similarity = {size: float(np.mean(values)) for size, values in sorted(similarities.items())}
    return ClusterStats(total_sets=len(sizes), count_distribution=distribution, mean_pairwise_similarity=mean_similarity)


def metrics_frame(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """Per-query scores of several runs aligned on query id, one column per run tag."""
    columns = {report.run_tag: pd.Series(report.per_query, dtype="float64") for report in reports}
    frame = pd.DataFrame(columns).sort_index()
    frame.index.name = "query_id"
    return frame


def write_metric_report(output_dir: Path, report: MetricReport) -> Dict[str, Path]:
    output_dir = Path(output_dir)
    json_path = write_json(artifact_path(output_dir, "metrics"), report)
    csv_path = write_frame_csv(artifact_path(output_dir, "metrics_csv"), metrics_frame([report]))
    return {"metrics": json_path, "metrics_csv": csv_path}


def write_frame_csv(path: Path, frame: pd.DataFrame, index: bool = True) -> Path:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=index, float_format="%.6f", lineterminator="\n")
    return write_text_atomic(path, buffer.getvalue())
