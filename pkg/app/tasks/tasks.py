"""
Run-level orchestration: full pipeline runs, stage-by-stage resumption,
ablation sweeps, QERM dataset/training, fine-tuning export, baselines and
significance comparisons. Every result is written to the output directory.
"""
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import PipelineConfig, Settings, settings as default_settings, with_overrides
from app.core.exceptions import (
    ConfigError,
    FeedbackLoopError,
    IngestError,
    ParseError,
    QermError,
    ReformulationError,
    StageError,
)
from app.db.artifacts import artifact_path, iter_jsonl, read_jsonl, write_json, write_jsonl
from app.schemas.schemas import (
    REFORMULATION_KINDS,
    AblationRow,
    AggregatedRecord,
    AggregationStrategy,
    BaselineMethod,
    ClusterRecord,
    ComparisonResult,
    FailureRecord,
    FinetunePair,
    GenerationRequest,
    MetricReport,
    PromptKind,
    Qrels,
    Query,
    QueryOutcome,
    ReformulatedQuery,
    RetrievalRun,
    RunManifest,
    ScoreRecord,
)
from app.services.embedding import EmbeddingCache, EmbeddingProvider, create_embedding_cache, create_embedding_provider
from app.services.evaluation import (
    cluster_stats,
    evaluate_run,
    metrics_frame,
    paired_ttest_holm,
    write_frame_csv,
    write_metric_report,
)
from app.services.llm_client import LLMGateway, create_gateway
from app.services.parsers import parse_score_output
from app.services.pipeline import ReformulationPipeline
from app.services.prompts import render_prompt
from app.services.qerm import (
    HTTPRewardClassifier,
    QermScorer,
    RewardScorer,
    build_training_set,
    compute_epsilon,
    feedback_loop,
    load_model,
    read_training_set,
    save_model,
    train,
    write_training_set,
)
from app.services.retrieval import DatasetPaths, DocIndex, ingest_corpus, load_qrels, load_queries, read_trec_run, write_trec_run
from app.tasks.worker_pool import TaskResult, map_ordered

logger = logging.getLogger(__name__)

ABLATION_KINDS = ("w0", "prompts", "n_per_prompt", "iterations", "sim_threshold", "score_threshold")

DEFAULT_GRIDS: Dict[str, List[Any]] = {
    "w0": [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    "prompts": [1, 2, 3, 4],
    "n_per_prompt": [1, 2, 3, 4],
    "iterations": [1, 2, 3, 4],
    "sim_threshold": [0.1, 0.15, 0.2, 0.25, 0.3],
    "score_threshold": [40, 50, 60, 70],
}


@dataclass
class RunContext:
    """Everything a run shares across queries: dataset, providers and caches."""

    cfg: PipelineConfig
    queries: List[Query]
    qrels: Qrels
    embedder: EmbeddingProvider
    embedding_cache: EmbeddingCache
    gateway: LLMGateway
    settings: Settings
    index: Optional[DocIndex] = None
    paths: Optional[DatasetPaths] = None
    cache_dir: Optional[Path] = None
    timings: Dict[str, float] = field(default_factory=dict)

    def pipeline(self, cfg: Optional[PipelineConfig] = None) -> ReformulationPipeline:
        return ReformulationPipeline(cfg or self.cfg, self.gateway, self.embedder, self.index, self.embedding_cache)

    def query_map(self) -> Dict[str, Query]:
        return {q.id: q for q in self.queries}


def build_context(
    cfg: PipelineConfig,
    dataset_dir: Path,
    cache_dir: Optional[Path] = None,
    settings: Settings = default_settings,
    need_index: bool = True,
) -> RunContext:
    """Load the dataset and construct providers; no provider call is made here."""
    started = time.perf_counter()
    paths = DatasetPaths.from_dir(dataset_dir)
    qrels = load_qrels(paths.qrels)
    queries = load_queries(paths.queries, qrels)
    embedder = create_embedding_provider(cfg, settings)
    index = ingest_corpus(paths.corpus, paths.embeddings, embedder.provider_id) if need_index else None
    if index is not None and cfg.providers.embedding != "http" and embedder.dim != index.dim:
        raise ConfigError(f"embedding provider dim {embedder.dim} does not match corpus embedding dim {index.dim}")
    context = RunContext(
        cfg=cfg,
        queries=queries,
        qrels=qrels,
        embedder=embedder,
        embedding_cache=create_embedding_cache(cache_dir),
        gateway=create_gateway("generation", cfg, settings, cache_dir),
        settings=settings,
        index=index,
        paths=paths,
        cache_dir=Path(cache_dir) if cache_dir else None,
    )
    context.timings["load"] = time.perf_counter() - started
    return context


def _failure(result: TaskResult, query_id: str) -> FailureRecord:
    error = result.error
    if isinstance(error, StageError):
        return FailureRecord(query_id=query_id, stage=error.stage, error=error.detail)
    if isinstance(error, FeedbackLoopError):
        return FailureRecord(query_id=query_id, stage="qerm", error=error.detail)
    detail = error.detail if isinstance(error, ReformulationError) else f"{type(error).__name__}: {error}"
    return FailureRecord(query_id=query_id, error=detail)


def _split(
    results: Sequence[TaskResult],
    key: Callable[[Any], str] = lambda q: q.id,
) -> Tuple[List[TaskResult], List[FailureRecord]]:
    ok = [result for result in results if result.ok]
    failed = [_failure(result, key(result.item)) for result in results if not result.ok]
    return ok, failed


def _pair_id(pair: Tuple[Any, ...]) -> str:
    return pair[0].id


def run_queries(
    context: RunContext,
    cfg: PipelineConfig,
    scorer: Optional[RewardScorer] = None,
) -> Tuple[List[QueryOutcome], List[FailureRecord], Optional[float]]:
    """
    Process every query, optionally through the feedback loop.

    Returns:
        (outcomes in query order, failures, epsilon or None)
    """
    pipeline = context.pipeline(cfg)
    first_pass, failures = _split(pipeline.process_many(context.queries))
    if scorer is None:
        return [result.value for result in first_pass], failures, None

    pairs = [(result.item, result.value) for result in first_pass]
    scored, score_failures = _split(
        map_ordered(lambda pair: scorer.score(pair[0], pair[1].clusters), pairs, cfg.parallelism, label=_pair_id),
        key=_pair_id,
    )
    failures.extend(score_failures)
    if not scored:
        return [], failures, None
    epsilon = compute_epsilon([result.value for result in scored])
    logger.info(f"Feedback loop threshold epsilon = {epsilon:.6f} over {len(scored)} first-pass queries")

    looped, loop_failures = _split(
        map_ordered(
            lambda item: feedback_loop(
                item[0], pipeline, scorer, epsilon, cfg.max_iterations, initial=item[1], initial_logit=item[2]
            ),
            [(*result.item, result.value) for result in scored],
            cfg.parallelism,
            label=_pair_id,
        ),
        key=_pair_id,
    )
    failures.extend(loop_failures)
    order = {q.id: i for i, q in enumerate(context.queries)}
    failures.sort(key=lambda record: order.get(record.query_id, len(order)))
    return [result.value for result in looped], failures, epsilon


def _scorer(context: RunContext, model_path: Optional[Path], reward_url: Optional[str] = None) -> RewardScorer:
    if reward_url:
        return HTTPRewardClassifier(
            reward_url, timeout=context.settings.request_timeout, max_retries=context.settings.max_transport_retries
        )
    if model_path is None:
        raise QermError("the feedback loop needs a trained reward model (--qerm-model) or a reward classifier URL")
    return QermScorer(load_model(model_path), context.embedder, context.embedding_cache)


def _explain_row(outcome: QueryOutcome) -> Dict[str, Any]:
    bundle = outcome.aggregated.bundle.model_dump(mode="json", exclude={"entries": {"__all__": {"embedding"}}})
    return {"query_id": outcome.query_id, "strategy": outcome.aggregated.strategy.value, "bundle": bundle}


def write_outcomes(
    output_dir: Path,
    tag: str,
    outcomes: Sequence[QueryOutcome],
    failures: Sequence[FailureRecord],
    explain: bool = False,
) -> Tuple[RetrievalRun, Dict[str, Path]]:
    """Persist every stage artifact of a run."""
    written = {
        "generated": write_jsonl(artifact_path(output_dir, "generated"), (g for o in outcomes for g in o.generated)),
        "clusters": write_jsonl(
            artifact_path(output_dir, "clusters"),
            (ClusterRecord(query_id=o.query_id, cluster_set=o.clusters) for o in outcomes if o.clusters is not None),
        ),
        "scores": write_jsonl(
            artifact_path(output_dir, "scores"),
            (ScoreRecord(query_id=o.query_id, scores=o.scores) for o in outcomes if o.scores is not None),
        ),
        "aggregated": write_jsonl(
            artifact_path(output_dir, "aggregated"),
            (AggregatedRecord(query_id=o.query_id, aggregated=o.aggregated) for o in outcomes),
        ),
        "failures": write_jsonl(artifact_path(output_dir, "failures"), failures),
    }
    run = RetrievalRun(tag=tag, results={o.query_id: o.ranked for o in outcomes})
    written["run"] = write_trec_run(artifact_path(output_dir, "run"), run)
    if explain:
        written["explain"] = write_jsonl(artifact_path(output_dir, "explain"), (_explain_row(o) for o in outcomes))
    loops = [o.loop for o in outcomes if o.loop is not None]
    if loops:
        written["loop"] = write_jsonl(artifact_path(output_dir, "loop"), loops)
    return run, written


def _manifest(
    context: RunContext,
    cfg: PipelineConfig,
    artifacts: Dict[str, Path],
    timings: Dict[str, float],
    failure_count: int,
) -> RunManifest:
    provider_ids = {"generation": context.gateway.provider_id, "embedding": context.embedder.provider_id}
    if context.index is not None:
        provider_ids["corpus_embeddings"] = context.index.metadata.get("embeddings", "")
    return RunManifest(
        config=cfg.model_dump(mode="json"),
        provider_ids=provider_ids,
        dataset=context.paths.as_dict() if context.paths else {},
        artifacts={name: str(path) for name, path in sorted(artifacts.items())},
        timings={name: round(seconds, 6) for name, seconds in timings.items()},
        seed=cfg.seed,
        sample_mode=cfg.providers.sample_mode,
        query_count=len(context.queries),
        failure_count=failure_count,
    )


def run_pipeline(
    context: RunContext,
    output_dir: Path,
    use_qerm: bool = False,
    qerm_model_path: Optional[Path] = None,
    explain: bool = False,
    tag: Optional[str] = None,
    cfg: Optional[PipelineConfig] = None,
    reward_url: Optional[str] = None,
) -> Tuple[MetricReport, RunManifest]:
    """
    Generate, cluster, (score), aggregate, retrieve and evaluate every query.

    Per-query failures are recorded and the run continues.
    """
    cfg = cfg or context.cfg
    scorer = _scorer(context, qerm_model_path, reward_url) if use_qerm else None
    tag = tag or f"{cfg.aggregation_strategy.value}{'-qerm' if use_qerm else ''}"
    output_dir = Path(output_dir)
    logger.info(f"Starting run {tag} over {len(context.queries)} queries")

    timings = dict(context.timings)
    started = time.perf_counter()
    outcomes, failures, epsilon = run_queries(context, cfg, scorer)
    timings["process"] = time.perf_counter() - started

    started = time.perf_counter()
    run, artifacts = write_outcomes(output_dir, tag, outcomes, failures, explain)
    report = evaluate_run(run, context.qrels, cfg.ndcg_k, cfg.gain, [f.query_id for f in failures])
    artifacts.update(write_metric_report(output_dir, report))
    timings["evaluate"] = time.perf_counter() - started

    manifest = _manifest(context, cfg, artifacts, timings, len(failures))
    if epsilon is not None:
        manifest.config["qerm_epsilon"] = epsilon
    write_json(artifact_path(output_dir, "manifest"), manifest)
    logger.info(
        f"Run {tag} completed: nDCG@{cfg.ndcg_k} = {report.mean:.4f}, {len(failures)} failures, "
        f"cache hit rate {context.gateway.cache.hit_rate():.2f}"
    )
    return report, manifest


# Stage-by-stage commands, each resuming from the previous stage's artifact.

def _group_generated(rows: Sequence[ReformulatedQuery]) -> Dict[str, List[ReformulatedQuery]]:
    grouped: Dict[str, List[ReformulatedQuery]] = {}
    for row in rows:
        grouped.setdefault(row.query_id, []).append(row)
    return grouped


def _known(context: RunContext, query_ids: Sequence[str]) -> List[Query]:
    queries = context.query_map()
    unknown = [query_id for query_id in query_ids if query_id not in queries]
    if unknown:
        raise ReformulationError(f"artifact refers to unknown queries {unknown[:5]}")
    return [queries[query_id] for query_id in query_ids]


def stage_generate(context: RunContext, output_dir: Path) -> Path:
    pipeline = context.pipeline()
    ok, failures = _split(map_ordered(pipeline.generate_queries, context.queries, context.cfg.parallelism,
                                      label=lambda q: q.id))
    write_jsonl(Path(output_dir) / "generate_failures.jsonl", failures)
    return write_jsonl(artifact_path(output_dir, "generated"), (row for result in ok for row in result.value))


def stage_cluster(context: RunContext, output_dir: Path) -> Path:
    pipeline = context.pipeline()
    grouped = _group_generated(read_jsonl(artifact_path(output_dir, "generated"), ReformulatedQuery))
    queries = _known(context, list(grouped))
    ok, failures = _split(
        map_ordered(lambda q: pipeline.cluster(q, grouped[q.id], grouped[q.id][0].iteration), queries,
                    context.cfg.parallelism, label=lambda q: q.id)
    )
    write_jsonl(Path(output_dir) / "cluster_failures.jsonl", failures)
    return write_jsonl(
        artifact_path(output_dir, "clusters"),
        (ClusterRecord(query_id=r.item.id, cluster_set=r.value) for r in ok),
    )


def stage_score(context: RunContext, output_dir: Path) -> Path:
    pipeline = context.pipeline()
    records = read_jsonl(artifact_path(output_dir, "clusters"), ClusterRecord)
    by_id = {record.query_id: record.cluster_set for record in records}
    queries = _known(context, list(by_id))
    ok, failures = _split(
        map_ordered(lambda q: pipeline.score(q, by_id[q.id], by_id[q.id].source_iteration), queries,
                    context.cfg.parallelism, label=lambda q: q.id)
    )
    write_jsonl(Path(output_dir) / "score_failures.jsonl", failures)
    return write_jsonl(artifact_path(output_dir, "scores"), (ScoreRecord(query_id=r.item.id, scores=r.value) for r in ok))


def stage_aggregate(context: RunContext, output_dir: Path, explain: bool = False) -> Path:
    pipeline = context.pipeline()
    records = read_jsonl(artifact_path(output_dir, "clusters"), ClusterRecord)
    by_id = {record.query_id: record.cluster_set for record in records}
    scores = {}
    if context.cfg.aggregation_strategy == AggregationStrategy.SCOREDW:
        scores = {r.query_id: r.scores for r in read_jsonl(artifact_path(output_dir, "scores"), ScoreRecord)}
    queries = _known(context, list(by_id))
    ok, failures = _split(
        map_ordered(lambda q: pipeline.aggregate(q, by_id[q.id], scores.get(q.id)), queries,
                    context.cfg.parallelism, label=lambda q: q.id)
    )
    write_jsonl(Path(output_dir) / "aggregate_failures.jsonl", failures)
    if explain:
        write_jsonl(
            artifact_path(output_dir, "explain"),
            (_explain_row(QueryOutcome(query_id=r.item.id, aggregated=r.value)) for r in ok),
        )
    return write_jsonl(
        artifact_path(output_dir, "aggregated"),
        (AggregatedRecord(query_id=r.item.id, aggregated=r.value) for r in ok),
    )


def stage_retrieve(context: RunContext, output_dir: Path, tag: Optional[str] = None) -> Path:
    pipeline = context.pipeline()
    records = read_jsonl(artifact_path(output_dir, "aggregated"), AggregatedRecord)
    ok, failures = _split(
        map_ordered(lambda r: pipeline.retrieve(r.aggregated), records, context.cfg.parallelism,
                    label=lambda r: r.query_id),
        key=lambda r: r.query_id,
    )
    write_jsonl(Path(output_dir) / "retrieve_failures.jsonl", failures)
    run = RetrievalRun(tag=tag or context.cfg.aggregation_strategy.value, results={r.item.query_id: r.value for r in ok})
    return write_trec_run(artifact_path(output_dir, "run"), run)


def stage_evaluate(run_path: Path, qrels: Qrels, cfg: PipelineConfig, output_dir: Path) -> MetricReport:
    report = evaluate_run(read_trec_run(run_path), qrels, cfg.ndcg_k, cfg.gain)
    write_metric_report(output_dir, report)
    logger.info(f"nDCG@{cfg.ndcg_k} for {report.run_tag}: {report.mean:.4f} over {len(report.per_query)} queries")
    return report


# Ablations

def ablation_configs(kind: str, value: Any, base: PipelineConfig) -> List[PipelineConfig]:
    """Configurations evaluated for one grid point; several for prompt-count points."""
    if kind == "w0":
        return [with_overrides(base, w0=value)]
    if kind == "n_per_prompt":
        return [with_overrides(base, n_per_prompt=value)]
    if kind == "iterations":
        return [with_overrides(base, max_iterations=value)]
    if kind == "sim_threshold":
        return [with_overrides(base, sim_threshold=value, aggregation_strategy=AggregationStrategy.SIMDW)]
    if kind == "score_threshold":
        return [with_overrides(base, score_threshold=value, aggregation_strategy=AggregationStrategy.SCOREDW)]
    if kind == "prompts":
        count = int(value)
        if not 1 <= count <= len(REFORMULATION_KINDS):
            raise ConfigError(f"prompt count must be between 1 and {len(REFORMULATION_KINDS)}, got {count}")
        return [
            with_overrides(base, prompt_kinds=[kind.value for kind in combination])
            for combination in itertools.combinations(REFORMULATION_KINDS, count)
        ]
    raise ConfigError(f"unknown ablation kind {kind!r}; choose from {', '.join(ABLATION_KINDS)}")


def ablate(
    context: RunContext,
    kind: str,
    output_dir: Path,
    grid: Optional[Sequence[Any]] = None,
    qerm_model_path: Optional[Path] = None,
    reward_url: Optional[str] = None,
) -> Tuple[List[AblationRow], Dict[str, str]]:
    """
    One full pipeline run per grid point, sharing the provider caches.

    Returns:
        (rows written to ablation.csv, {setting: reason} for failed points)
    """
    grid = list(DEFAULT_GRIDS.get(kind, []) if grid is None else grid)
    if not grid:
        raise ConfigError("ablation grid must not be empty")
    points = [(value, ablation_configs(kind, value, context.cfg)) for value in grid]
    use_qerm = kind == "iterations"
    scorer = _scorer(context, qerm_model_path, reward_url) if use_qerm else None

    rows: List[AblationRow] = []
    failed: Dict[str, str] = {}
    for value, configs in points:
        setting = str(value)
        logger.info(f"Ablation {kind}={setting}: {len(configs)} configuration(s)")
        try:
            means, counts = [], []
            for cfg in configs:
                outcomes, failures, _ = run_queries(context, cfg, scorer)
                run = RetrievalRun(tag=f"{kind}={setting}", results={o.query_id: o.ranked for o in outcomes})
                report = evaluate_run(run, context.qrels, cfg.ndcg_k, cfg.gain, [f.query_id for f in failures])
                if not report.per_query:
                    raise ReformulationError("no query could be evaluated")
                means.append(report.mean)
                counts.append(len(report.per_query))
        except ReformulationError as e:
            logger.error(f"Ablation point {kind}={setting} failed: {e.detail}")
            failed[setting] = e.detail
            continue
        rows.append(
            AblationRow(kind=kind, setting=setting, mean_ndcg=float(np.mean(means)), queries=min(counts),
                        combinations=len(configs))
        )

    frame = pd.DataFrame([row.model_dump() for row in rows], columns=list(AblationRow.model_fields))
    write_frame_csv(artifact_path(output_dir, "ablation"), frame, index=False)
    return rows, failed


# QERM

def qerm_build_dataset(context: RunContext, output_dir: Path) -> Tuple[Path, Dict[str, str]]:
    cfg = context.cfg
    examples, skipped = build_training_set(
        context.queries, context.pipeline(), context.qrels, cfg.ndcg_label_threshold, cfg.ndcg_k
    )
    write_jsonl(
        Path(output_dir) / "qerm_skipped.jsonl",
        ({"query_id": query_id, "reason": reason} for query_id, reason in skipped.items()),
    )
    return write_training_set(artifact_path(output_dir, "training_set"), examples), skipped


def qerm_train(training_path: Path, cfg: PipelineConfig, model_path: Path) -> Path:
    examples = read_training_set(training_path)
    model = train(
        examples,
        epochs=cfg.qerm.epochs,
        learning_rate=cfg.qerm.learning_rate,
        l2=cfg.qerm.l2,
        seed=cfg.seed,
        init_scale=cfg.qerm.init_scale,
    )
    return save_model(model_path, model)


# Fine-tuning export

def export_finetune_pairs(
    context: RunContext,
    judge: LLMGateway,
    output_dir: Path,
) -> Tuple[List[FinetunePair], List[Dict[str, str]]]:
    """
    Judge every generated reformulation with the scoring prompt.

    Returns:
        (pairs written to finetune.jsonl, skipped rows with reasons)
    """
    cfg = context.cfg
    pipeline = context.pipeline()

    def judge_query(q: Query) -> Tuple[List[FinetunePair], List[Dict[str, str]]]:
        pairs, skipped = [], []
        for generated in pipeline.generate_queries(q):
            request = GenerationRequest(
                prompt=render_prompt(PromptKind.SCORING, q, [generated.text]),
                kind=PromptKind.SCORING,
                query_text=q.text,
                context=(generated.text,),
                sampling=cfg.sampling,
            )
            try:
                scores = judge.generate_parsed(request, lambda raw: parse_score_output(raw, 1), cfg.parse_retries)
            except ParseError as e:
                skipped.append({"query_id": q.id, "q_ref": generated.text, "reason": e.detail})
                continue
            pairs.append(
                FinetunePair(
                    query_id=q.id, q_init=q.text, q_ref=generated.text,
                    prompt_kind=generated.prompt_kind, score=scores.scores[0],
                )
            )
        return pairs, skipped

    pairs: List[FinetunePair] = []
    skipped: List[Dict[str, str]] = []
    for result in map_ordered(judge_query, context.queries, cfg.parallelism, label=lambda q: q.id):
        if result.ok:
            pairs.extend(result.value[0])
            skipped.extend(result.value[1])
        else:
            skipped.append({"query_id": result.item.id, "q_ref": "", "reason": _failure(result, result.item.id).error})
    write_jsonl(artifact_path(output_dir, "finetune"), pairs)
    write_jsonl(Path(output_dir) / "finetune_skipped.jsonl", skipped)
    logger.info(f"Exported {len(pairs)} fine-tuning pairs, skipped {len(skipped)}")
    return pairs, skipped


# Baselines and comparisons

def load_demonstrations(path: Path) -> List[Tuple[str, str]]:
    """Read few-shot (query, answer) pairs from {"query", "answer"} JSONL rows."""
    if not Path(path).exists():
        raise IngestError(f"demonstrations file not found: {path}")
    pairs = []
    try:
        for row in iter_jsonl(path):
            query, answer = str(row["query"]).strip(), str(row["answer"]).strip()
            if not query or not answer:
                raise ValueError("blank query or answer")
            pairs.append((query, answer))
    except (KeyError, TypeError, ValueError) as e:
        raise IngestError(f"invalid demonstrations file {path}: {e}") from e
    return pairs


def run_baseline(
    context: RunContext,
    method: BaselineMethod,
    output_dir: Path,
    demonstrations: Optional[List[Tuple[str, str]]] = None,
) -> MetricReport:
    """
    Evaluate a single-pass baseline reformulation method.

    Demonstrations only change the Query2Doc and Query2Expansion prompts.
    """
    pipeline = context.pipeline()
    tag = f"baseline-{method.value}"
    ok, failures = _split(
        map_ordered(
            lambda q: pipeline.run_baseline(method, q, demonstrations),
            context.queries,
            context.cfg.parallelism,
            label=lambda q: q.id,
        )
    )
    run, _ = write_outcomes(output_dir, tag, [result.value for result in ok], failures)
    report = evaluate_run(run, context.qrels, context.cfg.ndcg_k, context.cfg.gain, [f.query_id for f in failures])
    write_metric_report(output_dir, report)
    logger.info(f"Baseline {method.value} completed: nDCG@{context.cfg.ndcg_k} = {report.mean:.4f}")
    return report


def compare_runs(
    baseline_path: Path,
    system_paths: Sequence[Path],
    qrels: Qrels,
    cfg: PipelineConfig,
    output_dir: Path,
) -> List[ComparisonResult]:
    """Paired t-tests of each system run against the baseline run, Holm-adjusted."""
    reports = []
    names = set()
    for path in [baseline_path, *system_paths]:
        report = evaluate_run(read_trec_run(path), qrels, cfg.ndcg_k, cfg.gain)
        if report.run_tag in names:
            report = report.model_copy(update={"run_tag": Path(path).name})
        names.add(report.run_tag)
        reports.append(report)
    baseline, systems = reports[0], reports[1:]
    results = paired_ttest_holm(baseline.per_query, {report.run_tag: report.per_query for report in systems})
    write_json(
        artifact_path(output_dir, "comparison"),
        {"baseline": baseline.run_tag, "k": cfg.ndcg_k, "comparisons": [r.model_dump(mode="json") for r in results]},
    )
    write_frame_csv(artifact_path(output_dir, "comparison_csv"), metrics_frame(reports))
    return results


def write_cluster_stats(context: RunContext, clusters_path: Path, output_dir: Path) -> Path:
    records = read_jsonl(clusters_path, ClusterRecord)
    summary = cluster_stats([record.cluster_set for record in records], context.embedder, context.embedding_cache)
    return write_json(artifact_path(output_dir, "cluster_stats"), summary)
