"""
Per-query reformulation pipeline: generate -> cluster -> (score) -> aggregate -> retrieve.
"""
import logging
from typing import List, Optional, Sequence, Tuple

from app.core.config import PipelineConfig
from app.core.exceptions import ContractViolationError, MalformedPayloadError, ReformulationError, StageError
from app.schemas.schemas import (
    AggregatedQuery,
    AggregationStrategy,
    BaselineMethod,
    ClusterSet,
    GenerationRequest,
    ProcessingStatus,
    PromptKind,
    Query,
    QueryOutcome,
    ReformulatedQuery,
    ScoredDoc,
    ScoreList,
)
from app.services.aggregation import aggregate_dc, aggregate_fw, aggregate_scoredw, aggregate_simdw
from app.services.embedding import EmbeddingCache, EmbeddingProvider, embed
from app.services.llm_client import LLMGateway
from app.services.parsers import parse_cluster_output, parse_score_output
from app.services.prompts import baseline_prompts, render_prompt
from app.services.retrieval import DocIndex, retrieve
from app.tasks.worker_pool import TaskResult, map_ordered

logger = logging.getLogger(__name__)


class ReformulationPipeline:
    """Runs every stage for one query; stages stay sequential within a query."""

    def __init__(
        self,
        cfg: PipelineConfig,
        gateway: LLMGateway,
        embedder: EmbeddingProvider,
        index: Optional[DocIndex] = None,
        embedding_cache: Optional[EmbeddingCache] = None,
    ):
        self.cfg = cfg
        self.gateway = gateway
        self.embedder = embedder
        self.index = index
        self.embedding_cache = embedding_cache if embedding_cache is not None else EmbeddingCache()

    def _request(
        self,
        kind: PromptKind,
        q: Query,
        prompt: str,
        n_samples: int = 1,
        context: Sequence[str] = (),
        iteration: int = 0,
    ) -> GenerationRequest:
        return GenerationRequest(
            prompt=prompt,
            kind=kind,
            query_text=q.text,
            context=tuple(context),
            sampling=self.cfg.sampling,
            n_samples=n_samples,
            iteration=iteration,
        )

    def _completions(self, request: GenerationRequest) -> List[str]:
        texts = [text.strip() for text in self.gateway.generate(request).completions]
        if not all(texts):
            raise MalformedPayloadError(f"{request.kind.value} returned an empty completion")
        return texts

    def generate_queries(self, q: Query, iteration: int = 0) -> Tuple[ReformulatedQuery, ...]:
        """
        N reformulations per configured prompt.

        Raises:
            ReformulationError: iteration outside [0, max_iterations]
            ContractViolationError: a prompt returned a count other than N
        """
        if not 0 <= iteration <= self.cfg.max_iterations:
            raise ReformulationError(
                f"iteration {iteration} outside [0, {self.cfg.max_iterations}] for query {q.id}"
            )
        generated = []
        for kind in self.cfg.prompt_kinds:
            request = self._request(kind, q, render_prompt(kind, q), self.cfg.n_per_prompt, iteration=iteration)
            texts = self._completions(request)
            if len(texts) != self.cfg.n_per_prompt:
                raise ContractViolationError(
                    f"{kind.value} returned {len(texts)} completions, expected {self.cfg.n_per_prompt}"
                )
            for index, text in enumerate(texts):
                generated.append(
                    ReformulatedQuery(query_id=q.id, text=text, prompt_kind=kind, generation_index=index, iteration=iteration)
                )
        return tuple(generated)

    def cluster(self, q: Query, generated: Sequence[ReformulatedQuery], iteration: int = 0) -> ClusterSet:
        texts = [item.text for item in generated]
        kind = PromptKind.CLUSTERING_GENERATION
        request = self._request(kind, q, render_prompt(kind, q, texts), context=texts, iteration=iteration)
        clusters = self.gateway.generate_parsed(request, parse_cluster_output, retries=self.cfg.parse_retries)
        return clusters.model_copy(update={"source_iteration": iteration})

    def score(self, q: Query, clusters: ClusterSet, iteration: int = 0) -> ScoreList:
        kind = PromptKind.SCORING
        request = self._request(
            kind, q, render_prompt(kind, q, clusters.clusters), context=clusters.clusters, iteration=iteration
        )
        count = len(clusters.clusters)
        return self.gateway.generate_parsed(
            request, lambda raw: parse_score_output(raw, count), retries=self.cfg.parse_retries
        )

    def aggregate(self, q: Query, clusters: ClusterSet, scores: Optional[ScoreList] = None) -> AggregatedQuery:
        refs = list(clusters.clusters)
        strategy = self.cfg.aggregation_strategy
        if strategy == AggregationStrategy.DC:
            return aggregate_dc(q, refs)
        vectors = embed([q.text, *refs], self.embedder, self.embedding_cache)
        e_init, e_refs = vectors[0], vectors[1:]
        if strategy == AggregationStrategy.FW:
            return aggregate_fw(e_init, e_refs, self.cfg.w0, refs, q.text)
        if strategy == AggregationStrategy.SIMDW:
            return aggregate_simdw(e_init, e_refs, self.cfg.w0, self.cfg.sim_threshold, refs, q.text)
        if scores is None:
            raise ReformulationError("ScoreDW aggregation needs cluster scores")
        return aggregate_scoredw(e_init, e_refs, scores, self.cfg.w0, self.cfg.score_threshold, refs, q.text)

    def retrieve(self, aggregated: AggregatedQuery) -> Tuple[ScoredDoc, ...]:
        if self.index is None:
            raise ReformulationError("no document index loaded")
        return retrieve(
            self.index, aggregated, self.cfg.top_k, self.embedder, self.cfg.score_fn, self.embedding_cache
        )

    def process(self, q: Query, iteration: int = 0) -> QueryOutcome:
        """
        Run every stage for one query.

        Raises:
            StageError: naming the stage that failed
        """
        stage = "generate"
        try:
            generated = self.generate_queries(q, iteration)
            stage = "cluster"
            clusters = self.cluster(q, generated, iteration)
            scores = None
            if self.cfg.aggregation_strategy == AggregationStrategy.SCOREDW:
                stage = "score"
                scores = self.score(q, clusters, iteration)
            stage = "aggregate"
            aggregated = self.aggregate(q, clusters, scores)
            stage = "retrieve"
            ranked = self.retrieve(aggregated) if self.index is not None else ()
        except Exception as e:
            raise StageError(stage, q.id, e) from e

        return QueryOutcome(
            query_id=q.id,
            status=ProcessingStatus.COMPLETED,
            iteration=iteration,
            generated=generated,
            clusters=clusters,
            scores=scores,
            aggregated=aggregated,
            ranked=ranked,
        )

    def process_many(self, queries: Sequence[Query], iteration: int = 0) -> List[TaskResult]:
        return map_ordered(
            lambda q: self.process(q, iteration), queries, self.cfg.parallelism, label=lambda q: q.id
        )

    def run_baseline(
        self,
        method: BaselineMethod,
        q: Query,
        demonstrations: Optional[List[Tuple[str, str]]] = None,
    ) -> QueryOutcome:
        """
        One completion per baseline prompt, then retrieval.

        GenQR-Fusion fuses the completion embeddings with fixed weights at w0;
        every other method concatenates them with the initial query.
        """
        stage = "generate"
        try:
            generated = []
            for kind, variant in baseline_prompts(method, self.cfg.seed):
                prompt = render_prompt(kind, q, variant=variant, demonstrations=demonstrations)
                request = self._request(kind, q, prompt)
                text = self._completions(request)[0]
                generated.append(
                    ReformulatedQuery(query_id=q.id, text=text, prompt_kind=kind, generation_index=variant, iteration=0)
                )
            stage = "aggregate"
            texts = [item.text for item in generated]
            if method == BaselineMethod.GENQR_FUSION:
                vectors = embed([q.text, *texts], self.embedder, self.embedding_cache)
                aggregated = aggregate_fw(vectors[0], vectors[1:], self.cfg.w0, texts, q.text)
            else:
                aggregated = aggregate_dc(q, texts)
            stage = "retrieve"
            ranked = self.retrieve(aggregated) if self.index is not None else ()
        except Exception as e:
            raise StageError(stage, q.id, e) from e
        return QueryOutcome(
            query_id=q.id,
            status=ProcessingStatus.COMPLETED,
            generated=tuple(generated),
            aggregated=aggregated,
            ranked=ranked,
        )
