"""
Pydantic schemas for the data flowing through the reformulation pipeline.
"""
import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class PromptKind(str, Enum):
    """Enum for prompt templates."""
    CONTEXTUAL_EXPANSION = "contextual_expansion"
    DETAIL_SPECIFIC = "detail_specific"
    ASPECT_SPECIFIC = "aspect_specific"
    CLARITY_ENHANCEMENT = "clarity_enhancement"
    CLUSTERING_GENERATION = "clustering_generation"
    SCORING = "scoring"
    # Baseline reformulation prompts
    QUERY2DOC = "query2doc"
    QUERY2EXPANSION = "query2expansion"
    QUERY2COT = "query2cot"
    GENQR_ENSEMBLE = "genqr_ensemble"


REFORMULATION_KINDS: Tuple[PromptKind, ...] = (
    PromptKind.CONTEXTUAL_EXPANSION,
    PromptKind.DETAIL_SPECIFIC,
    PromptKind.ASPECT_SPECIFIC,
    PromptKind.CLARITY_ENHANCEMENT,
)

DEFAULT_PROMPT_KINDS: Tuple[PromptKind, ...] = REFORMULATION_KINDS[:3]


class AggregationStrategy(str, Enum):
    """Enum for query aggregation strategies."""
    DC = "dc"
    FW = "fw"
    SIMDW = "simdw"
    SCOREDW = "scoredw"


class BaselineMethod(str, Enum):
    QUERY2DOC = "q2d"
    QUERY2EXPANSION = "q2e"
    QUERY2COT = "q2c"
    GENQR_ENSEMBLE = "genqre"
    GENQR_FUSION = "genqrf"


class ProcessingStatus(str, Enum):
    """Enum for per-query processing status."""
    PENDING = "pending"
    PROCESSING = "processing"
    COMPLETED = "completed"
    FAILED = "failed"


class InclusionReason(str, Enum):
    PASSED = "passed"
    BELOW_THRESHOLD = "below_threshold"


class LoopDecision(str, Enum):
    ACCEPT = "accept"
    REGENERATE = "regenerate"
    EXHAUSTED = "exhausted"


class GainType(str, Enum):
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


class ScoreFunction(str, Enum):
    COSINE = "cosine"
    DOT = "dot"


class SampleMode(str, Enum):
    """How the N samples per prompt are requested from a provider."""
    BATCHED = "batched"
    INDEPENDENT = "independent"


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True)


# Query schemas
class Query(_Frozen):
    id: str
    text: str

    @field_validator("id")
    @classmethod
    def _id_not_empty(cls, value: str) -> str:
        if not value:
            raise ValueError("query id must not be empty")
        return value

    @field_validator("text")
    @classmethod
    def _text_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("query text must not be blank")
        return value


class ReformulatedQuery(_Frozen):
    query_id: str
    text: str
    prompt_kind: PromptKind
    generation_index: int = Field(ge=0)
    iteration: int = Field(ge=0)

    @field_validator("text")
    @classmethod
    def _text_not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("reformulated query text must not be blank")
        return value


class ClusterSet(_Frozen):
    clusters: Tuple[str, ...]
    source_iteration: int = Field(default=0, ge=0)

    @field_validator("clusters")
    @classmethod
    def _one_to_three(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        if not 1 <= len(value) <= 3:
            raise ValueError(f"cluster count must be between 1 and 3, got {len(value)}")
        if any(not text.strip() for text in value):
            raise ValueError("cluster queries must not be blank")
        return value


# Generation schemas
class SamplingParams(_Frozen):
    model_config = ConfigDict(frozen=True, extra="forbid")

    temperature: float = Field(default=0.8, ge=0.0, le=2.0)
    top_p: float = Field(default=0.95, gt=0.0, le=1.0)


class GenerationRequest(_Frozen):
    prompt: str
    kind: PromptKind
    query_text: str
    context: Tuple[str, ...] = ()
    sampling: SamplingParams = SamplingParams()
    n_samples: int = Field(default=1, ge=1)
    # Part of the sampling identity: a new iteration or parse retry asks for fresh samples.
    iteration: int = Field(default=0, ge=0)
    attempt: int = Field(default=0, ge=0)

    def identity(self, provider_id: str) -> Dict[str, Any]:
        return {
            "prompt": self.prompt,
            "sampling": {
                "temperature": self.sampling.temperature,
                "top_p": self.sampling.top_p,
                "iteration": self.iteration,
                "attempt": self.attempt,
            },
            "n_samples": self.n_samples,
            "provider_id": provider_id,
        }


class GenerationResponse(_Frozen):
    completions: Tuple[str, ...]
    metadata: Dict[str, Any] = Field(default_factory=dict)
    cache_hit: bool = False


class ScoreList(_Frozen):
    scores: Tuple[float, ...]

    @field_validator("scores")
    @classmethod
    def _within_range(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        for score in value:
            if not math.isfinite(score) or not 1.0 <= score <= 100.0:
                raise ValueError(f"score {score} outside [1, 100]")
        return value


# Embedding schemas
class EmbeddingVector(_Frozen):
    values: Tuple[float, ...]
    dim: int = Field(gt=0)
    normalized: bool = False

    @model_validator(mode="after")
    def _check_vector(self) -> "EmbeddingVector":
        if len(self.values) != self.dim:
            raise ValueError(f"vector has {len(self.values)} values, expected dim {self.dim}")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("vector entries must be finite")
        if self.normalized:
            norm = math.sqrt(sum(v * v for v in self.values))
            if abs(norm - 1.0) >= 1e-6:
                raise ValueError(f"vector flagged normalized has norm {norm}")
        return self

    @classmethod
    def from_array(cls, array: Any, normalized: bool = False) -> "EmbeddingVector":
        values = tuple(float(v) for v in np.asarray(array, dtype=np.float64).ravel())
        return cls(values=values, dim=len(values), normalized=normalized)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


# Aggregation schemas
class BundleEntry(_Frozen):
    text: str
    weight: float
    included: bool
    reason: InclusionReason
    similarity: Optional[float] = None
    score: Optional[float] = None
    embedding: Optional[EmbeddingVector] = None


class WeightedQueryBundle(_Frozen):
    init_text: str
    w0: float = Field(ge=0.0, le=1.0)
    entries: Tuple[BundleEntry, ...] = ()

    @property
    def included(self) -> Tuple[BundleEntry, ...]:
        return tuple(entry for entry in self.entries if entry.included)


class AggregatedQuery(_Frozen):
    strategy: AggregationStrategy
    fused_embedding: Optional[EmbeddingVector] = None
    fused_text: Optional[str] = None
    bundle: WeightedQueryBundle

    @model_validator(mode="after")
    def _exactly_one_output(self) -> "AggregatedQuery":
        if (self.fused_embedding is None) == (self.fused_text is None):
            raise ValueError("exactly one of fused_embedding / fused_text must be set")
        return self


# Retrieval schemas
class ScoredDoc(_Frozen):
    doc_id: str
    score: float


class RetrievalRun(_Frozen):
    tag: str = "run"
    results: Dict[str, Tuple[ScoredDoc, ...]] = Field(default_factory=dict)

    @field_validator("results")
    @classmethod
    def _ranked(cls, value: Dict[str, Tuple[ScoredDoc, ...]]) -> Dict[str, Tuple[ScoredDoc, ...]]:
        for query_id, ranked in value.items():
            seen = set()
            for position, doc in enumerate(ranked):
                if doc.doc_id in seen:
                    raise ValueError(f"duplicate doc {doc.doc_id} for query {query_id}")
                seen.add(doc.doc_id)
                if position == 0:
                    continue
                previous = ranked[position - 1]
                if doc.score > previous.score or (
                    doc.score == previous.score and doc.doc_id < previous.doc_id
                ):
                    raise ValueError(f"ranking for query {query_id} is not ordered at rank {position + 1}")
        return value


# Evaluation schemas
class Qrels(_Frozen):
    judgments: Dict[str, Dict[str, int]] = Field(default_factory=dict)

    @field_validator("judgments")
    @classmethod
    def _non_negative(cls, value: Dict[str, Dict[str, int]]) -> Dict[str, Dict[str, int]]:
        for query_id, row in value.items():
            if not query_id:
                raise ValueError("qrels query ids must not be empty")
            for doc_id, grade in row.items():
                if grade < 0:
                    raise ValueError(f"negative grade {grade} for ({query_id}, {doc_id})")
        return value

    def row(self, query_id: str) -> Dict[str, int]:
        return self.judgments.get(query_id, {})


class MetricReport(_Frozen):
    run_tag: str
    k: int = Field(ge=1)
    per_query: Dict[str, float] = Field(default_factory=dict)
    mean: float = 0.0
    excluded_queries: List[str] = Field(default_factory=list)
    failed_queries: List[str] = Field(default_factory=list)


class ComparisonResult(_Frozen):
    system: str
    n: int
    mean_difference: float
    t_statistic: Optional[float] = None
    p_value: Optional[float] = None
    p_adjusted: Optional[float] = None
    degenerate: bool = False


class ClusterStats(_Frozen):
    total_sets: int
    count_distribution: Dict[int, float]
    mean_pairwise_similarity: Dict[int, float]


# QERM schemas
class QermExample(_Frozen):
    query_id: str
    features: Tuple[float, ...]
    label: int = Field(ge=0, le=1)
    ndcg: float


class QermTrainingMetadata(_Frozen):
    epochs: int = 0
    learning_rate: float = 0.0
    l2: float = 0.0
    seed: int = 0
    loss_trace: Tuple[float, ...] = ()
    degenerate: bool = False
    positive_rate: Optional[float] = None


class QermModel(_Frozen):
    weights: Tuple[float, ...]
    bias: float = 0.0
    feature_dim: int = Field(gt=0)
    metadata: QermTrainingMetadata = QermTrainingMetadata()

    @model_validator(mode="after")
    def _dims_match(self) -> "QermModel":
        if len(self.weights) != self.feature_dim:
            raise ValueError(f"model has {len(self.weights)} weights, feature_dim is {self.feature_dim}")
        return self


class LoopStep(_Frozen):
    iteration: int
    clusters: ClusterSet
    logit: float
    decision: LoopDecision


class LoopState(_Frozen):
    query_id: str
    t: int = 0
    epsilon: float
    history: Tuple[LoopStep, ...] = ()
    terminal: LoopDecision
    selected_iteration: int = 0

    @property
    def regenerations(self) -> int:
        return sum(1 for step in self.history if step.decision == LoopDecision.REGENERATE)


# Pipeline schemas
class QueryOutcome(_Frozen):
    query_id: str
    status: ProcessingStatus = ProcessingStatus.PENDING
    iteration: int = 0
    generated: Tuple[ReformulatedQuery, ...] = ()
    clusters: Optional[ClusterSet] = None
    scores: Optional[ScoreList] = None
    aggregated: Optional[AggregatedQuery] = None
    ranked: Tuple[ScoredDoc, ...] = ()
    stage: Optional[str] = None
    error: Optional[str] = None
    loop: Optional[LoopState] = None


class FinetunePair(_Frozen):
    query_id: str
    q_init: str
    q_ref: str
    prompt_kind: PromptKind
    score: float = Field(ge=1.0, le=100.0)


class AblationRow(_Frozen):
    kind: str
    setting: str
    mean_ndcg: float
    queries: int
    combinations: int = 1


class RunManifest(BaseModel):
    config: Dict[str, Any]
    provider_ids: Dict[str, str] = Field(default_factory=dict)
    dataset: Dict[str, str] = Field(default_factory=dict)
    artifacts: Dict[str, str] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    seed: int = 0
    sample_mode: SampleMode = SampleMode.BATCHED
    query_count: int = 0
    failure_count: int = 0


# Artifact rows
class ClusterRecord(_Frozen):
    query_id: str
    cluster_set: ClusterSet


class ScoreRecord(_Frozen):
    query_id: str
    scores: ScoreList


class AggregatedRecord(_Frozen):
    query_id: str
    aggregated: AggregatedQuery


class FailureRecord(_Frozen):
    query_id: str
    stage: Optional[str] = None
    error: str
