"""
Typed errors raised across the reformulation pipeline.
"""
from typing import Any, Optional


class ReformulationError(Exception):
    """Base error; `detail` is the human-readable message shown by the CLI."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(ReformulationError):
    """Invalid or unknown configuration value."""


class PromptError(ReformulationError):
    """A prompt could not be rendered."""


class ProviderError(ReformulationError):
    """A generation, embedding or judge provider failed."""


class TransportError(ProviderError):
    """Provider unreachable after the bounded retry budget."""


class MalformedPayloadError(ProviderError):
    """Provider answered with a payload that does not follow its contract."""


class ContractViolationError(ProviderError):
    """Provider returned the wrong number of completions."""


class ParseError(ReformulationError):
    """An LLM completion could not be parsed."""


class ClusterParseError(ParseError):
    pass


class ScoreParseError(ParseError):
    pass


class EmbeddingError(ReformulationError):
    pass


class DimensionMismatchError(EmbeddingError):
    pass


class ZeroVectorError(EmbeddingError):
    pass


class AggregationError(ReformulationError):
    """Aggregation inputs do not line up."""


class RetrievalError(ReformulationError):
    pass


class EmptyIndexError(RetrievalError):
    pass


class IngestError(RetrievalError):
    pass


class EvaluationError(ReformulationError):
    pass


class MisalignedQueriesError(EvaluationError):
    pass


class QermError(ReformulationError):
    pass


class FeedbackLoopError(QermError):
    """The feedback loop stopped on a pipeline failure; `state` keeps the steps taken so far."""

    def __init__(self, detail: str, state: Any = None):
        super().__init__(detail)
        self.state = state


class StageError(ReformulationError):
    """A pipeline stage failed for one query."""

    def __init__(self, stage: str, query_id: str, cause: Exception):
        reason = cause.detail if isinstance(cause, ReformulationError) else str(cause)
        super().__init__(f"{stage} failed for query {query_id}: {reason}")
        self.stage = stage
        self.query_id = query_id
        self.cause: Optional[Exception] = cause
