"""
Query evaluation reward model (QERM).

Builds nDCG-labelled training rows from pipeline runs, trains a logistic
reference classifier by full-batch gradient descent and drives the bounded
regenerate-and-recluster feedback loop.
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import httpx
import numpy as np
from pydantic import ValidationError
from scipy.special import expit
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential, wait_none

from app.core.exceptions import (
    DimensionMismatchError,
    FeedbackLoopError,
    MalformedPayloadError,
    ProviderError,
    QermError,
    ReformulationError,
    TransportError,
)
from app.db.artifacts import iter_jsonl, read_json, write_json, write_jsonl
from app.schemas.schemas import (
    ClusterSet,
    LoopDecision,
    LoopState,
    LoopStep,
    QermExample,
    QermModel,
    QermTrainingMetadata,
    Qrels,
    Query,
    QueryOutcome,
)
from app.services.embedding import EmbeddingCache, EmbeddingProvider, cosine, embed
from app.services.evaluation import ndcg_at_k
from app.services.llm_client import is_transient_http_error

logger = logging.getLogger(__name__)

_PRIOR_CLIP = 1e-3


def featurize(
    q_init: Query,
    clusters: ClusterSet,
    provider: EmbeddingProvider,
    cache: Optional[EmbeddingCache] = None,
) -> np.ndarray:
    """
    Feature vector of dim 3d + 2:
    [e_init, mean cluster embedding, |e_init - mean|, mean cosine(e_init, cluster_i), count / 3].
    """
    vectors = embed([q_init.text, *clusters.clusters], provider, cache)
    e_init, cluster_vectors = vectors[0], vectors[1:]
    mean = np.mean([vector.array for vector in cluster_vectors], axis=0)
    mean_cosine = float(np.mean([cosine(e_init, vector) for vector in cluster_vectors]))
    return np.concatenate(
        [e_init.array, mean, np.abs(e_init.array - mean), [mean_cosine, len(clusters.clusters) / 3.0]]
    )


def feature_dim(embedding_dim: int) -> int:
    return 3 * embedding_dim + 2


def label_for(ndcg: float, tau: float) -> int:
    """0 when nDCG falls strictly below tau, else 1."""
    return 0 if ndcg < tau else 1


def loss_and_gradient(
    weights: np.ndarray,
    bias: float,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float = 0.0,
) -> Tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy (plus L2 on the weights) and its gradient."""
    z = features @ weights + bias
    loss = float(np.mean(np.logaddexp(0.0, z) - labels * z) + 0.5 * l2 * np.dot(weights, weights))
    residual = expit(z) - labels
    grad_w = features.T @ residual / len(labels) + l2 * weights
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


def train(
    examples: Sequence[QermExample],
    epochs: int = 500,
    learning_rate: float = 0.1,
    l2: float = 0.0,
    seed: int = 0,
    init_scale: float = 0.0,
) -> QermModel:
    """
    Logistic regression by full-batch gradient descent.

    Single-class (or single-row) data yields a degenerate model whose output
    is the clipped label prior for every input.
    """
    if not examples:
        raise QermError("cannot train a reward model without examples")
    dims = {len(example.features) for example in examples}
    if len(dims) != 1:
        raise DimensionMismatchError(f"training rows have mixed feature dims {sorted(dims)}")
    dim = dims.pop()
    features = np.asarray([example.features for example in examples], dtype=np.float64)
    labels = np.asarray([example.label for example in examples], dtype=np.float64)
    positive_rate = float(labels.mean())

    if len(examples) < 2 or positive_rate in (0.0, 1.0):
        prior = float(np.clip(positive_rate, _PRIOR_CLIP, 1.0 - _PRIOR_CLIP))
        logger.warning(f"Training data has a single class (positive rate {positive_rate}); using prior model")
        return QermModel(
            weights=tuple([0.0] * dim),
            bias=float(np.log(prior / (1.0 - prior))),
            feature_dim=dim,
            metadata=QermTrainingMetadata(
                epochs=0, learning_rate=learning_rate, l2=l2, seed=seed, degenerate=True, positive_rate=positive_rate
            ),
        )

    rng = np.random.default_rng(seed)
    weights = rng.normal(scale=init_scale, size=dim) if init_scale > 0 else np.zeros(dim)
    bias = 0.0
    trace = []
    for _ in range(epochs):
        loss, grad_w, grad_b = loss_and_gradient(weights, bias, features, labels, l2)
        trace.append(loss)
        weights = weights - learning_rate * grad_w
        bias = bias - learning_rate * grad_b
    trace.append(loss_and_gradient(weights, bias, features, labels, l2)[0])
    logger.info(f"Trained reward model on {len(examples)} rows: loss {trace[0]:.4f} -> {trace[-1]:.4f}")

    return QermModel(
        weights=tuple(float(w) for w in weights),
        bias=float(bias),
        feature_dim=dim,
        metadata=QermTrainingMetadata(
            epochs=epochs,
            learning_rate=learning_rate,
            l2=l2,
            seed=seed,
            loss_trace=tuple(trace),
            positive_rate=positive_rate,
        ),
    )


def infer_logit(model: QermModel, features: Sequence[float]) -> float:
    """Classifier output sigmoid(w.x + b) in (0, 1)."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (model.feature_dim,):
        raise DimensionMismatchError(f"features have shape {x.shape}, model expects ({model.feature_dim},)")
    return float(expit(np.dot(np.asarray(model.weights), x) + model.bias))


def compute_epsilon(first_iteration_logits: Sequence[float]) -> float:
    """Regeneration threshold: the mean of the first-pass classifier outputs."""
    if not first_iteration_logits:
        raise QermError("epsilon needs at least one first-iteration logit")
    return float(np.mean(first_iteration_logits))


class RewardScorer(Protocol):
    """Anything that rates a (query, cluster set) pair in (0, 1)."""

    def score(self, q_init: Query, clusters: ClusterSet) -> float:
        ...


class QermScorer:
    """Reference scorer: featurize with the run's embedder, then the logistic model."""

    def __init__(self, model: QermModel, provider: EmbeddingProvider, cache: Optional[EmbeddingCache] = None):
        expected = feature_dim(provider.dim)
        if model.feature_dim != expected:
            raise DimensionMismatchError(
                f"model feature dim {model.feature_dim} does not fit embedding dim {provider.dim} (expected {expected})"
            )
        self.model = model
        self.provider = provider
        self.cache = cache

    def score(self, q_init: Query, clusters: ClusterSet) -> float:
        return infer_logit(self.model, featurize(q_init, clusters, self.provider, self.cache))


class HTTPRewardClassifier:
    """Remote classifier: POST {query, clusters} and read {"score": p}."""

    def __init__(
        self,
        url: str,
        timeout: float = 60.0,
        max_retries: int = 3,
        retry_wait: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.url = url
        self.max_retries = max_retries
        self.retry_wait = retry_wait
        self.client = httpx.Client(timeout=timeout, transport=transport)

    def score(self, q_init: Query, clusters: ClusterSet) -> float:
        retrying = Retrying(
            stop=stop_after_attempt(self.max_retries + 1),
            wait=wait_exponential(multiplier=self.retry_wait, max=30) if self.retry_wait > 0 else wait_none(),
            retry=retry_if_exception(is_transient_http_error),
            reraise=True,
        )
        body = {"query": q_init.text, "clusters": list(clusters.clusters)}
        try:
            for attempt in retrying:
                with attempt:
                    response = self.client.post(self.url, json=body)
                    response.raise_for_status()
            value = float(response.json()["score"])
        except httpx.TransportError as e:
            raise TransportError(f"reward classifier unreachable after {self.max_retries} retries: {e}") from e
        except httpx.HTTPStatusError as e:
            if is_transient_http_error(e):
                raise TransportError(f"reward classifier failed after {self.max_retries} retries: {e}") from e
            raise ProviderError(f"reward classifier rejected request: HTTP {e.response.status_code}") from e
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedPayloadError(f"reward classifier returned no usable score: {e}") from e
        if not 0.0 <= value <= 1.0:
            raise MalformedPayloadError(f"reward classifier score {value} outside [0, 1]")
        return value


class LoopPipeline(Protocol):
    def process(self, q: Query, iteration: int = 0) -> QueryOutcome:
        ...


def feedback_loop(
    q: Query,
    pipeline: LoopPipeline,
    scorer: RewardScorer,
    epsilon: float,
    max_iterations: int,
    initial: Optional[QueryOutcome] = None,
    initial_logit: Optional[float] = None,
) -> QueryOutcome:
    """
    Regenerate and recluster while the classifier output stays below epsilon.

    Each iteration's cluster set is scored; the first one reaching epsilon is
    returned untouched. After max_iterations regenerations the highest-scoring
    iteration is returned (earliest on ties).

    Args:
        q: Initial query
        pipeline: Runs one full generate-to-retrieve pass for an iteration
        scorer: Reward classifier
        epsilon: Acceptance threshold
        max_iterations: Regeneration budget M
        initial: Already computed iteration-0 outcome, if any
        initial_logit: Classifier output already computed for `initial`

    Returns:
        The selected QueryOutcome with its LoopState attached
    """
    history: List[LoopStep] = []
    outcomes: List[QueryOutcome] = []
    t = 0

    def state(terminal: LoopDecision, selected: int) -> LoopState:
        return LoopState(
            query_id=q.id, t=t, epsilon=epsilon, history=tuple(history), terminal=terminal, selected_iteration=selected
        )

    outcome = initial
    logit = initial_logit if initial is not None else None
    while True:
        try:
            if outcome is None:
                outcome = pipeline.process(q, t)
            if logit is None:
                logit = scorer.score(q, outcome.clusters)
        except ReformulationError as e:
            raise FeedbackLoopError(
                f"feedback loop for query {q.id} stopped at iteration {t}: {e.detail}",
                state=state(LoopDecision.EXHAUSTED, max(t - 1, 0)),
            ) from e
        outcomes.append(outcome)

        if logit >= epsilon:
            history.append(LoopStep(iteration=t, clusters=outcome.clusters, logit=logit, decision=LoopDecision.ACCEPT))
            return outcome.model_copy(update={"loop": state(LoopDecision.ACCEPT, t)})
        if t >= max_iterations:
            history.append(LoopStep(iteration=t, clusters=outcome.clusters, logit=logit, decision=LoopDecision.EXHAUSTED))
            best = max(range(len(history)), key=lambda i: (history[i].logit, -i))
            logger.info(f"Query {q.id}: loop exhausted after {t} regenerations, keeping iteration {best}")
            return outcomes[best].model_copy(update={"loop": state(LoopDecision.EXHAUSTED, best)})

        history.append(LoopStep(iteration=t, clusters=outcome.clusters, logit=logit, decision=LoopDecision.REGENERATE))
        logger.debug(f"Query {q.id}: logit {logit:.4f} < epsilon {epsilon:.4f}, regenerating")
        t += 1
        outcome, logit = None, None


def make_example(
    q: Query,
    outcome: QueryOutcome,
    qrels: Qrels,
    tau: float,
    provider: EmbeddingProvider,
    k: int = 10,
    cache: Optional[EmbeddingCache] = None,
) -> QermExample:
    if outcome.clusters is None:
        raise QermError(f"query {q.id} has no cluster set")
    ndcg = ndcg_at_k([doc.doc_id for doc in outcome.ranked], qrels.row(q.id), k)
    features = featurize(q, outcome.clusters, provider, cache)
    return QermExample(query_id=q.id, features=tuple(float(v) for v in features), label=label_for(ndcg, tau), ndcg=ndcg)


def build_training_set(
    queries: Sequence[Query],
    pipeline: Any,
    qrels: Qrels,
    tau: float,
    k: int = 10,
) -> Tuple[List[QermExample], Dict[str, str]]:
    """
    Run the first pipeline pass for every query and label it by nDCG@k against tau.

    Args:
        queries: Queries to label
        pipeline: ReformulationPipeline (provides process_many and the embedder)
        qrels: Judgments covering the queries
        tau: nDCG threshold for label 1
        k: nDCG cutoff

    Returns:
        (examples in query order, {query id: reason} for skipped queries)
    """
    examples: List[QermExample] = []
    skipped: Dict[str, str] = {}
    for result in pipeline.process_many(queries):
        q = result.item
        if not result.ok:
            detail = result.error.detail if isinstance(result.error, ReformulationError) else str(result.error)
            skipped[q.id] = detail
            continue
        if not any(grade > 0 for grade in qrels.row(q.id).values()):
            skipped[q.id] = "no relevant judgments"
            continue
        try:
            examples.append(make_example(q, result.value, qrels, tau, pipeline.embedder, k, pipeline.embedding_cache))
        except ReformulationError as e:
            skipped[q.id] = e.detail
    logger.info(f"Built {len(examples)} training rows, skipped {len(skipped)} queries")
    return examples, skipped


def write_training_set(path: Path, examples: Sequence[QermExample]) -> Path:
    return write_jsonl(
        path,
        ({"qid": e.query_id, "features": list(e.features), "label": e.label, "ndcg": e.ndcg} for e in examples),
    )


def read_training_set(path: Path) -> List[QermExample]:
    try:
        return [
            QermExample(query_id=str(row["qid"]), features=tuple(row["features"]), label=row["label"], ndcg=row["ndcg"])
            for row in iter_jsonl(path)
        ]
    except (KeyError, ValueError, ValidationError) as e:
        raise QermError(f"invalid training set {path}: {e}") from e


def save_model(path: Path, model: QermModel) -> Path:
    return write_json(path, model)


def load_model(path: Path) -> QermModel:
    path = Path(path)
    if not path.exists():
        raise QermError(f"reward model not found: {path}")
    try:
        return QermModel.model_validate(read_json(path))
    except (ValueError, ValidationError) as e:
        raise QermError(f"invalid reward model file {path}: {e}") from e
