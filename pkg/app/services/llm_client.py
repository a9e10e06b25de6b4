"""
Generation gateway: provider abstraction, on-disk response cache and bounded retries.

Providers return the raw chat-completions payload; the gateway extracts the
completions, enforces the completion-count contract and caches validated payloads.
"""
import hashlib
import json
import logging
import threading
from abc import ABC, abstractmethod
from collections import Counter
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, TypeVar

import httpx
from tenacity import RetryError, Retrying, retry_if_exception, stop_after_attempt, wait_exponential, wait_none

from app.core.config import PipelineConfig, Settings
from app.core.exceptions import (
    ContractViolationError,
    MalformedPayloadError,
    ParseError,
    ProviderError,
    TransportError,
)
from app.db.artifacts import iter_jsonl, write_text_atomic
from app.schemas.schemas import GenerationRequest, GenerationResponse, PromptKind, SampleMode
from app.services.parsers import serialize_clusters_mapping

logger = logging.getLogger(__name__)

ParsedT = TypeVar("ParsedT")


def is_transient_http_error(error: BaseException) -> bool:
    """Transport failures, HTTP 429 and 5xx are worth retrying; other statuses are not."""
    if isinstance(error, httpx.TransportError):
        return True
    if isinstance(error, httpx.HTTPStatusError):
        return error.response.status_code == 429 or error.response.status_code >= 500
    return False


def _choices_payload(texts: List[str], **extra: Any) -> Dict[str, Any]:
    payload = {"choices": [{"index": i, "message": {"role": "assistant", "content": t}} for i, t in enumerate(texts)]}
    payload.update(extra)
    return payload


class GenerationProvider(ABC):
    """A source of chat completions."""

    @property
    @abstractmethod
    def provider_id(self) -> str:
        ...

    @abstractmethod
    def complete(self, request: GenerationRequest, n: int, offset: int = 0) -> Dict[str, Any]:
        """Return a raw chat-completions payload with `n` choices."""


class HTTPChatProvider(GenerationProvider):
    """Chat-completions client over HTTP (OpenAI-compatible servers, vLLM, TGI)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str = "",
        timeout: float = 60.0,
        max_retries: int = 3,
        retry_wait: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.max_retries = max_retries
        self.retry_wait = retry_wait
        self.client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout, transport=transport)

    @property
    def provider_id(self) -> str:
        return f"http:{self.model}@{self.base_url}"

    def _post(self, body: Dict[str, Any]) -> httpx.Response:
        retrying = Retrying(
            stop=stop_after_attempt(self.max_retries + 1),
            wait=wait_exponential(multiplier=self.retry_wait, max=30) if self.retry_wait > 0 else wait_none(),
            retry=retry_if_exception(is_transient_http_error),
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    if attempt.retry_state.attempt_number > 1:
                        logger.warning(f"Retrying chat completion (attempt {attempt.retry_state.attempt_number})")
                    response = self.client.post("/chat/completions", json=body)
                    response.raise_for_status()
                    return response
        except (httpx.TransportError, RetryError) as e:
            raise TransportError(f"chat completion request failed after {self.max_retries} retries: {e}") from e
        except httpx.HTTPStatusError as e:
            if is_transient_http_error(e):
                raise TransportError(f"chat completion request failed after {self.max_retries} retries: {e}") from e
            raise ProviderError(f"chat completion request rejected: HTTP {e.response.status_code}") from e
        raise TransportError("chat completion request produced no response")

    def complete(self, request: GenerationRequest, n: int, offset: int = 0) -> Dict[str, Any]:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "n": n,
        }
        response = self._post(body)
        try:
            return response.json()
        except ValueError as e:
            raise MalformedPayloadError(f"provider returned non-JSON body: {e}") from e


class ReplayFixtureProvider(GenerationProvider):
    """
    Replays completions recorded in a JSONL fixture.

    Each row: {"kind", "query", "completions", optional "iteration", optional "context"}.
    Lookup falls back from (kind, query, iteration, context) to iteration 0 and to
    rows recorded without context.
    """

    def __init__(self, fixture_path: Path):
        self.fixture_path = Path(fixture_path)
        if not self.fixture_path.exists():
            raise ProviderError(f"replay fixture not found: {self.fixture_path}")
        content = self.fixture_path.read_bytes()
        self._digest = hashlib.sha256(content).hexdigest()[:12]
        self._rows: Dict[Tuple[str, str, int, Optional[Tuple[str, ...]]], List[str]] = {}
        for row in iter_jsonl(self.fixture_path):
            context = tuple(row["context"]) if row.get("context") is not None else None
            key = (str(row["kind"]), str(row["query"]), int(row.get("iteration", 0)), context)
            self._rows[key] = [str(text) for text in row["completions"]]
        logger.info(f"Loaded {len(self._rows)} replay rows from {self.fixture_path}")

    @property
    def provider_id(self) -> str:
        return f"replay:{self.fixture_path.name}:{self._digest}"

    def complete(self, request: GenerationRequest, n: int, offset: int = 0) -> Dict[str, Any]:
        kind = request.kind.value
        for iteration in dict.fromkeys((request.iteration, 0)):
            for context in (request.context, None):
                recorded = self._rows.get((kind, request.query_text, iteration, context))
                if recorded is not None:
                    return _choices_payload(recorded[offset:offset + n], model=self.provider_id)
        raise ProviderError(f"no replay completion recorded for {kind} / {request.query_text!r}")


class MockGenerationProvider(GenerationProvider):
    """Deterministic templated completions derived from a seeded hash of the request."""

    VOCABULARY = (
        "overview", "causes", "mechanism", "symptoms", "treatment", "history", "evidence",
        "comparison", "definition", "examples", "risks", "benefits", "methods", "applications",
        "statistics", "guidelines", "research", "factors", "impact", "analysis",
    )

    def __init__(self, seed: int = 0):
        self.seed = seed

    @property
    def provider_id(self) -> str:
        return f"mock-llm:seed={self.seed}"

    def _digest(self, request: GenerationRequest, sample: int) -> bytes:
        material = json.dumps(
            [self.seed, request.kind.value, request.query_text, list(request.context),
             request.iteration, request.attempt, sample],
            ensure_ascii=False,
        )
        return hashlib.sha256(material.encode("utf-8")).digest()

    def _words(self, digest: bytes, count: int) -> List[str]:
        return [self.VOCABULARY[digest[i] % len(self.VOCABULARY)] for i in range(count)]

    def _reformulation(self, request: GenerationRequest, digest: bytes) -> str:
        return f"{request.query_text} {' '.join(self._words(digest, 3))}"

    def _clusters(self, request: GenerationRequest, digest: bytes) -> str:
        generated = list(request.context) or [request.query_text]
        count = min(1 + digest[0] % 3, len(generated))
        groups = [generated[i::count] for i in range(count)]
        texts = []
        for group in groups:
            extras = [word for text in group for word in text.split()[-2:]]
            texts.append(f"{request.query_text} {' '.join(dict.fromkeys(extras))}".strip())
        return f"Here are the clusters: {serialize_clusters_mapping(texts)}"

    def _scores(self, request: GenerationRequest, digest: bytes) -> str:
        count = max(1, len(request.context))
        return "[" + ", ".join(str(30 + digest[i] % 66) for i in range(count)) + "]"

    def complete(self, request: GenerationRequest, n: int, offset: int = 0) -> Dict[str, Any]:
        texts = []
        for sample in range(offset, offset + n):
            digest = self._digest(request, sample)
            if request.kind == PromptKind.CLUSTERING_GENERATION:
                texts.append(self._clusters(request, digest))
            elif request.kind == PromptKind.SCORING:
                texts.append(self._scores(request, digest))
            else:
                texts.append(self._reformulation(request, digest))
        return _choices_payload(texts, model=self.provider_id)


class ResponseCache:
    """Content-addressed response cache: one JSON file per key, or in memory without a directory."""

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._entries: Dict[str, Dict[str, Any]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def make_key(identity: Dict[str, Any]) -> str:
        canonical = json.dumps(identity, sort_keys=True, ensure_ascii=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def get(self, key: str) -> Optional[Dict[str, Any]]:
        payload = None
        if self.cache_dir:
            path = self._path(key)
            if path.exists():
                try:
                    payload = json.loads(path.read_text(encoding="utf-8"))
                except ValueError:
                    logger.warning(f"Ignoring unreadable cache entry {path}")
        else:
            payload = self._entries.get(key)
        with self._lock:
            if payload is None:
                self.misses += 1
            else:
                self.hits += 1
        return payload

    def set(self, key: str, payload: Dict[str, Any]) -> None:
        if self.cache_dir:
            write_text_atomic(self._path(key), json.dumps(payload, sort_keys=True, ensure_ascii=False))
        else:
            with self._lock:
                self._entries[key] = payload

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / float(total) if total else 0.0


def extract_completions(payload: Any) -> List[str]:
    """Pull completion strings out of a chat-completions payload."""
    try:
        choices = payload["choices"]
        return [choice["message"]["content"] for choice in choices]
    except (KeyError, TypeError, IndexError) as e:
        raise MalformedPayloadError(f"malformed provider payload: missing {e}") from e


class LLMGateway:
    """Caching, bounded-concurrency front end to a generation provider."""

    def __init__(
        self,
        provider: GenerationProvider,
        cache: Optional[ResponseCache] = None,
        parallelism: int = 4,
        sample_mode: SampleMode = SampleMode.BATCHED,
    ):
        self.provider = provider
        self.cache = cache or ResponseCache()
        self.sample_mode = sample_mode
        self._slots = threading.BoundedSemaphore(parallelism)
        self._lock = threading.Lock()
        self.provider_calls: Counter = Counter()

    @property
    def provider_id(self) -> str:
        return self.provider.provider_id

    def _fetch(self, request: GenerationRequest) -> Dict[str, Any]:
        with self._slots:
            if self.sample_mode == SampleMode.BATCHED or request.n_samples == 1:
                payload = self.provider.complete(request, n=request.n_samples)
            else:
                choices = []
                for offset in range(request.n_samples):
                    part = self.provider.complete(request, n=1, offset=offset)
                    choices.extend(part.get("choices", []) if isinstance(part, dict) else [])
                payload = {"choices": choices}
        with self._lock:
            self.provider_calls[request.kind] += 1
        return payload

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        """
        Return `request.n_samples` completions, from cache when available.

        Args:
            request: Rendered prompt plus sampling identity

        Returns:
            GenerationResponse with cache_hit set when served from the cache
        """
        key = self.cache.make_key(request.identity(self.provider_id))
        payload = self.cache.get(key)
        cache_hit = payload is not None
        if cache_hit:
            logger.debug(f"Cache hit for {request.kind.value} ({key[:12]})")
        else:
            payload = self._fetch(request)

        completions = extract_completions(payload)
        if len(completions) != request.n_samples:
            raise ContractViolationError(
                f"provider returned {len(completions)} completions, {request.n_samples} requested"
            )
        if not all(isinstance(text, str) for text in completions):
            raise MalformedPayloadError("provider returned a non-text completion")
        if not cache_hit:
            self.cache.set(key, payload)

        return GenerationResponse(
            completions=tuple(completions),
            metadata={"provider_id": self.provider_id, "sample_mode": self.sample_mode.value, "cache_key": key},
            cache_hit=cache_hit,
        )

    def generate_parsed(
        self,
        request: GenerationRequest,
        parse: Callable[[str], ParsedT],
        retries: int = 2,
    ) -> ParsedT:
        """Generate one completion and parse it, re-generating up to `retries` times on parse failure."""
        last_error: Optional[ParseError] = None
        for attempt in range(retries + 1):
            response = self.generate(request.model_copy(update={"attempt": attempt, "n_samples": 1}))
            try:
                return parse(response.completions[0])
            except ParseError as e:
                last_error = e
                logger.warning(f"{request.kind.value} output unparseable (attempt {attempt + 1}/{retries + 1}): {e.detail}")
        raise last_error


def create_generation_provider(
    role: str,
    cfg: PipelineConfig,
    settings: Settings,
) -> GenerationProvider:
    """Build the provider configured for `role` ("generation" or "judge")."""
    kind = cfg.providers.generation if role == "generation" else cfg.providers.judge
    if kind == "mock":
        return MockGenerationProvider(seed=cfg.seed)
    if kind == "replay":
        fixture = cfg.providers.generation_fixture if role == "generation" else cfg.providers.judge_fixture
        return ReplayFixtureProvider(Path(fixture))
    if role == "generation":
        return HTTPChatProvider(
            settings.llm_base_url, settings.llm_model, settings.llm_api_key,
            timeout=settings.request_timeout, max_retries=settings.max_transport_retries,
        )
    return HTTPChatProvider(
        settings.judge_base_url, settings.judge_model, settings.judge_api_key,
        timeout=settings.request_timeout, max_retries=settings.max_transport_retries,
    )


def create_gateway(
    role: str,
    cfg: PipelineConfig,
    settings: Settings,
    cache_dir: Optional[Path] = None,
) -> LLMGateway:
    provider = create_generation_provider(role, cfg, settings)
    cache = ResponseCache(Path(cache_dir) / "llm" if cache_dir else None)
    logger.info(f"Using {role} provider {provider.provider_id}")
    return LLMGateway(provider, cache, parallelism=cfg.parallelism, sample_mode=cfg.providers.sample_mode)
