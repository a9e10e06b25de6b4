"""
Embedding providers, a content-addressed embedding cache and cosine similarity.
"""
import hashlib
import json
import logging
import re
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import httpx
import numpy as np
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential, wait_none

from app.core.config import PipelineConfig, Settings
from app.core.exceptions import (
    DimensionMismatchError,
    EmbeddingError,
    MalformedPayloadError,
    ProviderError,
    TransportError,
    ZeroVectorError,
)
from app.db.artifacts import iter_jsonl, write_text_atomic
from app.schemas.schemas import EmbeddingVector
from app.services.llm_client import is_transient_http_error

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


class EmbeddingProvider(ABC):
    """Maps texts to fixed-dimension vectors."""

    @property
    @abstractmethod
    def provider_id(self) -> str:
        ...

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @abstractmethod
    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        """Return a (len(texts), dim) array."""


class MockEmbedder(EmbeddingProvider):
    """
    Deterministic offline embedder.

    Every lower-cased token is hashed into a seed for a standard-normal vector;
    the token vectors are summed and L2-normalized. Texts sharing tokens get
    correlated vectors, which gives the similarity filters real geometry.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise EmbeddingError(f"embedding dim must be positive, got {dim}")
        self._dim = dim
        self.seed = seed

    @property
    def provider_id(self) -> str:
        return f"mock-embed:dim={self._dim}:seed={self.seed}"

    @property
    def dim(self) -> int:
        return self._dim

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8", "surrogatepass")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self._dim)

    def embed_one(self, text: str) -> np.ndarray:
        tokens = _TOKEN_RE.findall(text.lower()) or [text]
        vector = np.sum([self._token_vector(token) for token in tokens], axis=0)
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            vector = self._token_vector(f"\x00{text}")
            norm = np.linalg.norm(vector)
        return vector / norm

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.vstack([self.embed_one(text) for text in texts])


class LookupEmbeddingProvider(EmbeddingProvider):
    """Serves vectors recorded offline in a {text, vector} JSONL file."""

    def __init__(self, lookup_path: Path):
        self.lookup_path = Path(lookup_path)
        if not self.lookup_path.exists():
            raise EmbeddingError(f"embedding lookup file not found: {self.lookup_path}")
        self._digest = hashlib.sha256(self.lookup_path.read_bytes()).hexdigest()[:12]
        self._vectors: Dict[str, np.ndarray] = {}
        dims = set()
        for row in iter_jsonl(self.lookup_path):
            vector = np.asarray(row["vector"], dtype=np.float64)
            dims.add(vector.shape[0])
            self._vectors[str(row["text"])] = vector
        if not self._vectors:
            raise EmbeddingError(f"embedding lookup file {self.lookup_path} is empty")
        if len(dims) != 1:
            raise DimensionMismatchError(f"embedding lookup file mixes dims {sorted(dims)}")
        self._dim = dims.pop()
        logger.info(f"Loaded {len(self._vectors)} lookup embeddings (dim {self._dim})")

    @property
    def provider_id(self) -> str:
        return f"lookup:{self.lookup_path.name}:{self._digest}"

    @property
    def dim(self) -> int:
        return self._dim

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        missing = [text for text in texts if text not in self._vectors]
        if missing:
            raise ProviderError(f"no recorded embedding for {missing[0]!r} ({len(missing)} missing)")
        return np.vstack([self._vectors[text] for text in texts])


class HTTPEmbeddingProvider(EmbeddingProvider):
    """OpenAI-compatible /embeddings client."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str = "",
        dim: Optional[int] = None,
        timeout: float = 60.0,
        max_retries: int = 3,
        retry_wait: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.base_url = base_url.rstrip("/")
        self.model = model
        self._dim = dim
        self.max_retries = max_retries
        self.retry_wait = retry_wait
        self.client = httpx.Client(base_url=self.base_url, headers=headers, timeout=timeout, transport=transport)

    @property
    def provider_id(self) -> str:
        return f"http-embed:{self.model}@{self.base_url}"

    @property
    def dim(self) -> int:
        if self._dim is None:
            self._dim = int(self.embed_texts(["dimension check"]).shape[1])
        return self._dim

    def _post(self, body: Dict[str, Any]) -> Dict[str, Any]:
        retrying = Retrying(
            stop=stop_after_attempt(self.max_retries + 1),
            wait=wait_exponential(multiplier=self.retry_wait, max=30) if self.retry_wait > 0 else wait_none(),
            retry=retry_if_exception(is_transient_http_error),
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    response = self.client.post("/embeddings", json=body)
                    response.raise_for_status()
        except httpx.TransportError as e:
            raise TransportError(f"embedding request failed after {self.max_retries} retries: {e}") from e
        except httpx.HTTPStatusError as e:
            if is_transient_http_error(e):
                raise TransportError(f"embedding request failed after {self.max_retries} retries: {e}") from e
            raise ProviderError(f"embedding request rejected: HTTP {e.response.status_code}") from e
        try:
            return response.json()
        except ValueError as e:
            raise MalformedPayloadError(f"embedding provider returned non-JSON body: {e}") from e

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        payload = self._post({"model": self.model, "input": list(texts)})
        try:
            rows = sorted(payload["data"], key=lambda item: item.get("index", 0))
            matrix = np.asarray([row["embedding"] for row in rows], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedPayloadError(f"malformed embedding payload: {e}") from e
        if matrix.ndim != 2 or matrix.shape[0] != len(texts):
            raise MalformedPayloadError(f"expected {len(texts)} embeddings, got shape {matrix.shape}")
        return matrix


class EmbeddingCache:
    """Content-addressed vector cache keyed by (provider id, text hash)."""

    def __init__(self, cache_dir: Optional[Path] = None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._entries: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def make_key(provider_id: str, text: str) -> str:
        text_hash = hashlib.sha256(text.encode("utf-8", "surrogatepass")).hexdigest()
        return hashlib.sha256(f"{provider_id}\n{text_hash}".encode("utf-8")).hexdigest()

    def get(self, key: str) -> Optional[np.ndarray]:
        with self._lock:
            vector = self._entries.get(key)
        if vector is None and self.cache_dir:
            path = self.cache_dir / f"{key}.json"
            if path.exists():
                vector = np.asarray(json.loads(path.read_text(encoding="utf-8")), dtype=np.float64)
                with self._lock:
                    self._entries[key] = vector
        with self._lock:
            if vector is None:
                self.misses += 1
            else:
                self.hits += 1
        return vector

    def set(self, key: str, vector: np.ndarray) -> None:
        with self._lock:
            self._entries[key] = vector
        if self.cache_dir:
            write_text_atomic(self.cache_dir / f"{key}.json", json.dumps([float(v) for v in vector]))


def embed(
    texts: Sequence[str],
    provider: EmbeddingProvider,
    cache: Optional[EmbeddingCache] = None,
    expected_dim: Optional[int] = None,
) -> List[EmbeddingVector]:
    """
    Embed texts, serving repeated texts from the cache.

    Args:
        texts: Non-empty list of texts
        provider: Embedding provider
        cache: Optional cache shared across calls
        expected_dim: Dimension established for the run, if any

    Returns:
        One EmbeddingVector per text, in input order
    """
    if not texts:
        raise EmbeddingError("cannot embed an empty text list")
    cache = cache if cache is not None else EmbeddingCache()

    vectors: Dict[str, np.ndarray] = {}
    missing: List[str] = []
    for text in dict.fromkeys(texts):
        cached = cache.get(cache.make_key(provider.provider_id, text))
        if cached is None:
            missing.append(text)
        else:
            vectors[text] = cached
    if missing:
        matrix = np.asarray(provider.embed_texts(missing), dtype=np.float64)
        for text, row in zip(missing, matrix):
            vectors[text] = row
            cache.set(cache.make_key(provider.provider_id, text), row)

    dims = {vector.shape[0] for vector in vectors.values()}
    if len(dims) != 1:
        raise DimensionMismatchError(f"provider returned mixed dims {sorted(dims)}")
    dim = dims.pop()
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"embedding dim {dim} does not match the run's dim {expected_dim}")

    result = []
    for text in texts:
        vector = vectors[text]
        if not np.all(np.isfinite(vector)):
            raise EmbeddingError(f"provider returned non-finite values for {text!r}")
        normalized = bool(abs(np.linalg.norm(vector) - 1.0) < 1e-6)
        result.append(EmbeddingVector.from_array(vector, normalized=normalized))
    return result


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity, clamped to [-1, 1]."""
    if a.dim != b.dim:
        raise DimensionMismatchError(f"cannot compare vectors of dims {a.dim} and {b.dim}")
    x, y = a.array, b.array
    norm_x, norm_y = np.linalg.norm(x), np.linalg.norm(y)
    if norm_x == 0.0 or norm_y == 0.0:
        raise ZeroVectorError("cosine is undefined for a zero vector")
    return float(np.clip(np.dot(x, y) / (norm_x * norm_y), -1.0, 1.0))


def create_embedding_provider(cfg: PipelineConfig, settings: Settings) -> EmbeddingProvider:
    kind = cfg.providers.embedding
    if kind == "mock":
        return MockEmbedder(dim=cfg.providers.mock_dim, seed=cfg.seed)
    if kind == "lookup":
        return LookupEmbeddingProvider(Path(cfg.providers.embedding_lookup))
    return HTTPEmbeddingProvider(
        settings.embedding_base_url, settings.embedding_model, settings.embedding_api_key,
        timeout=settings.request_timeout, max_retries=settings.max_transport_retries,
    )


def create_embedding_cache(cache_dir: Optional[Path] = None) -> EmbeddingCache:
    return EmbeddingCache(Path(cache_dir) / "embeddings" if cache_dir else None)
