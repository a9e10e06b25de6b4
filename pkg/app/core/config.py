"""
Configuration for the query reformulation pipeline.

Two layers: `Settings` carries provider endpoints, credentials and logging and
may be overridden from the environment; `PipelineConfig` carries every
pipeline hyperparameter and is read from a YAML file only.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings

from app.core.exceptions import ConfigError
from app.schemas.schemas import (
    DEFAULT_PROMPT_KINDS,
    REFORMULATION_KINDS,
    AggregationStrategy,
    GainType,
    PromptKind,
    SampleMode,
    SamplingParams,
    ScoreFunction,
)

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Provider endpoints and logging, loaded from environment variables."""

    # Generation provider (chat-completions compatible)
    llm_base_url: str = "http://localhost:8000/v1"
    llm_api_key: str = ""
    llm_model: str = "mistralai/Mistral-7B-Instruct-v0.3"

    # Judge provider used for fine-tuning pair export
    judge_base_url: str = "https://api.openai.com/v1"
    judge_api_key: str = ""
    judge_model: str = "gpt-4o"

    # Embedding provider (OpenAI-compatible /embeddings)
    embedding_base_url: str = "http://localhost:8001/v1"
    embedding_api_key: str = ""
    embedding_model: str = "sentence-transformers/all-mpnet-base-v2"

    # External reward classifier
    reward_model_url: str = "http://localhost:8002/score"

    # Transport
    request_timeout: float = 60.0
    max_transport_retries: int = 3

    # Logging
    log_level: str = "INFO"
    log_file: Optional[str] = None

    class Config:
        env_file = ".env"
        case_sensitive = False
        extra = "ignore"


settings = Settings()


class ProviderConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    generation: Literal["mock", "replay", "http"] = "mock"
    judge: Literal["mock", "replay", "http"] = "mock"
    embedding: Literal["mock", "lookup", "http"] = "mock"
    generation_fixture: Optional[str] = None
    judge_fixture: Optional[str] = None
    embedding_lookup: Optional[str] = None
    mock_dim: int = Field(default=64, ge=2, le=4096)
    sample_mode: SampleMode = SampleMode.BATCHED

    @model_validator(mode="after")
    def _fixtures_present(self) -> "ProviderConfig":
        if self.generation == "replay" and not self.generation_fixture:
            raise ValueError("generation_fixture is required when generation provider is 'replay'")
        if self.judge == "replay" and not self.judge_fixture:
            raise ValueError("judge_fixture is required when judge provider is 'replay'")
        if self.embedding == "lookup" and not self.embedding_lookup:
            raise ValueError("embedding_lookup is required when embedding provider is 'lookup'")
        return self


class QermTrainingConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=500, ge=1)
    learning_rate: float = Field(default=0.1, gt=0.0)
    l2: float = Field(default=0.0, ge=0.0)
    init_scale: float = Field(default=0.0, ge=0.0)


class PipelineConfig(BaseModel):
    """All pipeline hyperparameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    w0: float = Field(default=0.7, ge=0.0, le=1.0)
    sim_threshold: float = Field(default=0.2, ge=-1.0, le=1.0)
    score_threshold: float = Field(default=60.0, ge=1.0, le=100.0)
    n_per_prompt: int = Field(default=2, ge=1)
    max_iterations: int = Field(default=2, ge=0)
    # Label threshold for reward-model training; see DESIGN.md.
    ndcg_label_threshold: float = Field(default=0.3, ge=0.0, le=1.0)
    prompt_kinds: Tuple[PromptKind, ...] = DEFAULT_PROMPT_KINDS
    aggregation_strategy: AggregationStrategy = AggregationStrategy.SIMDW
    sampling: SamplingParams = SamplingParams()
    top_k: int = Field(default=100, ge=1)
    ndcg_k: int = Field(default=10, ge=1)
    gain: GainType = GainType.LINEAR
    score_fn: ScoreFunction = ScoreFunction.COSINE
    seed: int = 0
    parallelism: int = Field(default=4, ge=1, le=64)
    parse_retries: int = Field(default=2, ge=0, le=5)
    providers: ProviderConfig = ProviderConfig()
    qerm: QermTrainingConfig = QermTrainingConfig()

    @field_validator("prompt_kinds")
    @classmethod
    def _reformulation_prompts_only(cls, value: Tuple[PromptKind, ...]) -> Tuple[PromptKind, ...]:
        if not value:
            raise ValueError("at least one prompt kind is required")
        if len(set(value)) != len(value):
            raise ValueError("prompt kinds must not repeat")
        for kind in value:
            if kind not in REFORMULATION_KINDS:
                raise ValueError(f"{kind.value} is not a reformulation prompt")
        return value


_INTERVALS: Dict[str, str] = {
    "w0": "[0, 1]",
    "sim_threshold": "[-1, 1]",
    "score_threshold": "[1, 100]",
    "n_per_prompt": "[1, inf)",
    "max_iterations": "[0, inf)",
    "ndcg_label_threshold": "[0, 1]",
    "top_k": "[1, inf)",
    "ndcg_k": "[1, inf)",
    "parallelism": "[1, 64]",
    "parse_retries": "[0, 5]",
    "sampling.temperature": "[0, 2]",
    "sampling.top_p": "(0, 1]",
    "providers.mock_dim": "[2, 4096]",
    "qerm.epochs": "[1, inf)",
    "qerm.learning_rate": "(0, inf)",
    "qerm.l2": "[0, inf)",
    "qerm.init_scale": "[0, inf)",
}


def _format_validation_error(error: ValidationError) -> str:
    problems = []
    for item in error.errors():
        field = ".".join(str(part) for part in item["loc"]) or "config"
        message = item["msg"]
        if item["type"] == "extra_forbidden":
            message = "unknown configuration key"
        interval = _INTERVALS.get(field)
        if interval and item["type"] in {"greater_than", "greater_than_equal", "less_than", "less_than_equal"}:
            message = f"{message}; legal interval is {interval}"
        problems.append(f"{field}: {message}")
    return "invalid configuration: " + "; ".join(problems)


def validate_config(raw: Union[PipelineConfig, Mapping[str, Any], None] = None) -> PipelineConfig:
    """
    Validate a raw configuration mapping and fill defaults.

    Args:
        raw: Parsed configuration document, an existing config or None

    Returns:
        Validated PipelineConfig
    """
    if isinstance(raw, PipelineConfig):
        raw = raw.model_dump(mode="json")
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"configuration must be a mapping, got {type(raw).__name__}")
    try:
        return PipelineConfig.model_validate(dict(raw))
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def load_config(path: Optional[Path]) -> PipelineConfig:
    """Load and validate a YAML configuration file; no path means defaults."""
    if path is None:
        logger.info("No configuration file given, using defaults")
        return validate_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"configuration file {path} is not valid YAML: {e}") from e
    logger.info(f"Loaded configuration from {path}")
    return validate_config(document)


def with_overrides(cfg: PipelineConfig, **changes: Any) -> PipelineConfig:
    """Return a re-validated copy of `cfg` with top-level fields replaced."""
    document = cfg.model_dump(mode="json")
    for key, value in changes.items():
        if value is not None:
            document[key] = value.value if hasattr(value, "value") else value
    return validate_config(document)
