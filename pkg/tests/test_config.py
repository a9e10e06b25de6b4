from pathlib import Path

import pytest

from app.core.config import load_config, validate_config, with_overrides
from app.core.exceptions import ConfigError
from app.schemas.schemas import AggregationStrategy, PromptKind, SampleMode


def test_defaults():
    cfg = validate_config({})
    assert cfg.w0 == 0.7
    assert cfg.sim_threshold == 0.2
    assert cfg.score_threshold == 60.0
    assert cfg.n_per_prompt == 2
    assert cfg.max_iterations == 2
    assert cfg.ndcg_k == 10
    assert cfg.aggregation_strategy == AggregationStrategy.SIMDW
    assert cfg.prompt_kinds == (
        PromptKind.CONTEXTUAL_EXPANSION, PromptKind.DETAIL_SPECIFIC, PromptKind.ASPECT_SPECIFIC,
    )
    assert cfg.providers.sample_mode == SampleMode.BATCHED


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="unknown configuration key"):
        validate_config({"w_zero": 0.5})


@pytest.mark.parametrize("raw, interval", [
    ({"w0": 1.5}, "[0, 1]"),
    ({"n_per_prompt": 0}, "[1, inf)"),
    ({"parallelism": 100}, "[1, 64]"),
    ({"sampling": {"temperature": 3.0}}, "[0, 2]"),
])
def test_out_of_range_values_name_the_interval(raw, interval):
    with pytest.raises(ConfigError) as excinfo:
        validate_config(raw)
    assert interval in excinfo.value.detail


def test_prompt_kinds_must_be_reformulation_prompts():
    with pytest.raises(ConfigError, match="not a reformulation prompt"):
        validate_config({"prompt_kinds": ["contextual_expansion", "scoring"]})
    with pytest.raises(ConfigError, match="must not repeat"):
        validate_config({"prompt_kinds": ["detail_specific", "detail_specific"]})


def test_replay_provider_needs_a_fixture():
    with pytest.raises(ConfigError, match="generation_fixture"):
        validate_config({"providers": {"generation": "replay"}})


def test_non_mapping_config():
    with pytest.raises(ConfigError, match="must be a mapping"):
        validate_config(["w0", 0.5])


def test_load_config_from_yaml(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("w0: 0.5\naggregation_strategy: scoredw\nsampling:\n  temperature: 0.2\n")
    cfg = load_config(path)
    assert cfg.w0 == 0.5
    assert cfg.aggregation_strategy == AggregationStrategy.SCOREDW
    assert cfg.sampling.temperature == 0.2


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")
    broken = tmp_path / "broken.yaml"
    broken.write_text("w0: [0.5\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(broken)


def test_load_config_without_path_uses_defaults():
    assert load_config(None) == validate_config({})


def test_shipped_config_matches_the_defaults():
    path = Path(__file__).resolve().parent.parent / "configs" / "default.yaml"
    assert load_config(path) == validate_config({})


def test_with_overrides_revalidates_and_skips_none():
    cfg = validate_config({"w0": 0.4})
    changed = with_overrides(cfg, aggregation_strategy=AggregationStrategy.DC, seed=None)
    assert changed.aggregation_strategy == AggregationStrategy.DC
    assert changed.w0 == 0.4
    assert changed.seed == cfg.seed
    with pytest.raises(ConfigError):
        with_overrides(cfg, w0=2.0)
