import pandas as pd
import pytest

from app.core.config import validate_config
from app.core.exceptions import ConfigError, QermError
from app.db.artifacts import artifact_path
from app.schemas.schemas import AggregationStrategy, PromptKind
from app.tasks.tasks import ablate, ablation_configs, qerm_build_dataset, qerm_train


def test_w0_sweep_uses_the_default_grid(demo_context, tmp_path):
    rows, failed = ablate(demo_context, "w0", tmp_path)
    assert failed == {}
    assert [row.setting for row in rows] == ["0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"]
    assert all(row.queries == 3 and 0.0 <= row.mean_ndcg <= 1.0 for row in rows)
    frame = pd.read_csv(artifact_path(tmp_path, "ablation"))
    assert list(frame.columns) == ["kind", "setting", "mean_ndcg", "queries", "combinations"]
    assert len(frame) == 7


def test_prompt_counts_average_over_combinations(demo_context, tmp_path):
    rows, _ = ablate(demo_context, "prompts", tmp_path, grid=[1, 2, 4])
    assert [row.combinations for row in rows] == [4, 6, 1]


def test_threshold_sweeps_force_their_strategy():
    base = validate_config({"aggregation_strategy": "fw"})
    (sim,) = ablation_configs("sim_threshold", 0.25, base)
    (score,) = ablation_configs("score_threshold", 40, base)
    assert sim.aggregation_strategy == AggregationStrategy.SIMDW and sim.sim_threshold == 0.25
    assert score.aggregation_strategy == AggregationStrategy.SCOREDW and score.score_threshold == 40.0


def test_prompt_combinations():
    configs = ablation_configs("prompts", 3, validate_config({}))
    assert len(configs) == 4
    assert all(len(cfg.prompt_kinds) == 3 for cfg in configs)
    assert all(PromptKind.SCORING not in cfg.prompt_kinds for cfg in configs)
    with pytest.raises(ConfigError):
        ablation_configs("prompts", 5, validate_config({}))


def test_score_threshold_sweep(demo_context, tmp_path):
    rows, failed = ablate(demo_context, "score_threshold", tmp_path, grid=[40, 70])
    assert failed == {}
    assert [row.setting for row in rows] == ["40", "70"]


def test_invalid_sweeps(demo_context, tmp_path):
    with pytest.raises(ConfigError):
        ablate(demo_context, "w0", tmp_path, grid=[])
    with pytest.raises(ConfigError):
        ablate(demo_context, "temperature", tmp_path)
    with pytest.raises(ConfigError):
        ablate(demo_context, "w0", tmp_path, grid=[1.5])
    with pytest.raises(QermError):
        ablate(demo_context, "iterations", tmp_path)
    assert sum(demo_context.gateway.provider_calls.values()) == 0


def test_iteration_sweep_with_a_trained_model(demo_context, tmp_path):
    training_path, _ = qerm_build_dataset(demo_context, tmp_path)
    model_path = qerm_train(training_path, demo_context.cfg, tmp_path / "model.json")
    rows, failed = ablate(demo_context, "iterations", tmp_path / "sweep", grid=[1, 2], qerm_model_path=model_path)
    assert failed == {}
    assert [row.setting for row in rows] == ["1", "2"]
