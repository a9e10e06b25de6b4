"""
End-to-end pipeline runs on offline datasets.
"""
import math

import pytest

from app.core.config import validate_config, with_overrides
from app.core.exceptions import ContractViolationError, IngestError, QermError, ReformulationError, StageError
from app.db.artifacts import artifact_path, iter_jsonl, read_json
from app.schemas.schemas import AggregationStrategy, BaselineMethod, PromptKind, Query
from app.services.llm_client import create_gateway
from app.services.prompts import fusion_variants
from app.tasks.tasks import (
    build_context,
    compare_runs,
    export_finetune_pairs,
    load_demonstrations,
    qerm_build_dataset,
    qerm_train,
    run_baseline,
    run_pipeline,
    run_queries,
    stage_aggregate,
    stage_cluster,
    stage_evaluate,
    stage_generate,
    stage_retrieve,
    stage_score,
    write_cluster_stats,
)


def ranked_ids(output_dir):
    return [line.split()[2] for line in artifact_path(output_dir, "run").read_text().splitlines()]


def top_docs(output_dir):
    top = {}
    for line in artifact_path(output_dir, "run").read_text().splitlines():
        query_id, _, doc_id, rank = line.split()[:4]
        if rank == "1":
            top[query_id] = doc_id
    return top


# Top-1 runs over tests/fixtures/audited, so nDCG@10 is grade(top) / IDCG.
# q1 judges d2=2, d1=1: IDCG = 2 + 1/log2(3), d2 -> 0.760188, d1 -> 0.380094.
# q2 judges d3=1 only. q3 judges d6=1, d9=1: IDCG = 1 + 1/log2(3), d6 -> 0.613147.
AUDITED_RUNS = [
    ("fw", {"q1": "d1", "q2": "d3", "q3": "d5"}, {"q1": 0.380094, "q2": 1.0, "q3": 0.0}, 0.460031),
    ("simdw", {"q1": "d1", "q2": "d3", "q3": "d5"}, {"q1": 0.380094, "q2": 1.0, "q3": 0.0}, 0.460031),
    ("scoredw", {"q1": "d2", "q2": "d3", "q3": "d5"}, {"q1": 0.760188, "q2": 1.0, "q3": 0.0}, 0.586729),
    ("dc", {"q1": "d2", "q2": "d4", "q3": "d6"}, {"q1": 0.760188, "q2": 0.0, "q3": 0.613147}, 0.457778),
]


@pytest.mark.parametrize("strategy, expected_top, expected_ndcg, expected_mean", AUDITED_RUNS)
def test_replayed_runs_match_the_audited_ndcg(
    audited_dataset, audited_config, tmp_path, strategy, expected_top, expected_ndcg, expected_mean
):
    context = build_context(audited_config(strategy), audited_dataset)
    report, manifest = run_pipeline(context, tmp_path / strategy)

    assert manifest.failure_count == 0
    assert top_docs(tmp_path / strategy) == expected_top
    assert report.per_query == pytest.approx(expected_ndcg, abs=1e-6)
    assert report.mean == pytest.approx(expected_mean, abs=1e-6)

    run_pipeline(build_context(audited_config(strategy), audited_dataset), tmp_path / "rerun")
    assert artifact_path(tmp_path / "rerun", "run").read_bytes() == artifact_path(tmp_path / strategy, "run").read_bytes()


def test_audited_oracle_values():
    idcg_q1 = 2 + 1 / math.log2(3)
    idcg_q3 = 1 + 1 / math.log2(3)
    assert 1 / idcg_q1 == pytest.approx(0.380094, abs=1e-6)
    assert 2 / idcg_q1 == pytest.approx(0.760188, abs=1e-6)
    assert 1 / idcg_q3 == pytest.approx(0.613147, abs=1e-6)


class TestHandComputedRuns:
    def test_simdw(self, hand_dataset, hand_config, tmp_path):
        context = build_context(hand_config(), hand_dataset)
        report, manifest = run_pipeline(context, tmp_path / "out", explain=True)

        assert ranked_ids(tmp_path / "out") == ["d1", "d3", "d2"]
        assert report.per_query["q1"] == pytest.approx(1 / math.log2(3))
        assert manifest.failure_count == 0
        (explain,) = list(iter_jsonl(artifact_path(tmp_path / "out", "explain")))
        entries = explain["bundle"]["entries"]
        assert [(e["text"], e["included"], e["reason"]) for e in entries] == [
            ("c1", True, "passed"), ("c2", False, "below_threshold"),
        ]
        assert "embedding" not in entries[0]

    def test_scoredw(self, hand_dataset, hand_config, tmp_path):
        context = build_context(hand_config(aggregation_strategy="scoredw"), hand_dataset)
        report, _ = run_pipeline(context, tmp_path / "out")
        assert ranked_ids(tmp_path / "out") == ["d3", "d1", "d2"]
        assert report.per_query["q1"] == pytest.approx(1.0)
        (row,) = list(iter_jsonl(artifact_path(tmp_path / "out", "scores")))
        assert row["scores"]["scores"] == [80.0, 30.0]

    def test_dc_makes_no_scoring_calls(self, hand_dataset, hand_config, tmp_path):
        context = build_context(hand_config(aggregation_strategy="dc"), hand_dataset)
        report, _ = run_pipeline(context, tmp_path / "out")
        assert ranked_ids(tmp_path / "out") == ["d2", "d3", "d1"]
        assert report.per_query["q1"] == pytest.approx(1 / math.log2(3))
        assert context.gateway.provider_calls[PromptKind.SCORING] == 0
        (row,) = list(iter_jsonl(artifact_path(tmp_path / "out", "aggregated")))
        assert row["aggregated"]["fused_text"] == "alpha [SEP] c1 [SEP] c2 [SEP]"

    def test_generated_artifact(self, hand_dataset, hand_config, tmp_path):
        run_pipeline(build_context(hand_config(), hand_dataset), tmp_path / "out")
        rows = list(iter_jsonl(artifact_path(tmp_path / "out", "generated")))
        assert [(r["text"], r["generation_index"]) for r in rows] == [("alpha one", 0), ("alpha two", 1)]


class TestDemoRuns:
    def test_reruns_are_byte_identical(self, demo_dataset, tmp_path):
        outputs = []
        for parallelism in (1, 4):
            cfg = validate_config({"parallelism": parallelism})
            output_dir = tmp_path / f"run{parallelism}"
            run_pipeline(build_context(cfg, demo_dataset), output_dir)
            outputs.append(output_dir)
        for name in ("run", "metrics", "clusters", "aggregated"):
            assert artifact_path(outputs[0], name).read_bytes() == artifact_path(outputs[1], name).read_bytes()

    def test_cached_rerun_calls_no_provider(self, demo_dataset, tmp_path):
        cfg = validate_config({})
        run_pipeline(build_context(cfg, demo_dataset, cache_dir=tmp_path / "cache"), tmp_path / "a")
        context = build_context(cfg, demo_dataset, cache_dir=tmp_path / "cache")
        run_pipeline(context, tmp_path / "b")
        assert sum(context.gateway.provider_calls.values()) == 0
        assert context.gateway.cache.hit_rate() == 1.0
        assert artifact_path(tmp_path / "a", "run").read_bytes() == artifact_path(tmp_path / "b", "run").read_bytes()

    @pytest.mark.parametrize("strategy", [s.value for s in AggregationStrategy])
    def test_every_strategy_runs(self, demo_dataset, tmp_path, strategy):
        context = build_context(validate_config({"aggregation_strategy": strategy}), demo_dataset)
        report, manifest = run_pipeline(context, tmp_path / "out")
        assert report.run_tag == strategy
        assert set(report.per_query) == {"q1", "q2", "q3"}
        assert all(0.0 <= value <= 1.0 for value in report.per_query.values())
        assert manifest.query_count == 3
        assert read_json(artifact_path(tmp_path / "out", "manifest"))["config"]["aggregation_strategy"] == strategy

    def test_scoring_calls_only_for_scoredw(self, demo_context, tmp_path):
        run_pipeline(demo_context, tmp_path / "simdw")
        assert demo_context.gateway.provider_calls[PromptKind.SCORING] == 0
        run_pipeline(demo_context, tmp_path / "scoredw", cfg=with_overrides(demo_context.cfg, aggregation_strategy="scoredw"))
        assert demo_context.gateway.provider_calls[PromptKind.SCORING] == 3

    def test_failed_queries_do_not_stop_the_run(self, demo_context, tmp_path):
        pipeline = demo_context.pipeline()
        real_cluster = pipeline.cluster

        def cluster(q, generated, iteration=0):
            if q.id == "q2":
                raise ValueError("model returned nothing usable")
            return real_cluster(q, generated, iteration)

        pipeline.cluster = cluster
        demo_context.pipeline = lambda cfg=None: pipeline
        report, manifest = run_pipeline(demo_context, tmp_path / "out")
        assert manifest.failure_count == 1
        assert report.failed_queries == ["q2"]
        assert set(report.per_query) == {"q1", "q3"}
        (failure,) = list(iter_jsonl(artifact_path(tmp_path / "out", "failures")))
        assert failure["query_id"] == "q2"
        assert failure["stage"] == "cluster"

    def test_stage_commands_reproduce_the_full_run(self, demo_context, tmp_path):
        run_pipeline(demo_context, tmp_path / "full")
        staged = tmp_path / "staged"
        stage_generate(demo_context, staged)
        stage_cluster(demo_context, staged)
        stage_aggregate(demo_context, staged, explain=True)
        stage_retrieve(demo_context, staged)
        assert artifact_path(staged, "run").read_bytes() == artifact_path(tmp_path / "full", "run").read_bytes()
        assert artifact_path(staged, "explain").exists()
        report = stage_evaluate(artifact_path(staged, "run"), demo_context.qrels, demo_context.cfg, staged)
        assert report.mean == pytest.approx(read_json(artifact_path(tmp_path / "full", "metrics"))["mean"])

    def test_stage_score_writes_one_row_per_cluster_set(self, demo_context, tmp_path):
        stage_generate(demo_context, tmp_path)
        stage_cluster(demo_context, tmp_path)
        stage_score(demo_context, tmp_path)
        clusters = {r["query_id"]: r["cluster_set"]["clusters"] for r in iter_jsonl(artifact_path(tmp_path, "clusters"))}
        for row in iter_jsonl(artifact_path(tmp_path, "scores")):
            assert len(row["scores"]["scores"]) == len(clusters[row["query_id"]])


class TestFeedbackLoopRuns:
    def test_qerm_without_a_model_fails_before_any_provider_call(self, demo_context, tmp_path):
        with pytest.raises(QermError):
            run_pipeline(demo_context, tmp_path / "out", use_qerm=True)
        assert sum(demo_context.gateway.provider_calls.values()) == 0

    def test_train_then_loop(self, demo_context, tmp_path):
        training_path, skipped = qerm_build_dataset(demo_context, tmp_path)
        assert skipped == {}
        rows = list(iter_jsonl(training_path))
        assert len(rows) == 3
        assert all(len(row["features"]) == 3 * 64 + 2 for row in rows)
        assert all(row["label"] == int(row["ndcg"] >= demo_context.cfg.ndcg_label_threshold) for row in rows)

        model_path = qerm_train(training_path, demo_context.cfg, tmp_path / "qerm_model.json")
        report, manifest = run_pipeline(demo_context, tmp_path / "loop", use_qerm=True, qerm_model_path=model_path)

        assert report.run_tag == "simdw-qerm"
        assert "qerm_epsilon" in manifest.config
        loops = list(iter_jsonl(artifact_path(tmp_path / "loop", "loop")))
        assert len(loops) == 3
        for loop in loops:
            assert loop["terminal"] in ("accept", "exhausted")
            assert loop["t"] <= demo_context.cfg.max_iterations
            assert len(loop["history"]) == loop["t"] + 1


class TestBaselinesAndComparisons:
    def test_genqr_ensemble_issues_one_call_per_instruction(self, demo_context, tmp_path):
        report = run_baseline(demo_context, BaselineMethod.GENQR_ENSEMBLE, tmp_path)
        assert report.run_tag == "baseline-genqre"
        assert demo_context.gateway.provider_calls[PromptKind.GENQR_ENSEMBLE] == 30
        assert demo_context.gateway.provider_calls[PromptKind.CLUSTERING_GENERATION] == 0
        (row,) = [r for r in iter_jsonl(artifact_path(tmp_path, "aggregated")) if r["query_id"] == "q1"]
        assert row["aggregated"]["fused_text"].count("[SEP]") == 11

    def test_genqr_fusion_weights_three_seeded_keyword_sets(self, demo_context, tmp_path):
        report = run_baseline(demo_context, BaselineMethod.GENQR_FUSION, tmp_path)
        assert report.run_tag == "baseline-genqrf"
        assert set(report.per_query) == {"q1", "q2", "q3"}
        assert demo_context.gateway.provider_calls[PromptKind.GENQR_ENSEMBLE] == 9
        generated = [row for row in iter_jsonl(artifact_path(tmp_path, "generated")) if row["query_id"] == "q1"]
        assert [row["generation_index"] for row in generated] == list(fusion_variants(demo_context.cfg.seed))
        for row in iter_jsonl(artifact_path(tmp_path, "aggregated")):
            aggregated = row["aggregated"]
            assert aggregated["strategy"] == "fw"
            assert aggregated.get("fused_text") is None
            assert aggregated["bundle"]["w0"] == pytest.approx(0.7)
            assert [entry["weight"] for entry in aggregated["bundle"]["entries"]] == pytest.approx([0.1] * 3)

    def test_demonstrations_reach_the_query2doc_prompt(self, demo_context, tmp_path, monkeypatch):
        prompts = []
        generate = demo_context.gateway.generate

        def recording_generate(request):
            prompts.append(request.prompt)
            return generate(request)

        monkeypatch.setattr(demo_context.gateway, "generate", recording_generate)
        path = tmp_path / "shots.jsonl"
        path.write_text('{"query": "what is rain", "answer": "Rain is water falling from clouds."}\n')
        run_baseline(demo_context, BaselineMethod.QUERY2DOC, tmp_path / "out", load_demonstrations(path))
        assert len(prompts) == 3
        assert all("Query: what is rain\nPassage: Rain is water falling from clouds." in p for p in prompts)

    def test_invalid_demonstrations(self, tmp_path):
        with pytest.raises(IngestError):
            load_demonstrations(tmp_path / "absent.jsonl")
        path = tmp_path / "shots.jsonl"
        path.write_text('{"query": "what is rain"}\n')
        with pytest.raises(IngestError):
            load_demonstrations(path)

    def test_compare_runs(self, demo_context, tmp_path):
        run_baseline(demo_context, BaselineMethod.QUERY2DOC, tmp_path / "q2d")
        run_pipeline(demo_context, tmp_path / "simdw")
        run_pipeline(demo_context, tmp_path / "dc", cfg=with_overrides(demo_context.cfg, aggregation_strategy="dc"))
        results = compare_runs(
            artifact_path(tmp_path / "q2d", "run"),
            [artifact_path(tmp_path / "simdw", "run"), artifact_path(tmp_path / "dc", "run")],
            demo_context.qrels,
            demo_context.cfg,
            tmp_path / "compare",
        )
        assert [r.system for r in results] == ["simdw", "dc"]
        assert all(r.n == 3 for r in results)
        summary = read_json(artifact_path(tmp_path / "compare", "comparison"))
        assert summary["baseline"] == "baseline-q2d"
        header = artifact_path(tmp_path / "compare", "comparison_csv").read_text().splitlines()[0]
        assert header == "query_id,baseline-q2d,simdw,dc"

    def test_export_finetune_pairs(self, demo_context, tmp_path):
        judge = create_gateway("judge", demo_context.cfg, demo_context.settings)
        pairs, skipped = export_finetune_pairs(demo_context, judge, tmp_path)
        assert len(pairs) == 3 * 3 * 2
        assert skipped == []
        assert all(1.0 <= pair.score <= 100.0 for pair in pairs)
        assert judge.provider_calls[PromptKind.SCORING] == len({(p.query_id, p.q_ref) for p in pairs})
        assert len(list(iter_jsonl(artifact_path(tmp_path, "finetune")))) == len(pairs)

    def test_cluster_stats(self, demo_context, tmp_path):
        run_pipeline(demo_context, tmp_path)
        write_cluster_stats(demo_context, artifact_path(tmp_path, "clusters"), tmp_path)
        summary = read_json(artifact_path(tmp_path, "cluster_stats"))
        assert summary["total_sets"] == 3
        assert sum(summary["count_distribution"].values()) == pytest.approx(1.0)


def test_process_without_an_index_stops_after_aggregation(demo_context):
    pipeline = demo_context.pipeline()
    pipeline.index = None
    outcome = pipeline.process(Query(id="q1", text="does vitamin d help bones"))
    assert outcome.ranked == ()
    assert outcome.aggregated is not None


def test_stage_errors_name_the_stage(demo_context):
    pipeline = demo_context.pipeline()

    def broken_scores(q, clusters, iteration=0):
        raise ValueError("no list in output")

    pipeline.score = broken_scores
    pipeline.cfg = with_overrides(pipeline.cfg, aggregation_strategy="scoredw")
    with pytest.raises(StageError) as excinfo:
        pipeline.process(Query(id="q1", text="does vitamin d help bones"))
    assert excinfo.value.stage == "score"
    assert excinfo.value.query_id == "q1"


class CountingScorer:
    def __init__(self, logit):
        self.logit = logit
        self.calls = []

    def score(self, q_init, clusters):
        self.calls.append((q_init.id, clusters.source_iteration))
        return self.logit


def test_first_pass_logits_are_scored_once(demo_context):
    scorer = CountingScorer(0.5)
    outcomes, failures, epsilon = run_queries(demo_context, demo_context.cfg, scorer)
    assert epsilon == pytest.approx(0.5)
    assert failures == []
    assert all(outcome.loop.terminal == "accept" for outcome in outcomes)
    assert sorted(scorer.calls) == [("q1", 0), ("q2", 0), ("q3", 0)]


class TestGenerationBounds:
    QUERY = Query(id="q1", text="does vitamin d help bones")

    def test_iteration_beyond_the_budget_is_rejected(self, demo_context):
        pipeline = demo_context.pipeline()
        with pytest.raises(ReformulationError):
            pipeline.generate_queries(self.QUERY, iteration=demo_context.cfg.max_iterations + 1)
        with pytest.raises(StageError) as excinfo:
            pipeline.process(self.QUERY, iteration=-1)
        assert excinfo.value.stage == "generate"

    def test_last_iteration_is_allowed(self, demo_context):
        generated = demo_context.pipeline().generate_queries(self.QUERY, iteration=demo_context.cfg.max_iterations)
        assert all(item.iteration == demo_context.cfg.max_iterations for item in generated)
        assert all(item.generation_index < demo_context.cfg.n_per_prompt for item in generated)

    def test_completion_count_must_match_n(self, demo_context, monkeypatch):
        pipeline = demo_context.pipeline()
        monkeypatch.setattr(pipeline, "_completions", lambda request: ["a", "b", "c"])
        with pytest.raises(ContractViolationError):
            pipeline.generate_queries(self.QUERY)
