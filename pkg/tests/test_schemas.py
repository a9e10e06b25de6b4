import pytest
from pydantic import ValidationError

from app.db.artifacts import ARTIFACT_NAMES, artifact_path, read_json, read_jsonl, write_json, write_jsonl
from app.schemas.schemas import (
    AggregatedQuery,
    AggregationStrategy,
    ClusterSet,
    EmbeddingVector,
    Qrels,
    Query,
    RetrievalRun,
    ScoredDoc,
    ScoreList,
    WeightedQueryBundle,
)


class TestValidation:
    def test_queries(self):
        with pytest.raises(ValidationError):
            Query(id="", text="text")
        with pytest.raises(ValidationError):
            Query(id="q1", text="   ")

    @pytest.mark.parametrize("clusters", [(), ("a", "b", "c", "d"), ("a", " ")])
    def test_cluster_sets(self, clusters):
        with pytest.raises(ValidationError):
            ClusterSet(clusters=clusters)

    def test_score_range(self):
        assert ScoreList(scores=(1, 100)).scores == (1.0, 100.0)
        with pytest.raises(ValidationError):
            ScoreList(scores=(0.5,))

    def test_embedding_vectors(self):
        assert EmbeddingVector.from_array([0.6, 0.8], normalized=True).dim == 2
        with pytest.raises(ValidationError):
            EmbeddingVector(values=(1.0, 1.0), dim=2, normalized=True)
        with pytest.raises(ValidationError):
            EmbeddingVector(values=(1.0,), dim=2)
        with pytest.raises(ValidationError):
            EmbeddingVector(values=(float("inf"),), dim=1)

    def test_aggregated_query_has_one_output(self):
        bundle = WeightedQueryBundle(init_text="q", w0=0.5)
        with pytest.raises(ValidationError):
            AggregatedQuery(strategy=AggregationStrategy.DC, bundle=bundle)
        with pytest.raises(ValidationError):
            AggregatedQuery(
                strategy=AggregationStrategy.FW,
                bundle=bundle,
                fused_text="q",
                fused_embedding=EmbeddingVector.from_array([1.0]),
            )

    def test_runs_must_be_ranked(self):
        RetrievalRun(results={"q": (ScoredDoc(doc_id="b", score=1.0), ScoredDoc(doc_id="c", score=1.0))})
        with pytest.raises(ValidationError):
            RetrievalRun(results={"q": (ScoredDoc(doc_id="c", score=1.0), ScoredDoc(doc_id="b", score=1.0))})
        with pytest.raises(ValidationError):
            RetrievalRun(results={"q": (ScoredDoc(doc_id="a", score=0.1), ScoredDoc(doc_id="b", score=0.2))})
        with pytest.raises(ValidationError):
            RetrievalRun(results={"q": (ScoredDoc(doc_id="a", score=0.2), ScoredDoc(doc_id="a", score=0.1))})

    def test_qrels(self):
        assert Qrels(judgments={"q1": {"d1": 2}}).row("q2") == {}
        with pytest.raises(ValidationError):
            Qrels(judgments={"q1": {"d1": -1}})


class TestArtifacts:
    def test_jsonl_models(self, tmp_path):
        path = artifact_path(tmp_path / "nested", "clusters")
        sets = [ClusterSet(clusters=("a",)), ClusterSet(clusters=("b", "c"), source_iteration=1)]
        write_jsonl(path, sets)
        assert read_jsonl(path, ClusterSet) == sets
        assert not list(path.parent.glob("*.tmp"))

    def test_empty_jsonl(self, tmp_path):
        path = write_jsonl(tmp_path / "empty.jsonl", [])
        assert path.read_text() == ""
        assert read_jsonl(path, Query) == []

    def test_json_is_sorted(self, tmp_path):
        path = write_json(tmp_path / "m.json", {"b": 1, "a": 2})
        assert path.read_text().index('"a"') < path.read_text().index('"b"')
        assert read_json(path) == {"a": 2, "b": 1}

    def test_invalid_line_names_the_position(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "q1", "text": "t"}\n{oops\n')
        with pytest.raises(ValueError, match="bad.jsonl:2"):
            read_jsonl(path, Query)

    def test_artifact_names_are_unique(self):
        assert len(set(ARTIFACT_NAMES.values())) == len(ARTIFACT_NAMES)
