import pytest
from hypothesis import given, settings, strategies as st

from app.core.exceptions import ClusterParseError, ScoreParseError
from app.schemas.schemas import ClusterSet
from app.services.parsers import (
    find_json_object,
    parse_cluster_output,
    parse_score_output,
    serialize_clusters,
)


class TestClusterParser:
    def test_plain_json(self):
        result = parse_cluster_output('{"cluster1": "vitamin d bone density", "cluster2": "sunlight"}')
        assert result.clusters == ("vitamin d bone density", "sunlight")

    def test_prose_around_single_quoted_json(self):
        raw = "Here are the clusters:\n{'cluster1': 'caffeine and sleep', 'cluster2': \"adenosine's role\"}\nDone."
        assert parse_cluster_output(raw).clusters == ("caffeine and sleep", "adenosine's role")

    def test_key_order_is_preserved(self):
        result = parse_cluster_output('{"cluster2": "b", "cluster1": "a"}')
        assert result.clusters == ("b", "a")

    @pytest.mark.parametrize("raw", [
        "no json here",
        "{}",
        '{"cluster1": "a", "cluster2": "b", "cluster3": "c", "cluster4": "d"}',
        '{"group1": "a"}',
        '{"cluster1": ""}',
        '{"cluster1": "   "}',
        '{"cluster1": 7}',
        '{"cluster1": "a", "cluster1": "b"}',
        '{"cluster1": "unterminated}',
    ])
    def test_invalid_outputs(self, raw):
        with pytest.raises(ClusterParseError):
            parse_cluster_output(raw)

    def test_braces_inside_strings_do_not_end_the_object(self):
        assert find_json_object('x {"cluster1": "a } b"} y') == '{"cluster1": "a } b"}'

    def test_serialize_then_parse(self):
        cluster_set = ClusterSet(clusters=("one", 'two "quoted"', "three"))
        assert parse_cluster_output(serialize_clusters(cluster_set)).clusters == cluster_set.clusters

    @settings(max_examples=10000, deadline=None)
    @given(st.text())
    def test_total_on_arbitrary_text(self, raw):
        try:
            result = parse_cluster_output(raw)
        except ClusterParseError:
            return
        assert 1 <= len(result.clusters) <= 3

    @settings(max_examples=500, deadline=None)
    @given(st.lists(st.text(min_size=1).filter(lambda s: s.strip()), min_size=1, max_size=3))
    def test_any_valid_cluster_mapping_parses(self, texts):
        assert parse_cluster_output(serialize_clusters(ClusterSet(clusters=tuple(texts)))).clusters == tuple(texts)


class TestScoreParser:
    def test_plain_list(self):
        assert parse_score_output("[70, 85, 40]", 3).scores == (70.0, 85.0, 40.0)

    def test_prose_and_decimals(self):
        assert parse_score_output("Scores: [1, 99.5] as requested", 2).scores == (1.0, 99.5)

    def test_first_numeric_list_wins(self):
        assert parse_score_output("[cluster1, cluster2] -> [55, 60]", 2).scores == (55.0, 60.0)

    @pytest.mark.parametrize("raw, count", [
        ("[70, 85]", 3),
        ("[0, 50]", 2),
        ("[50, 101]", 2),
        ("no list", 1),
        ("[]", 1),
        ("[nan]", 1),
        ("[1e999]", 1),
    ])
    def test_invalid_outputs(self, raw, count):
        with pytest.raises(ScoreParseError):
            parse_score_output(raw, count)

    def test_bounds_are_inclusive(self):
        assert parse_score_output("[1, 100]", 2).scores == (1.0, 100.0)

    def test_expected_count_must_be_positive(self):
        with pytest.raises(ScoreParseError):
            parse_score_output("[50]", 0)

    @settings(max_examples=10000, deadline=None)
    @given(st.text(), st.integers(min_value=1, max_value=3))
    def test_total_on_arbitrary_text(self, raw, count):
        try:
            result = parse_score_output(raw, count)
        except ScoreParseError:
            return
        assert len(result.scores) == count
        assert all(1.0 <= s <= 100.0 for s in result.scores)
