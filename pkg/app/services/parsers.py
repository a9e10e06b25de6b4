"""
Strict parsers for the cluster-JSON and score-list completion contracts.

Both parsers are total: any input either yields a value or raises a ParseError.
"""
import json
import math
import re
from typing import List, Optional, Sequence, Tuple

from pydantic import ValidationError

from app.core.exceptions import ClusterParseError, ScoreParseError
from app.schemas.schemas import ClusterSet, ScoreList

MAX_CLUSTERS = 3
_CLUSTER_KEY_RE = re.compile(r"^cluster([1-3])$")
_LIST_RE = re.compile(r"\[([^\[\]]*)\]")
_NUMBER_RE = re.compile(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?$")


def _match_brace(raw: str, start: int) -> Optional[int]:
    depth = 0
    quote = None
    escaped = False
    for index in range(start, len(raw)):
        char = raw[index]
        if quote is not None:
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == quote:
                quote = None
            continue
        if char in ("\"", "'"):
            quote = char
        elif char == "{":
            depth += 1
        elif char == "}":
            depth -= 1
            if depth == 0:
                return index
    return None


def find_json_object(raw: str) -> Optional[str]:
    """Return the first balanced top-level {...} block in `raw`, ignoring braces inside strings."""
    start = raw.find("{")
    while start != -1:
        end = _match_brace(raw, start)
        if end is not None:
            return raw[start:end + 1]
        start = raw.find("{", start + 1)
    return None


def normalize_quotes(text: str) -> str:
    """Rewrite single-quoted string literals as JSON double-quoted strings."""
    out: List[str] = []
    quote = None
    escaped = False
    for char in text:
        if quote is None:
            if char in ("'", "\""):
                quote = char
                out.append("\"")
            else:
                out.append(char)
        elif quote == "\"":
            out.append(char)
            if escaped:
                escaped = False
            elif char == "\\":
                escaped = True
            elif char == "\"":
                quote = None
        else:
            if escaped:
                escaped = False
                out.append("'" if char == "'" else "\\" + char)
            elif char == "\\":
                escaped = True
            elif char == "'":
                quote = None
                out.append("\"")
            elif char == "\"":
                out.append("\\\"")
            else:
                out.append(char)
    return "".join(out)


def _load_pairs(candidate: str) -> List[Tuple[object, object]]:
    last_error: Optional[Exception] = None
    for text in (candidate, normalize_quotes(candidate)):
        try:
            pairs = json.loads(text, object_pairs_hook=list)
        except (ValueError, RecursionError) as e:
            last_error = e
            continue
        if isinstance(pairs, list):
            return pairs
        last_error = ValueError("top-level value is not an object")
    raise ClusterParseError(f"cluster output is not valid JSON: {last_error}")


def parse_cluster_output(raw: str) -> ClusterSet:
    """
    Parse a clustering completion into a ClusterSet.

    Accepts prose around the JSON object and single-quoted pseudo-JSON.
    Keys must be cluster1..cluster3; key order is preserved.
    """
    if not isinstance(raw, str):
        raise ClusterParseError("cluster output must be text")
    candidate = find_json_object(raw)
    if candidate is None:
        raise ClusterParseError("no JSON object found in cluster output")

    pairs = _load_pairs(candidate)
    if not pairs:
        raise ClusterParseError("cluster output contains no clusters")
    if len(pairs) > MAX_CLUSTERS:
        raise ClusterParseError(f"cluster output must be restricted to 1 to 3 groups, got {len(pairs)}")

    seen = set()
    clusters = []
    for key, value in pairs:
        if not isinstance(key, str) or not _CLUSTER_KEY_RE.match(key):
            raise ClusterParseError(f"unexpected cluster key {key!r}")
        if key in seen:
            raise ClusterParseError(f"duplicate cluster key {key!r}")
        seen.add(key)
        if not isinstance(value, str) or not value.strip():
            raise ClusterParseError(f"{key} must be a non-empty string")
        clusters.append(value)
    try:
        return ClusterSet(clusters=tuple(clusters))
    except ValidationError as e:
        raise ClusterParseError(f"invalid cluster text: {e.errors()[0]['msg']}") from e


def serialize_clusters_mapping(texts: Sequence[str]) -> str:
    return json.dumps({f"cluster{i}": text for i, text in enumerate(texts, start=1)}, ensure_ascii=False)


def serialize_clusters(cluster_set: ClusterSet) -> str:
    return serialize_clusters_mapping(cluster_set.clusters)


def _parse_numbers(body: str) -> Optional[List[float]]:
    items = [item.strip() for item in body.split(",")]
    if items == [""]:
        return []
    numbers = []
    for item in items:
        if not _NUMBER_RE.match(item):
            return None
        numbers.append(float(item))
    return numbers


def parse_score_output(raw: str, expected_count: int) -> ScoreList:
    """
    Parse a scoring completion such as "[70, 85, 40]".

    Args:
        raw: Full completion text
        expected_count: Number of clusters that were scored

    Returns:
        ScoreList with exactly expected_count values in [1, 100]
    """
    if not isinstance(raw, str):
        raise ScoreParseError("score output must be text")
    if expected_count < 1:
        raise ScoreParseError(f"expected_count must be at least 1, got {expected_count}")

    numbers = None
    for match in _LIST_RE.finditer(raw):
        numbers = _parse_numbers(match.group(1))
        if numbers is not None:
            break
    if numbers is None:
        raise ScoreParseError("no numeric score list found in output")
    if len(numbers) != expected_count:
        raise ScoreParseError(f"expected {expected_count} scores, got {len(numbers)}")
    for score in numbers:
        if not math.isfinite(score) or not 1.0 <= score <= 100.0:
            raise ScoreParseError(f"score {score} outside [1, 100]")
    return ScoreList(scores=tuple(numbers))
