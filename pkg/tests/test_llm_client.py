import json

import httpx
import pytest

from app.core.exceptions import (
    ClusterParseError,
    ContractViolationError,
    MalformedPayloadError,
    ProviderError,
    TransportError,
)
from app.db.artifacts import write_jsonl
from app.schemas.schemas import GenerationRequest, PromptKind, SampleMode
from app.services.llm_client import (
    GenerationProvider,
    HTTPChatProvider,
    LLMGateway,
    MockGenerationProvider,
    ReplayFixtureProvider,
    ResponseCache,
    is_transient_http_error,
)
from app.services.parsers import parse_cluster_output


def make_request(n: int = 2, kind: PromptKind = PromptKind.CONTEXTUAL_EXPANSION, **kwargs) -> GenerationRequest:
    return GenerationRequest(prompt=f"prompt for {kind.value}", kind=kind, query_text="query", n_samples=n, **kwargs)


def chat_payload(texts):
    return {"choices": [{"index": i, "message": {"role": "assistant", "content": t}} for i, t in enumerate(texts)]}


class Recorder:
    """httpx MockTransport handler answering from a list of (status, body) responses."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.requests.append(json.loads(request.content))
        status, body = self.responses[min(len(self.requests), len(self.responses)) - 1]
        if isinstance(body, Exception):
            raise body
        return httpx.Response(status, json=body)


def http_provider(recorder, max_retries: int = 3) -> HTTPChatProvider:
    return HTTPChatProvider(
        "http://llm.test/v1", "test-model", api_key="secret",
        max_retries=max_retries, retry_wait=0, transport=httpx.MockTransport(recorder),
    )


class TestHTTPChatProvider:
    def test_generate_and_cache(self):
        recorder = Recorder([(200, chat_payload(["one", "two"]))])
        gateway = LLMGateway(http_provider(recorder))

        first = gateway.generate(make_request())
        second = gateway.generate(make_request())

        assert first.completions == ("one", "two")
        assert not first.cache_hit
        assert second.cache_hit
        assert second.completions == first.completions
        assert len(recorder.requests) == 1
        assert recorder.requests[0]["n"] == 2
        assert recorder.requests[0]["model"] == "test-model"
        assert gateway.cache.hit_rate() == 0.5

    def test_iteration_is_part_of_the_cache_identity(self):
        recorder = Recorder([(200, chat_payload(["one", "two"]))])
        gateway = LLMGateway(http_provider(recorder))
        gateway.generate(make_request())
        assert not gateway.generate(make_request(iteration=1)).cache_hit
        assert len(recorder.requests) == 2

    def test_wrong_completion_count_is_not_cached(self):
        recorder = Recorder([(200, chat_payload(["only one"]))])
        gateway = LLMGateway(http_provider(recorder))
        for _ in range(2):
            with pytest.raises(ContractViolationError):
                gateway.generate(make_request(n=2))
        assert len(recorder.requests) == 2

    def test_transient_failures_are_retried(self):
        recorder = Recorder([(500, {}), (429, {}), (200, chat_payload(["ok"]))])
        gateway = LLMGateway(http_provider(recorder, max_retries=3))
        assert gateway.generate(make_request(n=1)).completions == ("ok",)
        assert len(recorder.requests) == 3

    def test_retry_budget_is_bounded(self):
        recorder = Recorder([(503, {})])
        gateway = LLMGateway(http_provider(recorder, max_retries=2))
        with pytest.raises(TransportError):
            gateway.generate(make_request(n=1))
        assert len(recorder.requests) == 3

    def test_connection_errors_become_transport_errors(self):
        recorder = Recorder([(200, httpx.ConnectError("refused"))])
        with pytest.raises(TransportError):
            LLMGateway(http_provider(recorder, max_retries=1)).generate(make_request(n=1))
        assert len(recorder.requests) == 2

    def test_client_errors_are_not_retried(self):
        recorder = Recorder([(400, {"error": "bad"})])
        with pytest.raises(ProviderError) as excinfo:
            LLMGateway(http_provider(recorder)).generate(make_request(n=1))
        assert not isinstance(excinfo.value, TransportError)
        assert len(recorder.requests) == 1

    def test_malformed_payload(self):
        recorder = Recorder([(200, {"unexpected": True})])
        with pytest.raises(MalformedPayloadError):
            LLMGateway(http_provider(recorder)).generate(make_request(n=1))


def test_disk_cache_is_shared_between_gateways(tmp_path):
    recorder = Recorder([(200, chat_payload(["one", "two"]))])
    LLMGateway(http_provider(recorder), ResponseCache(tmp_path)).generate(make_request())
    response = LLMGateway(http_provider(recorder), ResponseCache(tmp_path)).generate(make_request())
    assert response.cache_hit
    assert len(recorder.requests) == 1


def test_cache_keys_are_canonical():
    a = ResponseCache.make_key({"b": 1, "a": [1, 2]})
    b = ResponseCache.make_key({"a": [1, 2], "b": 1})
    assert a == b
    assert a != ResponseCache.make_key({"a": [2, 1], "b": 1})


class TestMockProvider:
    def test_deterministic_for_a_seed(self):
        request = make_request(n=3)
        a = MockGenerationProvider(seed=1).complete(request, 3)
        b = MockGenerationProvider(seed=1).complete(request, 3)
        assert a == b
        assert MockGenerationProvider(seed=2).complete(request, 3) != a

    def test_independent_sampling_matches_batched(self):
        request = make_request(n=3)
        batched = LLMGateway(MockGenerationProvider(), sample_mode=SampleMode.BATCHED).generate(request)
        gateway = LLMGateway(MockGenerationProvider(), sample_mode=SampleMode.INDEPENDENT)
        independent = gateway.generate(request)
        assert independent.completions == batched.completions
        assert gateway.provider_calls[PromptKind.CONTEXTUAL_EXPANSION] == 1

    def test_clustering_output_parses(self):
        request = make_request(n=1, kind=PromptKind.CLUSTERING_GENERATION, context=("a b c", "d e f", "g h i"))
        completion = LLMGateway(MockGenerationProvider()).generate(request).completions[0]
        assert 1 <= len(parse_cluster_output(completion).clusters) <= 3


class FlakyClusterProvider(GenerationProvider):
    """Returns prose on the first attempt and valid cluster JSON afterwards."""

    @property
    def provider_id(self) -> str:
        return "flaky"

    def complete(self, request, n, offset=0):
        text = "I cannot help" if request.attempt == 0 else '{"cluster1": "fixed"}'
        return chat_payload([text] * n)


def test_parse_failures_are_regenerated():
    gateway = LLMGateway(FlakyClusterProvider())
    request = make_request(n=1, kind=PromptKind.CLUSTERING_GENERATION)
    assert gateway.generate_parsed(request, parse_cluster_output, retries=2).clusters == ("fixed",)
    assert gateway.provider_calls[PromptKind.CLUSTERING_GENERATION] == 2


def test_parse_retry_budget_exhausted():
    gateway = LLMGateway(FlakyClusterProvider())
    with pytest.raises(ClusterParseError):
        gateway.generate_parsed(make_request(n=1, kind=PromptKind.CLUSTERING_GENERATION), parse_cluster_output, retries=0)


class TestReplayProvider:
    def test_lookup_with_fallbacks(self, tmp_path):
        fixture = tmp_path / "replay.jsonl"
        write_jsonl(fixture, [
            {"kind": "contextual_expansion", "query": "query", "completions": ["a", "b", "c"]},
            {"kind": "contextual_expansion", "query": "query", "iteration": 1, "completions": ["x", "y"]},
        ])
        provider = ReplayFixtureProvider(fixture)
        assert LLMGateway(provider).generate(make_request(n=2)).completions == ("a", "b")
        assert LLMGateway(provider).generate(make_request(n=2, iteration=1)).completions == ("x", "y")
        assert LLMGateway(provider).generate(make_request(n=2, iteration=5)).completions == ("a", "b")

    def test_missing_rows_and_files(self, tmp_path):
        fixture = tmp_path / "replay.jsonl"
        write_jsonl(fixture, [{"kind": "scoring", "query": "other", "completions": ["[50]"]}])
        with pytest.raises(ProviderError):
            ReplayFixtureProvider(fixture).complete(make_request(n=1), 1)
        with pytest.raises(ProviderError):
            ReplayFixtureProvider(tmp_path / "absent.jsonl")


@pytest.mark.parametrize("status, transient", [(429, True), (500, True), (503, True), (400, False), (404, False)])
def test_transient_statuses(status, transient):
    request = httpx.Request("POST", "http://llm.test/chat/completions")
    error = httpx.HTTPStatusError("status", request=request, response=httpx.Response(status, request=request))
    assert is_transient_http_error(error) is transient
    assert is_transient_http_error(httpx.ConnectError("refused", request=request))
    assert not is_transient_http_error(ValueError("other"))
