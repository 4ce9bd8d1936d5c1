"""Test chat backends: cache, batching, mock scripting and the live client path"""
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from profile_tuner import backend as backend_module
from profile_tuner.backend import (
    TEST_MODE_RESPONSE, MockBackend, OpenAIBackend, RateLimiter, ResponseCache, build_backend,
)
from profile_tuner.config import Settings
from profile_tuner.errors import (
    BatchCompletionError, ConfigurationError, IntegrityError, TransportError,
)
from profile_tuner.pydantic_models import (
    BackendConfig, ChatRequest, ChatResponse, MockRule, MockScript,
)


def completion_body(content: str) -> dict:
    return {
        "id": "chatcmpl-test",
        "object": "chat.completion",
        "created": 0,
        "model": "stub-model",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 3, "completion_tokens": 1, "total_tokens": 4},
    }


class StubServer:
    """OpenAI-compatible endpoint replaying a scripted list of (status, content)."""

    def __init__(self, script: list[tuple[int, str]]):
        self.script = list(script)
        self.bodies: list[dict] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                stub.bodies.append(json.loads(self.rfile.read(length)))
                status, content = stub.script.pop(0) if stub.script else (200, "A")
                payload = completion_body(content) if status == 200 else {"error": {"message": content, "type": "stub"}}
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def live_backend(server: StubServer, model_id: str = "stub-model", **overrides) -> OpenAIBackend:
    config = BackendConfig(
        model_id=model_id, base_url=server.base_url, api_key="test-key",
        max_retries=2, backoff_initial=0.01, backoff_max=0.02, timeout=5, **overrides,
    )
    return OpenAIBackend(config)


class TestResponseCache:
    """Content-addressed response cache"""

    def test_put_then_get(self, tmp_path):
        cache = ResponseCache(tmp_path)
        request = ChatRequest(model_id="m", user="hello")
        cache.put(request, ChatResponse(text="B"))
        assert cache.get(request).text == "B"
        assert cache.get(ChatRequest(model_id="m", user="other")) is None

    def test_corrupt_record_raises(self, tmp_path):
        cache = ResponseCache(tmp_path)
        request = ChatRequest(model_id="m", user="hello")
        (tmp_path / f"{request.request_hash}.json").write_text("{not json", encoding="utf-8")
        with pytest.raises(IntegrityError, match="corrupt"):
            cache.get(request)

    def test_foreign_record_raises(self, tmp_path):
        cache = ResponseCache(tmp_path)
        request = ChatRequest(model_id="m", user="hello")
        other = ChatRequest(model_id="m", user="bye")
        cache.put(other, ChatResponse(text="x"))
        (tmp_path / f"{other.request_hash}.json").rename(tmp_path / f"{request.request_hash}.json")
        with pytest.raises(IntegrityError, match="different request"):
            cache.get(request)


class TestChatBackendCaching:
    """Cache read and write policy of ChatBackend.complete"""

    def test_greedy_requests_hit_cache(self, tmp_path):
        calls = []
        backend = MockBackend(responder=lambda r: calls.append(r) or "A", cache=ResponseCache(tmp_path))
        request = backend.request(user="q")
        first = backend.complete(request)
        second = backend.complete(request)
        assert len(calls) == 1
        assert not first.cached and second.cached
        assert second.text == "A"

    def test_sampled_requests_recorded_but_not_replayed(self, tmp_path):
        calls = []
        backend = MockBackend(responder=lambda r: calls.append(r) or "A", cache=ResponseCache(tmp_path))
        request = backend.request(user="q", temperature=1.2)
        backend.complete(request)
        backend.complete(request)
        assert len(calls) == 2
        assert (tmp_path / f"{request.request_hash}.json").exists()

    def test_force_cache_replays_sampled_requests(self, tmp_path):
        calls = []
        backend = MockBackend(responder=lambda r: calls.append(r) or "A", cache=ResponseCache(tmp_path))
        request = backend.request(user="q", temperature=1.2, seed_hint=7)
        backend.complete(request, force_cache=True)
        assert backend.complete(request, force_cache=True).cached
        assert len(calls) == 1


class TestCompleteBatch:
    """Bounded concurrent fan-out"""

    def test_results_in_request_order(self):
        backend = MockBackend(responder=lambda r: r.user.upper())
        requests = [backend.request(user=f"q{i}") for i in range(20)]
        assert [r.text for r in backend.complete_batch(requests, max_in_flight=4)] == [f"Q{i}" for i in range(20)]

    def test_in_flight_bound_respected(self):
        lock = threading.Lock()
        state = {"current": 0, "peak": 0}

        def slow(request):
            with lock:
                state["current"] += 1
                state["peak"] = max(state["peak"], state["current"])
            time.sleep(0.02)
            with lock:
                state["current"] -= 1
            return "A"

        backend = MockBackend(responder=slow)
        backend.complete_batch([backend.request(user=f"q{i}") for i in range(12)], max_in_flight=3)
        assert 1 <= state["peak"] <= 3

    def test_failures_do_not_stop_others(self):
        def flaky(request):
            if request.user == "bad":
                raise TransportError("boom")
            return "ok"

        backend = MockBackend(responder=flaky)
        requests = [backend.request(user=u) for u in ["a", "bad", "c"]]

        results = backend.complete_batch(requests, return_exceptions=True)
        assert results[0].text == "ok" and results[2].text == "ok"
        assert isinstance(results[1], TransportError)

        with pytest.raises(BatchCompletionError) as exc_info:
            backend.complete_batch(requests)
        assert list(exc_info.value.failures) == [1]
        assert exc_info.value.exit_code == 4

    def test_invalid_bound(self):
        backend = MockBackend()
        with pytest.raises(ConfigurationError):
            backend.complete_batch([backend.request(user="x")], max_in_flight=0)


class TestMockBackend:
    """Scripted mock backend"""

    def test_rules_then_responder_then_default(self):
        script = MockScript(rules=[MockRule(contains="ping", response="pong")], default_response="default")
        assert MockBackend(script).complete(ChatRequest(model_id="mock", user="ping?")).text == "pong"
        assert MockBackend(script).complete(ChatRequest(model_id="mock", user="other")).text == "default"
        with_responder = MockBackend(script, responder=lambda r: "responder")
        assert with_responder.complete(ChatRequest(model_id="mock", user="other")).text == "responder"

    def test_template_placeholders(self):
        script = MockScript(rules=[MockRule(regex=r"^Q", response="{system}|{user}|{state}|{unknown}")])
        response = MockBackend(script).complete(ChatRequest(model_id="mock", system="S", user="Q1"))
        assert response.text == "S|Q1|start|{unknown}"

    def test_anchored_regex_sees_each_message_alone(self):
        script = MockScript(rules=[
            MockRule(regex=r"^persona\b", response="system hit"),
            MockRule(regex=r"^Question$", response="user hit"),
        ], default_response="miss")
        backend = MockBackend(script)
        assert backend.complete(ChatRequest(model_id="mock", system="persona: calm", user="x")).text == "system hit"
        assert backend.complete(ChatRequest(model_id="mock", system="S", user="Question")).text == "user hit"
        assert backend.complete(ChatRequest(model_id="mock", system="S\nQuestion", user="x")).text == "miss"

    def test_field_and_state_matching(self):
        script = MockScript(rules=[
            MockRule(contains="persona", field="system", when_state="start", response="first", next_state="done"),
            MockRule(contains="persona", field="system", response="later"),
        ])
        backend = MockBackend(script)
        request = ChatRequest(model_id="mock", system="a persona", user="x")
        assert backend.complete(request).text == "first"
        assert backend.complete(request).text == "later"
        assert backend.state == "done"
        assert backend.complete(ChatRequest(model_id="mock", user="persona")).text == ""

    def test_choices_are_deterministic(self):
        script = MockScript(rules=[MockRule(regex=".", choices=["A", "B", "C", "D"])], seed=3)
        requests = [ChatRequest(model_id="mock", user=f"q{i}") for i in range(30)]
        first = [MockBackend(script).complete(r).text for r in requests]
        second = [MockBackend(script).complete(r).text for r in requests]
        assert first == second
        assert len(set(first)) > 1

    def test_scripted_failure(self):
        script = MockScript(rules=[MockRule(contains="x", fail=True)])
        with pytest.raises(TransportError):
            MockBackend(script).complete(ChatRequest(model_id="mock", user="x"))

    def test_from_file_and_build_backend(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(MockScript(default_response="hi").model_dump_json(), encoding="utf-8")
        backend = build_backend(BackendConfig(kind="mock", model_id="mockA", mock_script=path), cache_dir=tmp_path / "c")
        assert backend.model_id == "mockA"
        assert backend.complete(backend.request(user="x")).text == "hi"
        assert any((tmp_path / "c").iterdir())

    def test_missing_script_is_configuration_error(self, tmp_path):
        with pytest.raises(ConfigurationError):
            build_backend(BackendConfig(kind="mock", mock_script=tmp_path / "nope.json"))

    def test_test_mode_replaces_live_backends(self, mocker):
        mocker.patch.object(backend_module, "settings", Settings(RUNTIME_MODE="TEST"))
        backend = build_backend(BackendConfig(model_id="gpt-4o-mini"))
        assert isinstance(backend, MockBackend)
        assert backend.complete(backend.request(user="Which option?")).text == TEST_MODE_RESPONSE


class TestRateLimiter:
    """Request spacing"""

    def test_disabled_limiter_never_waits(self):
        limiter = RateLimiter(None)
        start = time.monotonic()
        for _ in range(100):
            limiter.acquire()
        assert time.monotonic() - start < 0.5

    def test_spacing(self):
        limiter = RateLimiter(requests_per_minute=1200)  # 50 ms apart
        start = time.monotonic()
        for _ in range(3):
            limiter.acquire()
        assert time.monotonic() - start >= 0.09


@pytest.mark.integration
class TestOpenAIBackend:
    """Live client path against a local stub server"""

    def test_success(self):
        with StubServer([(200, "B")]) as server:
            response = live_backend(server).complete(ChatRequest(model_id="stub-model", system="Be bold.", user="Pick"))
        assert response.text == "B"
        assert response.usage.total_tokens == 4
        assert server.bodies[0]["messages"][0] == {"role": "system", "content": "Be bold."}
        assert server.bodies[0]["temperature"] == 0.0

    def test_rate_limit_retried(self):
        with StubServer([(429, "slow down"), (200, "C")]) as server:
            response = live_backend(server).complete(ChatRequest(model_id="stub-model", user="Pick"))
        assert response.text == "C"
        assert len(server.bodies) == 2

    def test_server_errors_exhaust_retries(self):
        with StubServer([(500, "down")] * 3) as server:
            with pytest.raises(TransportError, match="giving up after 3 attempts"):
                live_backend(server).complete(ChatRequest(model_id="stub-model", user="Pick"))
        assert len(server.bodies) == 3

    def test_client_error_not_retried(self):
        with StubServer([(400, "bad request")]) as server:
            with pytest.raises(ConfigurationError, match="HTTP 400"):
                live_backend(server).complete(ChatRequest(model_id="stub-model", user="Pick"))
        assert len(server.bodies) == 1

    def test_seed_hint_forwarded(self):
        with StubServer([(200, "A")]) as server:
            live_backend(server).complete(ChatRequest(model_id="stub-model", user="x", temperature=1.2, seed_hint=42))
        assert server.bodies[0]["seed"] == 42

    def test_system_role_folded_for_gemma(self):
        with StubServer([(200, "A")]) as server:
            backend = live_backend(server, model_id="gemma-3-27b-it")
            backend.complete(ChatRequest(model_id="gemma-3-27b-it", system="Persona", user="Pick"))
        messages = server.bodies[0]["messages"]
        assert [m["role"] for m in messages] == ["user"]
        assert messages[0]["content"].startswith("Instructions:\nPersona")
