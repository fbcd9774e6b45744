import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from kernelsmith.llm import (
    OVERFLOW,
    AuthError,
    ChatRequest,
    ContextOverflowError,
    ProviderError,
    ScriptExhaustedError,
    ScriptedBackend,
    ServiceConfig,
    TransportError,
    complete,
)


class LoopbackServer:
    """Minimal chat-completions server scripted per test."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                outer.requests.append(json.loads(self.rfile.read(length)))
                status, body = outer.responses.pop(0)
                payload = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def endpoint(self) -> ServiceConfig:
        host, port = self.server.server_address
        return ServiceConfig(
            base_url=f"http://{host}:{port}/v1", api_key="test-key", model="test-model",
            timeout_s=5.0,
        )

    def stop(self):
        self.server.shutdown()
        self.server.server_close()


def ok_body(text, finish="stop"):
    return {
        "choices": [{"message": {"content": text}, "finish_reason": finish}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5},
    }


def simple_request() -> ChatRequest:
    return ChatRequest(system="sys", messages=[("user", "hello")])


def test_complete_returns_fixture_body():
    server = LoopbackServer([(200, ok_body("scripted reply"))])
    try:
        response = complete(simple_request(), server.endpoint)
    finally:
        server.stop()
    assert response.text == "scripted reply"
    assert response.finish_reason == "stop"
    assert response.usage["prompt_tokens"] == 10


def test_missing_key_is_auth_error_before_network():
    endpoint = ServiceConfig(base_url="http://127.0.0.1:1/v1", api_key="", model="m")
    with pytest.raises(AuthError):
        complete(simple_request(), endpoint)


def test_overflow_error_body_raises_overflow_class():
    server = LoopbackServer(
        [(400, {"error": {"code": "context_length_exceeded", "message": "context_length_exceeded"}})]
    )
    try:
        with pytest.raises(ContextOverflowError):
            complete(simple_request(), server.endpoint)
    finally:
        server.stop()


def test_finish_reason_length_maps_to_overflow():
    server = LoopbackServer([(200, ok_body("partial...", finish="length"))])
    try:
        with pytest.raises(ContextOverflowError):
            complete(simple_request(), server.endpoint)
    finally:
        server.stop()


def test_retry_on_transient_5xx_then_success():
    server = LoopbackServer([(503, {"error": "busy"}), (200, ok_body("after retry"))])
    try:
        response = complete(simple_request(), server.endpoint)
    finally:
        server.stop()
    assert response.text == "after retry"
    assert len(server.requests) == 2


def test_auth_rejection_is_typed():
    server = LoopbackServer([(401, {"error": "bad key"})])
    try:
        with pytest.raises(AuthError):
            complete(simple_request(), server.endpoint)
    finally:
        server.stop()


def test_provider_error_is_typed():
    server = LoopbackServer([(400, {"error": {"message": "bad request shape"}})])
    try:
        with pytest.raises(ProviderError):
            complete(simple_request(), server.endpoint)
    finally:
        server.stop()


def test_connection_refused_becomes_transport_error(monkeypatch):
    import kernelsmith.llm as llm_mod

    monkeypatch.setattr(llm_mod.time, "sleep", lambda s: None)
    endpoint = ServiceConfig(base_url="http://127.0.0.1:9/v1", api_key="k", model="m", timeout_s=0.2)
    with pytest.raises(TransportError):
        complete(simple_request(), endpoint)


def test_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest(system="s", messages=[], max_tokens=0)
    with pytest.raises(ValueError):
        ChatRequest(system="s", messages=[], temperature=-0.1)


def test_config_from_env():
    env = {
        "LLM_MODEL": "m1",
        "OPENAI_API_BASE": "http://example.invalid/v1",
        "OPENAI_API_KEY": "sk-x",
        "LLM_TEMPERATURE": "0.5",
        "LLM_MAX_TOKENS": "1234",
    }
    config = ServiceConfig.from_env(env)
    assert (config.model, config.base_url, config.api_key) == ("m1", "http://example.invalid/v1", "sk-x")
    assert config.temperature == 0.5
    assert config.max_tokens == 1234


def test_scripted_backend_fifo_and_exhaustion():
    backend = ScriptedBackend(["one", "two"])
    assert backend.complete(simple_request()).text == "one"
    assert backend.complete(simple_request()).text == "two"
    with pytest.raises(ScriptExhaustedError):
        backend.complete(simple_request())


def test_scripted_backend_overflow_entry():
    backend = ScriptedBackend([OVERFLOW, "after"])
    with pytest.raises(ContextOverflowError):
        backend.complete(simple_request())
    assert backend.complete(simple_request()).text == "after"
    assert backend.overflow_calls == 1
    assert backend.completed_calls == 1


def test_scripted_backend_deterministic():
    script = ["a", OVERFLOW, "b"]
    outcomes = []
    for _ in range(2):
        backend = ScriptedBackend(list(script))
        run = []
        for _ in range(3):
            try:
                run.append(backend.complete(simple_request()).text)
            except ContextOverflowError:
                run.append("<overflow>")
        outcomes.append(run)
    assert outcomes[0] == outcomes[1] == ["a", "<overflow>", "b"]
