"""
Chat-completion backends.

`ChatBackend.complete` is the single entry point used by every other module:
it consults the content-addressed response cache, calls the concrete backend,
records the call in the transcript, and traces it through the artifact logger.
"""
import contextvars
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Optional

import openai
from tenacity import (
    Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt, wait_exponential,
)

from profile_tuner.artifact_logger import log_llm_artifact
from profile_tuner.config import settings
from profile_tuner.errors import (
    BatchCompletionError, ConfigurationError, IntegrityError, TransportError,
)
from profile_tuner.pydantic_models import (
    BackendConfig, ChatRequest, ChatResponse, FinishReason, MockRule, MockScript,
    TracedCall, Usage,
)
from profile_tuner.utils import derive_seed, is_gemma_model, transform_messages_for_gemma

logger = logging.getLogger(__name__)

# Live backends answer with this in TEST mode
TEST_MODE_RESPONSE = "A"

RETRYABLE_ERRORS = (
    openai.RateLimitError,
    openai.APIConnectionError,  # includes APITimeoutError
    openai.InternalServerError,
)


class ResponseCache:
    """
    Directory of JSON records named by request hash. There is no expiry:
    runs must be replayable. Writes are serialized; every record stores its
    full request key so a mismatching or unreadable file is detected.
    """

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, request: ChatRequest) -> Path:
        return self.cache_dir / f"{request.request_hash}.json"

    def get(self, request: ChatRequest) -> Optional[ChatResponse]:
        path = self._path(request)
        if not path.exists():
            return None
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
            stored_key = record["key"]
            response = ChatResponse.model_validate(record["response"])
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise IntegrityError(f"corrupt cache record {path.name}: {e}") from e
        if stored_key != request.cache_key():
            raise IntegrityError(f"cache record {path.name} belongs to a different request")
        return response

    def put(self, request: ChatRequest, response: ChatResponse) -> None:
        record = {
            "key": request.cache_key(),
            "response": response.model_copy(update={"cached": False}).model_dump(mode="json"),
        }
        text = json.dumps(record, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        path = self._path(request)
        with self._lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(text, encoding="utf-8", newline="\n")
            tmp.replace(path)


class RateLimiter:
    """Spaces request starts at least 60/requests_per_minute seconds apart."""

    def __init__(self, requests_per_minute: Optional[float]):
        self.interval = 60.0 / requests_per_minute if requests_per_minute else 0.0
        self._lock = threading.Lock()
        self._next_slot = 0.0

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            wait = self._next_slot - now
            self._next_slot = max(now, self._next_slot) + self.interval
        if wait > 0:
            time.sleep(wait)


class ChatBackend:
    """Base class: caching, tracing and bounded batch fan-out around `_complete`."""

    def __init__(self, model_id: str, cache: Optional[ResponseCache] = None):
        self.model_id = model_id
        self.cache = cache

    def request(
        self,
        user: str,
        system: Optional[str] = None,
        temperature: float = 0.0,
        max_tokens: int = 256,
        seed_hint: Optional[int] = None,
    ) -> ChatRequest:
        """Build a request addressed to this backend's model."""
        return ChatRequest(
            model_id=self.model_id,
            system=system or None,
            user=user,
            temperature=temperature,
            max_tokens=max_tokens,
            seed_hint=seed_hint,
        )

    def complete(self, request: ChatRequest, force_cache: bool = False) -> ChatResponse:
        """
        Return the model's reply to one request.

        Greedy requests (temperature 0) are served from the cache when possible;
        sampled requests only when force_cache is set. Every fresh response is
        written to the cache directory, which doubles as the run transcript.
        """
        use_cache = self.cache is not None and (request.temperature == 0 or force_cache)
        if use_cache:
            hit = self.cache.get(request)
            if hit is not None:
                logger.debug(f"Cache HIT: {request.request_hash}")
                return hit.model_copy(update={"cached": True})

        try:
            response = self._complete(request)
        except Exception as e:
            log_llm_artifact(TracedCall(request=request, error=str(e)), "llm_call")
            raise

        if self.cache is not None:
            self.cache.put(request, response)
        log_llm_artifact(TracedCall(request=request, response=response), "llm_call")
        return response

    def complete_batch(
        self,
        requests: list[ChatRequest],
        max_in_flight: int = 8,
        return_exceptions: bool = False,
        force_cache: bool = False,
    ) -> list[ChatResponse | Exception]:
        """
        Complete many requests with at most max_in_flight outstanding.

        Responses come back in request order. A failing member never stops the
        others; afterwards failures are either returned in place
        (return_exceptions=True) or raised together as BatchCompletionError.
        """
        if max_in_flight < 1:
            raise ConfigurationError("max_in_flight must be >= 1")
        if not requests:
            return []

        def _one(request: ChatRequest) -> ChatResponse | Exception:
            try:
                return self.complete(request, force_cache=force_cache)
            except Exception as e:
                return e

        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            futures = [
                pool.submit(contextvars.copy_context().run, _one, request)
                for request in requests
            ]
            results = [future.result() for future in futures]

        failures = {i: r for i, r in enumerate(results) if isinstance(r, Exception)}
        if failures:
            logger.warning(f"{len(failures)}/{len(requests)} batch requests failed")
            if not return_exceptions:
                raise BatchCompletionError(failures, results)
        return results

    def _complete(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError


class OpenAIBackend(ChatBackend):
    """Any OpenAI-compatible chat-completions endpoint (hosted APIs or local servers)."""

    def __init__(self, config: BackendConfig, cache: Optional[ResponseCache] = None):
        super().__init__(config.model_id, cache)
        self.config = config
        self.client = config.get_client()
        self.rate_limiter = RateLimiter(config.requests_per_minute)
        if config.supports_system_role is None:
            self.supports_system_role = not is_gemma_model(config.model_id)
        else:
            self.supports_system_role = config.supports_system_role

    def _messages(self, request: ChatRequest) -> list[dict[str, str]]:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.user})
        if not self.supports_system_role:
            messages = transform_messages_for_gemma(messages)
        return messages

    def _complete(self, request: ChatRequest) -> ChatResponse:
        params = {
            "model": request.model_id,
            "messages": self._messages(request),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed_hint is not None:
            params["seed"] = request.seed_hint

        retrying = Retrying(
            stop=stop_after_attempt(self.config.max_retries + 1),
            wait=wait_exponential(multiplier=self.config.backoff_initial, max=self.config.backoff_max),
            retry=retry_if_exception_type(RETRYABLE_ERRORS),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    self.rate_limiter.acquire()
                    completion = self.client.chat.completions.create(**params)
        except RETRYABLE_ERRORS as e:
            raise TransportError(
                f"{request.model_id}: giving up after {self.config.max_retries + 1} attempts: {e}"
            ) from e
        except openai.APIStatusError as e:
            raise ConfigurationError(f"{request.model_id}: HTTP {e.status_code}: {e.message}") from e

        choice = completion.choices[0]
        try:
            finish_reason = FinishReason(choice.finish_reason)
        except ValueError:
            finish_reason = FinishReason.OTHER
        usage = completion.usage
        return ChatResponse(
            text=choice.message.content or "",
            finish_reason=finish_reason,
            usage=Usage(
                prompt_tokens=usage.prompt_tokens if usage else 0,
                completion_tokens=usage.completion_tokens if usage else 0,
                total_tokens=usage.total_tokens if usage else 0,
            ),
        )


class _TemplateValues(dict):
    def __missing__(self, key: str) -> str:
        return "{" + key + "}"


Responder = Callable[[ChatRequest], str]


class MockBackend(ChatBackend):
    """
    Deterministic offline backend driven by a MockScript, a Python responder,
    or both (rules first, responder as the fallback). A responder may raise
    to simulate failures.

    Rule state is shared across calls; scripts that use `next_state` should be
    driven sequentially for reproducible transcripts.
    """

    def __init__(
        self,
        script: Optional[MockScript] = None,
        responder: Optional[Responder] = None,
        model_id: str = "mock",
        cache: Optional[ResponseCache] = None,
    ):
        super().__init__(model_id, cache)
        self.script = script or MockScript()
        self.responder = responder
        self.state = self.script.initial_state
        self._state_lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path, model_id: str = "mock", cache: Optional[ResponseCache] = None) -> "MockBackend":
        script = MockScript.model_validate_json(Path(path).read_text(encoding="utf-8"))
        return cls(script=script, model_id=model_id, cache=cache)

    @staticmethod
    def _matches(rule: MockRule, request: ChatRequest, state: str) -> bool:
        if rule.when_state is not None and rule.when_state != state:
            return False
        if rule.field == "user":
            haystacks = [request.user]
        elif rule.field == "system":
            haystacks = [request.system or ""]
        else:
            haystacks = [request.system or "", request.user]
        return any(
            (rule.contains is None or rule.contains in haystack)
            and (rule.regex is None or re.search(rule.regex, haystack, re.DOTALL))
            for haystack in haystacks
        )

    def _render(self, rule: MockRule, request: ChatRequest, state: str) -> str:
        if rule.choices:
            index = derive_seed(self.script.seed, request.request_hash) % len(rule.choices)
            template = rule.choices[index]
        else:
            template = rule.response or ""
        values = _TemplateValues(
            system=request.system or "",
            user=request.user,
            state=state,
            hash=request.request_hash[:8],
        )
        return template.format_map(values)

    def _complete(self, request: ChatRequest) -> ChatResponse:
        with self._state_lock:
            state = self.state
            rule = next((r for r in self.script.rules if self._matches(r, request, state)), None)
            if rule is not None and rule.next_state is not None:
                self.state = rule.next_state

        if rule is not None:
            if rule.fail:
                raise TransportError(f"{self.model_id}: scripted failure")
            text = self._render(rule, request, state)
        elif self.responder is not None:
            text = self.responder(request)
        else:
            text = self.script.default_response
        return ChatResponse(text=text, usage=Usage(
            prompt_tokens=len(request.user.split()),
            completion_tokens=len(text.split()),
            total_tokens=len(request.user.split()) + len(text.split()),
        ))


def build_backend(config: BackendConfig, cache_dir: Optional[Path] = None) -> ChatBackend:
    """Instantiate the backend described by a BackendConfig."""
    cache_root = cache_dir or config.cache_dir
    cache = ResponseCache(cache_root) if cache_root else None
    if config.kind == "mock":
        if config.mock_script is None:
            raise ConfigurationError(f"mock backend {config.model_id} needs a mock_script path")
        if not Path(config.mock_script).exists():
            raise ConfigurationError(f"mock script not found: {config.mock_script}")
        return MockBackend.from_file(config.mock_script, model_id=config.model_id, cache=cache)
    if settings.IS_TEST_ENV:
        logger.info(f"TEST mode active: {config.model_id} answers with a fixed dummy reply")
        return MockBackend(MockScript(default_response=TEST_MODE_RESPONSE), model_id=config.model_id, cache=cache)
    return OpenAIBackend(config, cache)
