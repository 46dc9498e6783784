"""Minimal chat-completion client with retry and an in-flight cap."""
from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass
from typing import Callable

import httpx

RETRY_STATUS = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "LLM_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    temperature: float = 0.0
    backoff_base: float = 0.5
    backoff_max: float = 8.0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


class LlmError(RuntimeError):
    """Request failed; carries the last HTTP status (if any) and a body excerpt."""

    def __init__(self, message: str, status: int | None = None, body: str = "", attempts: int = 0):
        excerpt = body[:200]
        detail = f" (status {status})" if status is not None else ""
        super().__init__(f"{message}{detail}: {excerpt}" if excerpt else f"{message}{detail}")
        self.status = status
        self.body = excerpt
        self.attempts = attempts


class LlmClient:
    """Thread-safe; at most ``max_in_flight`` requests run at once.

    ``sleep`` is injectable so tests can record backoff delays without waiting.
    """

    def __init__(
        self,
        config: LlmEndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(config.max_in_flight)
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=config.base_url.rstrip("/"), timeout=config.timeout, headers=headers, transport=transport
        )
        self.delays: list[float] = []

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "LlmClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _delay(self, attempt: int, response: httpx.Response | None) -> float:
        wait = min(self.config.backoff_base * 2**attempt, self.config.backoff_max)
        if response is not None:
            try:
                wait = max(wait, float(response.headers.get("Retry-After", 0)))
            except ValueError:
                pass
        return wait

    def complete(self, messages: list[dict]) -> str:
        cfg = self.config
        payload = {"model": cfg.model, "messages": messages, "temperature": cfg.temperature}
        attempts = cfg.max_retries + 1
        last_status, last_body = None, ""
        with self._gate:
            for attempt in range(attempts):
                response = None
                try:
                    response = self._http.post("/chat/completions", json=payload)
                except httpx.TimeoutException as exc:
                    last_status, last_body = None, f"timeout: {exc}"
                except httpx.TransportError as exc:
                    last_status, last_body = None, f"transport: {exc}"
                else:
                    if response.status_code < 300:
                        return _content(response, attempt + 1)
                    last_status, last_body = response.status_code, response.text
                    if response.status_code not in RETRY_STATUS:
                        raise LlmError("request rejected", last_status, last_body, attempt + 1)
                if attempt + 1 < attempts:
                    wait = self._delay(attempt, response)
                    self.delays.append(wait)
                    self._sleep(wait)
        raise LlmError(f"gave up after {attempts} attempts", last_status, last_body, attempts)


def _content(response: httpx.Response, attempts: int) -> str:
    try:
        body = response.json()
    except ValueError:
        raise LlmError("reply is not JSON", response.status_code, response.text, attempts) from None
    try:
        text = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise LlmError("reply has no choices[0].message.content", response.status_code, response.text, attempts) from None
    if not isinstance(text, str):
        raise LlmError("reply content is not a string", response.status_code, response.text, attempts)
    return text


def llm_client_complete(messages: list[dict], config: LlmEndpointConfig, **client_kw) -> str:
    with LlmClient(config, **client_kw) as client:
        return client.complete(messages)
