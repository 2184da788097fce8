"""Client for an OpenAI-compatible chat-completions endpoint."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import httpx

from .prompts import PromptContext

log = logging.getLogger(__name__)

TOKEN_ENV = "NAVMARL_ORACLE_TOKEN"


class OracleUnavailable(RuntimeError):
    """Raised once every attempt allowed by the retry policy has failed."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class OracleEndpoint:
    base_url: str
    model: str
    timeout: float = 60.0
    retries: int = 2
    temperature: float = 0.0
    backoff: float = 1.0  # seconds before the first retry, doubled after each
    token_env: str = TOKEN_ENV

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError(f"timeout must be positive, got {self.timeout}")
        if self.retries < 0:
            raise ValueError(f"retries must be >= 0, got {self.retries}")

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/v1/chat/completions"


class HttpOracle:
    kind = "http"

    def __init__(self, endpoint: OracleEndpoint, client: httpx.Client | None = None,
                 sleep=time.sleep):
        self.endpoint = endpoint
        self.client = client or httpx.Client(timeout=endpoint.timeout)
        self.sleep = sleep
        self.calls = 0
        self.last_inference_s = 0.0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.endpoint.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def generate(self, context: PromptContext) -> str:
        return llm_generate(self, context)


def llm_generate(oracle: HttpOracle, context: PromptContext) -> str:
    """POST the context's messages and return the assistant text.

    Transport errors, timeouts, non-2xx statuses and malformed bodies are
    retried ``endpoint.retries`` times before ``OracleUnavailable``.
    """
    ep = oracle.endpoint
    payload = {"model": ep.model, "messages": context.messages(), "temperature": ep.temperature}
    attempts = ep.retries + 1
    last_error = ""
    t0 = time.perf_counter()
    for attempt in range(attempts):
        if attempt:
            oracle.sleep(ep.backoff * 2 ** (attempt - 1))
        oracle.calls += 1
        try:
            resp = oracle.client.post(ep.url, json=payload, headers=oracle._headers(), timeout=ep.timeout)
            resp.raise_for_status()
            text = resp.json()["choices"][0]["message"]["content"]
            if not isinstance(text, str):
                raise TypeError("message content is not a string")
        except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
            last_error = f"{type(exc).__name__}: {exc}"
            log.warning("oracle attempt %d/%d failed: %s", attempt + 1, attempts, last_error)
            continue
        oracle.last_inference_s = time.perf_counter() - t0
        return text
    oracle.last_inference_s = time.perf_counter() - t0
    raise OracleUnavailable(f"oracle unavailable after {attempts} attempts ({last_error})", attempts)
