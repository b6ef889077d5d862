"""Gateway client for chat, embedding and reranking models.

Wire protocol (JSON over HTTP, POST):

``/v1/chat/completions``
    request ``{"model", "messages": [{"role", "content"}], "temperature",
    "max_tokens", "template_id"?, "images"?: [str]}``; response ``{"choices": [{"message":
    {"role": "assistant", "content"}}]}``.
``/v1/embeddings``
    request ``{"model", "input": [str], "modality": "text"|"image",
    "dimensions"}``; response ``{"data": [{"index", "embedding": [float]}]}``.
``/v1/rerank``
    request ``{"model", "query", "documents": [str]}``; response
    ``{"results": [{"index", "relevance_score"}]}``.

The bearer token is read from the environment variable named in the config.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum

import httpx
import numpy as np

from .prompts import TemplateId, render_prompt
from .stub import StubModels

log = logging.getLogger(__name__)


class GatewayMode(str, Enum):
    REMOTE = "REMOTE"
    STUB = "STUB"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.upper() in cls.__members__:
            return cls[value.upper()]
        return None


class GatewayError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class GatewayTimeout(GatewayError):
    """No response in time, or the endpoint was unreachable, after all retries."""


class GatewayHTTPError(GatewayError):
    def __init__(self, message: str, status: int, attempts: int = 1):
        super().__init__(message, attempts)
        self.status = status


class GatewayResponseError(GatewayError):
    """The server answered 2xx with a body that does not follow the wire schema."""


@dataclass(frozen=True)
class GatewayConfig:
    endpoint_url: str = "http://127.0.0.1:8808"
    auth_token_env_var: str = "MMRAG_GATEWAY_TOKEN"
    timeout_ms: int = 30_000
    max_retries: int = 2
    max_concurrent_requests: int = 4
    mode: GatewayMode = GatewayMode.STUB
    stub_seed: int = 0
    backoff_ms: int = 200
    chat_model: str = "default"
    embed_model: str = "default"
    rerank_model: str = "default"

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", GatewayMode(self.mode))
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be at least 1")


_RETRY_STATUS = {408, 429, 500, 502, 503, 504}


class Gateway:
    """One object fronting every model the pipeline talks to.

    Safe to share between threads; in REMOTE mode at most
    ``max_concurrent_requests`` HTTP requests are in flight at once.
    """

    def __init__(self, config: GatewayConfig | None = None, *, text_dim: int = 64,
                 image_dim: int = 64, stub: StubModels | None = None):
        self.config = config or GatewayConfig()
        self.text_dim = text_dim
        self.image_dim = image_dim
        self._slots = threading.BoundedSemaphore(self.config.max_concurrent_requests)
        self._client: httpx.Client | None = None
        self.stub = stub
        if self.config.mode is GatewayMode.STUB and self.stub is None:
            self.stub = StubModels(self.config.stub_seed, text_dim, image_dim)

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def is_stub(self) -> bool:
        return self.config.mode is GatewayMode.STUB

    # -- transport ---------------------------------------------------------

    def _http(self) -> httpx.Client:
        if self._client is None:
            headers = {"Content-Type": "application/json"}
            token = os.environ.get(self.config.auth_token_env_var)
            if token:
                headers["Authorization"] = f"Bearer {token}"
            self._client = httpx.Client(
                base_url=self.config.endpoint_url.rstrip("/"),
                headers=headers,
                timeout=self.config.timeout_ms / 1000.0,
            )
        return self._client

    def _post(self, path: str, payload: dict) -> dict:
        attempts = self.config.max_retries + 1
        last: GatewayError | None = None
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.config.backoff_ms / 1000.0 * 2 ** (attempt - 1))
            try:
                with self._slots:
                    response = self._http().post(path, json=payload)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = GatewayTimeout(f"{path}: {type(exc).__name__}: {exc}", attempt + 1)
                log.warning("gateway attempt %d/%d failed: %s", attempt + 1, attempts, last)
                continue
            if response.status_code in _RETRY_STATUS:
                last = GatewayHTTPError(f"{path}: HTTP {response.status_code}",
                                        response.status_code, attempt + 1)
                log.warning("gateway attempt %d/%d failed: %s", attempt + 1, attempts, last)
                continue
            if not 200 <= response.status_code < 300:
                raise GatewayHTTPError(f"{path}: HTTP {response.status_code}: {response.text[:200]}",
                                       response.status_code, attempt + 1)
            try:
                return response.json()
            except ValueError as exc:
                raise GatewayResponseError(f"{path}: response is not JSON: {exc}",
                                           attempt + 1) from None
        assert last is not None
        raise last

    # -- model calls ---------------------------------------------------------

    def chat(self, messages: list[dict], temperature: float = 0.0, max_tokens: int = 512,
             template_id: TemplateId | str | None = None, images: list[str] | None = None) -> str:
        if self.is_stub:
            return self.stub.chat(messages, template_id)
        payload = {"model": self.config.chat_model, "messages": messages,
                   "temperature": temperature, "max_tokens": max_tokens}
        if template_id is not None:
            payload["template_id"] = TemplateId(template_id).value
        if images:
            payload["images"] = list(images)
        body = self._post("/v1/chat/completions", payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise GatewayResponseError("chat response lacks choices[0].message.content") from None
        if not isinstance(content, str):
            raise GatewayResponseError("chat content is not a string")
        return content

    def complete(self, template_id: TemplateId | str, variables: dict[str, str],
                 temperature: float = 0.0, max_tokens: int = 512,
                 images: list[str] | None = None) -> str:
        """Render a prompt template and run it through :meth:`chat`."""
        system, user = render_prompt(template_id, variables)
        messages = [{"role": "system", "content": system}, {"role": "user", "content": user}]
        return self.chat(messages, temperature, max_tokens, template_id, images)

    def _embed(self, inputs: list[str], modality: str, dim: int) -> list[np.ndarray]:
        body = self._post("/v1/embeddings", {"model": self.config.embed_model, "input": inputs,
                                             "modality": modality, "dimensions": dim})
        try:
            data = sorted(body["data"], key=lambda d: d["index"])
            vectors = [np.asarray(d["embedding"], dtype=np.float64) for d in data]
        except (KeyError, TypeError, ValueError):
            raise GatewayResponseError("embedding response does not match the wire schema") from None
        if len(vectors) != len(inputs) or any(v.shape != (dim,) for v in vectors):
            raise GatewayResponseError("embedding response has the wrong count or dimension")
        return vectors

    def embed_text(self, text: str) -> np.ndarray:
        if self.is_stub:
            return self.stub.embed_text(text, self.text_dim)
        return self._embed([text], "text", self.text_dim)[0]

    def embed_image(self, image_ref: str) -> np.ndarray:
        if self.is_stub:
            return self.stub.embed_image(image_ref, self.image_dim)
        return self._embed([image_ref], "image", self.image_dim)[0]

    def rerank(self, query: str, passages: list[str]) -> list[float]:
        if self.is_stub:
            return self.stub.rerank(query, passages)
        body = self._post("/v1/rerank", {"model": self.config.rerank_model, "query": query,
                                         "documents": passages})
        try:
            scores = {int(r["index"]): float(r["relevance_score"]) for r in body["results"]}
            return [scores[i] for i in range(len(passages))]
        except (KeyError, TypeError, ValueError):
            raise GatewayResponseError("rerank response does not match the wire schema") from None
