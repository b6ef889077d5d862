"""Deterministic stand-ins for the embedding, reranking and chat models.

Embeddings are bag-of-tokens: every token is hashed with a keyed BLAKE2b
(key = stub seed) into a seed for a PCG64 stream, expanded to the target
dimension, summed over tokens and L2-normalized. Inputs that share tokens get
correlated vectors, so retrieval over synthetic fixtures behaves sensibly,
and every output is a pure function of ``(seed, input)``.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

import numpy as np

from .prompts import TemplateId, identify_template

_TOKEN = re.compile(r"[a-z0-9_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@lru_cache(maxsize=65536)
def _token_vector(seed: int, namespace: str, token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(
        f"{namespace}\x00{token}".encode("utf-8"),
        key=str(seed).encode("ascii"),
        digest_size=16,
    ).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    vec = rng.standard_normal(dim)
    vec.setflags(write=False)
    return vec


def hash_embedding(seed: int, namespace: str, text: str, dim: int) -> np.ndarray:
    tokens = tokenize(text) or [text]
    total = np.zeros(dim)
    for token in tokens:
        total += _token_vector(seed, namespace, token, dim)
    norm = np.linalg.norm(total)
    if norm == 0.0:  # only reachable if token vectors cancel exactly
        raise ValueError(f"degenerate stub embedding for {text!r}")
    return total / norm


class StubModels:
    """Pure-function model backend shared by the in-process STUB mode and the stub server."""

    def __init__(self, seed: int = 0, text_dim: int = 64, image_dim: int = 64,
                 scenarios: dict[TemplateId, Callable[[str, str], str]] | None = None):
        self.seed = seed
        self.text_dim = text_dim
        self.image_dim = image_dim
        self.scenarios = dict(DEFAULT_SCENARIOS)
        if scenarios:
            self.scenarios.update(scenarios)

    def embed_text(self, text: str, dim: int | None = None) -> np.ndarray:
        return hash_embedding(self.seed, "text", text, dim or self.text_dim)

    def embed_image(self, image_ref: str, dim: int | None = None) -> np.ndarray:
        return hash_embedding(self.seed, "image", image_ref, dim or self.image_dim)

    def rerank(self, query: str, passages: list[str]) -> list[float]:
        q = hash_embedding(self.seed, "rerank", query, self.text_dim)
        return [float(np.dot(q, hash_embedding(self.seed, "rerank", p, self.text_dim)))
                for p in passages]

    def chat(self, messages: list[dict], template_id: TemplateId | str | None = None) -> str:
        system = next((m["content"] for m in messages if m.get("role") == "system"), "")
        user = next((m["content"] for m in reversed(messages) if m.get("role") == "user"), "")
        tid = TemplateId(template_id) if template_id else identify_template(system)
        handler = self.scenarios.get(tid) if tid else None
        if handler is None:
            return "stub response"
        return handler(system, user)


# -- canned chat scenarios ----------------------------------------------------

def _field(user: str, label: str, stop: str | None = None) -> str:
    start = user.find(label)
    if start < 0:
        return ""
    start += len(label)
    end = user.find(stop, start) if stop else -1
    return user[start:end if end >= 0 else None].strip()


def _stub_refiner(system: str, user: str) -> str:
    query = _field(user, "Here's the user query:", "\nAssistant:")
    return ("<think>The question refers to the entity shown in the image.</think>"
            f"<answer>{json.dumps({'query': query})}</answer>")


def _content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if len(t) >= 4]


def _stub_inspector(system: str, user: str) -> str:
    question = _field(user, "Question:", "\nRetrieved Context:")
    context = set(tokenize(_field(user, "Retrieved Context:")))
    wanted = _content_tokens(question)
    overlap = sum(t in context for t in wanted) / len(wanted) if wanted else 0.0
    if overlap >= 0.5:
        return '{"pass": "true"}'
    guess = wanted[-1] if wanted else "unknown"
    return json.dumps({"pass": "false", "answer": guess})


def _stub_generator(system: str, user: str) -> str:
    context = _field(user, "Context:", "\nQuestion:")
    sentence = context.split(". ")[0].strip().rstrip(".")
    return sentence or "unknown"


def _stub_summarizer(system: str, user: str) -> str:
    words = _field(user, "Content:", "\nProvide a concise summary:").split()
    return "Summary: " + " ".join(words[:32])


def _stub_expansion(system: str, user: str) -> str:
    answer = _field(user, "Original Answer:")
    return json.dumps({"expanded_answer": f"The answer is {answer}."})


def _stub_caption(system: str, user: str) -> str:
    query = _field(user, "Here's the user query:")
    return json.dumps({"caption": "an image", "query": query})


DEFAULT_SCENARIOS: dict[TemplateId, Callable[[str, str], str]] = {
    TemplateId.REFINER: _stub_refiner,
    TemplateId.INSPECTOR: _stub_inspector,
    TemplateId.GENERATOR_EVQA: _stub_generator,
    TemplateId.GENERATOR_INFOSEEK: _stub_generator,
    TemplateId.SUMMARIZER: _stub_summarizer,
    TemplateId.ANSWER_EXPANSION: _stub_expansion,
    TemplateId.CAPTION_EXPANSION: _stub_caption,
}


# -- HTTP server --------------------------------------------------------------

class StubServer(ThreadingHTTPServer):
    """Serves :class:`StubModels` over the gateway wire protocol.

    ``delay_ms`` holds each request open so concurrency is observable through
    ``GET /v1/stats``; ``fail_first`` answers that many requests with 503 to
    exercise client retries.
    """

    daemon_threads = True

    def __init__(self, address, models: StubModels, delay_ms: int = 0, fail_first: int = 0,
                 auth_token: str | None = None):
        super().__init__(address, _StubHandler)
        self.models = models
        self.delay_ms = delay_ms
        self.auth_token = auth_token
        self._lock = threading.Lock()
        self._remaining_failures = fail_first
        self.in_flight = 0
        self.max_in_flight = 0
        self.request_count = 0

    def enter(self) -> bool:
        with self._lock:
            self.request_count += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            if self._remaining_failures > 0:
                self._remaining_failures -= 1
                return False
            return True

    def leave(self) -> None:
        with self._lock:
            self.in_flight -= 1

    def stats(self) -> dict:
        with self._lock:
            return {"requests": self.request_count, "in_flight": self.in_flight,
                    "max_in_flight": self.max_in_flight}


class _StubHandler(BaseHTTPRequestHandler):
    server: StubServer
    protocol_version = "HTTP/1.1"

    def log_message(self, format, *args):  # silence default stderr logging
        pass

    def _send(self, status: int, body: dict) -> None:
        raw = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self):
        if self.path == "/v1/stats":
            self._send(200, self.server.stats())
        elif self.path == "/health":
            self._send(200, {"status": "ok"})
        else:
            self._send(404, {"error": {"message": f"no route {self.path}"}})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        token = self.server.auth_token
        if token and self.headers.get("Authorization") != f"Bearer {token}":
            self._send(401, {"error": {"message": "unauthorized"}})
            return
        ok = self.server.enter()
        try:
            if self.server.delay_ms:
                time.sleep(self.server.delay_ms / 1000.0)
            if not ok:
                self._send(503, {"error": {"message": "injected failure"}})
                return
            try:
                body = json.loads(raw or b"{}")
                status, reply = self._route(body)
            except (ValueError, KeyError, TypeError) as exc:
                status, reply = 400, {"error": {"message": f"bad request: {exc}"}}
            self._send(status, reply)
        finally:
            self.server.leave()

    def _route(self, body: dict) -> tuple[int, dict]:
        models = self.server.models
        if self.path == "/v1/chat/completions":
            content = models.chat(body["messages"], body.get("template_id"))
            return 200, {
                "object": "chat.completion",
                "model": body.get("model", "stub"),
                "choices": [{"index": 0, "finish_reason": "stop",
                             "message": {"role": "assistant", "content": content}}],
            }
        if self.path == "/v1/embeddings":
            inputs = body["input"]
            if isinstance(inputs, str):
                inputs = [inputs]
            modality = body.get("modality", "text")
            dim = body.get("dimensions")
            embed = models.embed_image if modality == "image" else models.embed_text
            data = [{"object": "embedding", "index": i, "embedding": embed(x, dim).tolist()}
                    for i, x in enumerate(inputs)]
            return 200, {"object": "list", "model": body.get("model", "stub"), "data": data}
        if self.path == "/v1/rerank":
            scores = models.rerank(body["query"], body["documents"])
            return 200, {"results": [{"index": i, "relevance_score": s}
                                     for i, s in enumerate(scores)]}
        return 404, {"error": {"message": f"no route {self.path}"}}


def start_stub_server(host: str = "127.0.0.1", port: int = 0, models: StubModels | None = None,
                      **kwargs) -> tuple[StubServer, threading.Thread]:
    """Start a stub server on a background thread; ``port=0`` picks a free port."""
    server = StubServer((host, port), models or StubModels(), **kwargs)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
