"""Pluggable text-completion backends.

Every backend exposes ``name`` and ``complete(prompt, *, temperature,
max_tokens, seed)``; transport problems raise :class:`TransportError`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Callable, Protocol

import httpx
import numpy as np

logger = logging.getLogger(__name__)


class TransportError(RuntimeError):
    """The backend could not produce a completion (network, HTTP, missing recording)."""


class LlmBackend(Protocol):
    name: str

    def complete(self, prompt: str, *, temperature: float = 0.7, max_tokens: int = 200, seed: int | None = None) -> str:
        ...


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def complete_with_retries(
    backend: LlmBackend,
    prompt: str,
    *,
    temperature: float = 0.7,
    max_tokens: int = 200,
    seed: int | None = None,
    attempts: int = 3,
    backoff_s: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Call ``backend`` retrying transport errors only, with exponential backoff."""
    last: TransportError | None = None
    for attempt in range(attempts):
        try:
            return backend.complete(prompt, temperature=temperature, max_tokens=max_tokens, seed=seed)
        except TransportError as exc:
            last = exc
            logger.warning("backend %s attempt %d/%d failed: %s", backend.name, attempt + 1, attempts, exc)
            if attempt + 1 < attempts and backoff_s > 0:
                sleep(backoff_s * 2**attempt)
    raise TransportError(f"{backend.name}: {attempts} attempts failed: {last}") from last


_CAND_LINE = re.compile(r"^(\d+) \| ", re.M)
_TOPK = re.compile(r"top-(\d+) recommendations")


class MockBackend:
    """Deterministic stand-in for a chat model.

    Output depends only on ``(prompt, seed)``. Re-rank prompts are answered with
    a JSON array of ``k`` candidate ids; ``mode`` chooses ``echo`` (retrieval
    order), ``reverse`` or ``shuffle`` (seeded permutation). Any other prompt
    gets a short text stamped with a digest of the prompt.
    """

    def __init__(self, mode: str = "shuffle", name: str = "mock"):
        if mode not in ("echo", "reverse", "shuffle"):
            raise ValueError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self.name = name
        self.calls = 0
        self._lock = threading.Lock()

    def digest(self, prompt: str, seed: int | None) -> str:
        return prompt_hash(f"{seed}\x00{prompt}")[:12]

    def complete(self, prompt: str, *, temperature: float = 0.7, max_tokens: int = 200, seed: int | None = None) -> str:
        with self._lock:
            self.calls += 1
        digest = self.digest(prompt, seed)
        topk = _TOPK.search(prompt)
        if topk and "CANDIDATES:" in prompt:
            k = int(topk.group(1))
            block = prompt.split("CANDIDATES:", 1)[1]
            ids = [int(m) for m in _CAND_LINE.findall(block)]
            if self.mode == "reverse":
                ids = ids[::-1]
            elif self.mode == "shuffle":
                rng = np.random.default_rng(int(digest, 16))
                ids = [ids[j] for j in rng.permutation(len(ids))]
            ids = ids[:k]
            if '"why"' in prompt:
                return json.dumps([{"id": i, "why": f"mock rationale {digest}"} for i in ids])
            return json.dumps(ids)
        if "write a short paragraph" in prompt:
            title = prompt.split("Given the title ", 1)[-1].split(" and genres ", 1)[0].split(", write", 1)[0]
            return (
                f"{title} follows its characters through a story whose plot, themes and style "
                f"are summarised here by a deterministic mock [mock:{digest}]."
            )
        return f"Taste synopsis [mock:{digest}]: prefers the genres and titles listed in the history."


class FailingBackend:
    """Always raises :class:`TransportError`; used to exercise fallbacks."""

    name = "failing"

    def __init__(self):
        self.calls = 0

    def complete(self, prompt: str, *, temperature: float = 0.7, max_tokens: int = 200, seed: int | None = None) -> str:
        self.calls += 1
        raise TransportError("backend configured to fail")


class ReplayBackend:
    """Serves recorded completions keyed by SHA-256 of the prompt.

    The store is JSON Lines of ``{"prompt_hash": <hex>, "response": <string>}``.
    """

    name = "replay"

    def __init__(self, path: str | Path | None = None, records: dict[str, str] | None = None):
        self.records: dict[str, str] = dict(records or {})
        if path is not None:
            with Path(path).open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        obj = json.loads(line)
                        self.records[obj["prompt_hash"]] = obj["response"]

    def complete(self, prompt: str, *, temperature: float = 0.7, max_tokens: int = 200, seed: int | None = None) -> str:
        try:
            return self.records[prompt_hash(prompt)]
        except KeyError:
            raise TransportError(f"no recording for prompt {prompt_hash(prompt)[:12]}") from None


class RecordingBackend:
    """Wraps a backend and keeps every successful completion for later replay."""

    def __init__(self, inner: LlmBackend):
        self.inner = inner
        self.name = f"recording({inner.name})"
        self.records: dict[str, str] = {}
        self._lock = threading.Lock()

    def complete(self, prompt: str, *, temperature: float = 0.7, max_tokens: int = 200, seed: int | None = None) -> str:
        text = self.inner.complete(prompt, temperature=temperature, max_tokens=max_tokens, seed=seed)
        with self._lock:
            self.records[prompt_hash(prompt)] = text
        return text

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for h in sorted(self.records):
                fh.write(json.dumps({"prompt_hash": h, "response": self.records[h]}, ensure_ascii=False) + "\n")


class HttpBackend:
    """OpenAI-style ``/chat/completions`` client.

    The API key is read from the environment variable named by ``api_key_env``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str | None = None,
        timeout_s: float = 30.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.name = f"http:{model}"
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise TransportError(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, prompt: str, *, temperature: float = 0.7, max_tokens: int = 200, seed: int | None = None) -> str:
        body: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        if seed is not None:
            body["seed"] = seed
        try:
            resp = self._client.post(self.endpoint, json=body, headers=self._headers())
        except httpx.HTTPError as exc:
            raise TransportError(f"request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {exc}") from exc
        return content if isinstance(content, str) else ""
