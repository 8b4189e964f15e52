"""Pluggable completion backends: deterministic mocks and an HTTP client.

The wire format is a JSON POST ``{model, prompt, max_tokens, stop,
temperature}`` with temperature fixed at 0; the server answers
``{"completion": "..."}``. Every backend truncates its output at the stop
string (inclusive) and mock backends cap output length by whitespace
tokenization. A logging wrapper records each exchange as one JSON line so
prompts are recoverable byte-for-byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence, Union

import requests

__all__ = ["LLMBackend", "BackendError", "TransportError", "MalformedResponse",
           "OracleBackend", "ScriptedBackend", "EchoBackend", "HTTPBackend",
           "LoggingBackend", "classify_exact_match", "apply_stop"]


class BackendError(RuntimeError):
    pass


class TransportError(BackendError):
    """HTTP transport kept failing after the configured retries."""


class MalformedResponse(BackendError):
    """The server answered, but not with the documented schema."""

    def __init__(self, message: str, payload: bytes):
        super().__init__(f"{message}; raw payload: {payload[:200]!r}")
        self.payload = payload


class LLMBackend(Protocol):
    def complete(self, prompt: str, max_tokens: int, stop: Optional[str] = None) -> str: ...


def apply_stop(text: str, stop: Optional[str]) -> str:
    """Truncate at the stop string, keeping it."""
    if stop:
        idx = text.find(stop)
        if idx >= 0:
            return text[: idx + len(stop)]
    return text


def _check_request(prompt: str, max_tokens: int) -> None:
    if not prompt:
        raise BackendError("complete: prompt must be non-empty")
    if max_tokens < 1:
        raise BackendError(f"complete: max_tokens must be >= 1, got {max_tokens}")


def _cap_words(text: str, max_tokens: int) -> str:
    words = text.split(" ")
    return " ".join(words[:max_tokens]) if len(words) > max_tokens else text


@dataclass
class OracleBackend:
    """Plays back a prepared answer per request position; the test oracle."""

    answers: Sequence[str]
    calls: int = 0

    def complete(self, prompt: str, max_tokens: int, stop: Optional[str] = None) -> str:
        _check_request(prompt, max_tokens)
        if self.calls >= len(self.answers):
            raise BackendError(f"OracleBackend: no answer recorded for call {self.calls}")
        out = self.answers[self.calls]
        self.calls += 1
        return apply_stop(_cap_words(out, max_tokens), stop)


@dataclass
class ScriptedBackend:
    """Maps exact prompts to canned completions, with an optional default."""

    responses: dict[str, str]
    default: Optional[str] = None
    calls: int = 0
    prompts: list = field(default_factory=list)

    def complete(self, prompt: str, max_tokens: int, stop: Optional[str] = None) -> str:
        _check_request(prompt, max_tokens)
        self.calls += 1
        self.prompts.append(prompt)
        if prompt in self.responses:
            out = self.responses[prompt]
        elif self.default is not None:
            out = self.default
        else:
            raise BackendError("ScriptedBackend: no response scripted for this prompt")
        return apply_stop(_cap_words(out, max_tokens), stop)


@dataclass
class EchoBackend:
    """Returns a fixed string; the simplest deterministic backend."""

    text: str
    calls: int = 0

    def complete(self, prompt: str, max_tokens: int, stop: Optional[str] = None) -> str:
        _check_request(prompt, max_tokens)
        self.calls += 1
        return apply_stop(_cap_words(self.text, max_tokens), stop)


class HTTPBackend:
    """JSON-over-HTTP completion client with capped exponential backoff."""

    def __init__(
        self,
        endpoint: str,
        model: str = "default",
        auth_token: Optional[str] = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff_base: float = 0.25,
        backoff_cap: float = 4.0,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._sleep = sleep
        self._session = requests.Session()
        if auth_token:
            self._session.headers["Authorization"] = f"Bearer {auth_token}"

    def complete(self, prompt: str, max_tokens: int, stop: Optional[str] = None) -> str:
        _check_request(prompt, max_tokens)
        body = {
            "model": self.model,
            "prompt": prompt,
            "max_tokens": max_tokens,
            "stop": stop,
            "temperature": 0,
        }
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(min(self.backoff_base * (2 ** (attempt - 1)), self.backoff_cap))
            try:
                resp = self._session.post(self.endpoint, json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = BackendError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise BackendError(f"completion request rejected: HTTP {resp.status_code}")
            try:
                doc = resp.json()
                text = doc["completion"]
            except (ValueError, KeyError, TypeError):
                raise MalformedResponse("response is not {'completion': str}", resp.content) from None
            if not isinstance(text, str):
                raise MalformedResponse("completion field is not a string", resp.content)
            return apply_stop(text, stop)
        raise TransportError(f"completion request failed after {self.max_retries + 1} attempts: {last_error}")


class LoggingBackend:
    """Wraps a backend, appending one JSON line per exchange to a wire log."""

    def __init__(self, inner, path: Union[str, Path]):
        self.inner = inner
        self.path = Path(path)

    def complete(self, prompt: str, max_tokens: int, stop: Optional[str] = None) -> str:
        out = self.inner.complete(prompt, max_tokens=max_tokens, stop=stop)
        record = {"prompt": prompt, "max_tokens": max_tokens, "stop": stop, "completion": out}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        return out


def classify_exact_match(generated: str, label: str) -> bool:
    """Whitespace-trimmed, case-insensitive equality of the full strings."""
    return generated.strip().casefold() == label.strip().casefold()
