"""Chat-style LLM clients: an HTTP-backed client and a deterministic replay stub.

Both expose ``send(system_role, user_prompt) -> str`` and are safe to share
across concurrent extraction fan-out (the HTTP client rides one pooled
session; the replay map is read-only after load).  The replay stub maps
SHA-256 of the full prompt to a canned response and is the client used by the
test suite and by any reproducible run.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Protocol

import requests


class LlmError(Exception):
    pass


class LlmTransportError(LlmError):
    """Transport-level failure (network, HTTP status, missing replay entry). Retryable."""


class LlmClient(Protocol):
    def send(self, system_role: str, user_prompt: str) -> str: ...


@dataclass(frozen=True)
class LlmClientConfig:
    endpoint: str
    model: str
    api_key_env: str = "ACTIVEGROUND_API_KEY"
    temperature: float = 0.0
    timeout_s: float = 30.0

    @classmethod
    def load(cls, path: str) -> "LlmClientConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown client config keys: {unknown}")
        return cls(**raw)


class HttpLlmClient:
    """Minimal chat-completions client; the API key is read from the environment."""

    def __init__(self, config: LlmClientConfig, session: requests.Session | None = None):
        self.config = config
        self._session = session or requests.Session()

    def send(self, system_role: str, user_prompt: str) -> str:
        api_key = os.environ.get(self.config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": system_role},
                {"role": "user", "content": user_prompt},
            ],
        }
        try:
            resp = self._session.post(self.config.endpoint, json=payload,
                                      headers=headers, timeout=self.config.timeout_s)
        except requests.RequestException as exc:
            raise LlmTransportError(f"request to {self.config.endpoint} failed: {exc}") from exc
        if resp.status_code != 200:
            raise LlmTransportError(
                f"client returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            return body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LlmTransportError(f"malformed client response envelope: {exc}") from exc


def replay_key(system_role: str, user_prompt: str) -> str:
    """SHA-256 key under which a replayed response is stored.

    The system role is length-prefixed so (role, prompt) pairs can never
    collide across the boundary.
    """
    system = system_role.encode("utf-8")
    digest = hashlib.sha256()
    digest.update(str(len(system)).encode("ascii"))
    digest.update(b":")
    digest.update(system)
    digest.update(user_prompt.encode("utf-8"))
    return digest.hexdigest()


class ReplayLlmClient:
    """Deterministic stub: identical input yields the identical stored response.

    The response map is read-only after construction; missing entries raise a
    transport error so pipelines treat an incomplete fixture like a dead wire.
    """

    def __init__(self, responses: dict[str, str]):
        self._responses = dict(responses)
        self.calls = 0

    @classmethod
    def from_file(cls, path: str) -> "ReplayLlmClient":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in raw.items()):
            raise ValueError(f"replay map in {path} must be a flat string-to-string object")
        return cls(raw)

    def send(self, system_role: str, user_prompt: str) -> str:
        self.calls += 1
        key = replay_key(system_role, user_prompt)
        if key not in self._responses:
            raise LlmTransportError(f"no replayed response for prompt hash {key[:12]}…")
        return self._responses[key]


def build_replay_map(entries: list[tuple[str, str, str]]) -> dict[str, str]:
    """Hash (system_role, user_prompt, response) triples into a replay map."""
    return {replay_key(system, prompt): response for system, prompt, response in entries}
