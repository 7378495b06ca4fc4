"""Transports behind the gateway: an HTTP chat-completions client and a scripted responder."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx

from .records import GatewayError, Refusal, ScriptMissing, WireError

ENV_ENDPOINT = "IPERCEPT_VLM_ENDPOINT"
ENV_API_KEY = "IPERCEPT_VLM_API_KEY"
ENV_MODEL = "IPERCEPT_VLM_MODEL"


@dataclass(frozen=True)
class ChatTurn:
    role: str
    text: str
    images: tuple[str, ...] = ()  # base64 PNG payloads

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role {self.role!r}")
        object.__setattr__(self, "images", tuple(self.images))
        if self.role == "assistant" and self.images:
            raise ValueError("assistant turns carry no images")


@dataclass(frozen=True)
class VlmConfig:
    endpoint: str = ""
    model: str = ""
    api_key: str = ""
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 2
    backoff: float = 0.5

    @classmethod
    def from_env(cls, **overrides) -> VlmConfig:
        kw = {
            "endpoint": os.environ.get(ENV_ENDPOINT, ""),
            "api_key": os.environ.get(ENV_API_KEY, ""),
            "model": os.environ.get(ENV_MODEL, ""),
        }
        kw.update(overrides)
        return cls(**kw)


class Responder(Protocol):
    def complete(self, turns: Sequence[ChatTurn], op: str, step: int, attempt: int) -> str: ...


def _chat_url(endpoint: str) -> str:
    e = endpoint.rstrip("/")
    return e if e.endswith("/chat/completions") else e + "/chat/completions"


def build_request(cfg: VlmConfig, turns: Sequence[ChatTurn]) -> bytes:
    """Serialise a chat-completions request body."""
    messages = []
    for t in turns:
        if t.images:
            content = [{"type": "text", "text": t.text}]
            content += [{"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b}"}} for b in t.images]
        else:
            content = t.text
        messages.append({"role": t.role, "content": content})
    body = {"model": cfg.model, "temperature": cfg.temperature, "messages": messages}
    return json.dumps(body, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def _reply_text(payload: dict) -> str:
    try:
        choice = payload["choices"][0]
        msg = choice["message"]
    except (KeyError, IndexError, TypeError):
        raise WireError("response has no choices[0].message") from None
    if msg.get("refusal") or choice.get("finish_reason") == "content_filter":
        raise Refusal(str(msg.get("refusal") or "content filtered"))
    content = msg.get("content")
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise WireError("response message has no text content")
    return content


@dataclass
class WireClient:
    """OpenAI-style chat-completions over HTTP."""

    cfg: VlmConfig
    transport: httpx.BaseTransport | None = None

    def complete(self, turns: Sequence[ChatTurn], op: str = "", step: int = 0, attempt: int = 0) -> str:
        if not self.cfg.endpoint:
            raise WireError(f"no endpoint configured (set {ENV_ENDPOINT})")
        body = build_request(self.cfg, turns)
        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key:
            headers["Authorization"] = f"Bearer {self.cfg.api_key}"
        last = "no attempt made"
        with httpx.Client(timeout=self.cfg.timeout, transport=self.transport) as http:
            for k in range(self.cfg.max_retries + 1):
                if k and self.cfg.backoff > 0:
                    time.sleep(min(self.cfg.backoff * 2 ** (k - 1), 8.0))
                try:
                    resp = http.post(_chat_url(self.cfg.endpoint), content=body, headers=headers)
                except httpx.HTTPError as e:
                    last = f"transport error: {e}"
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code != 200:
                    raise WireError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    payload = resp.json()
                except ValueError:
                    raise WireError("response body is not JSON") from None
                return _reply_text(payload)
        raise WireError(f"request failed after {self.cfg.max_retries + 1} attempts ({last})")


@dataclass(frozen=True)
class ScriptEntry:
    step: int | None  # None matches any step
    op: str
    reply: str
    attempt: int | None = None


@dataclass
class ScriptedResponder:
    """Replays canned replies keyed by (step, op[, attempt]).

    An entry without ``attempt`` answers every attempt of its (step, op);
    ``"step": "*"`` answers any step. Lookups with no entry raise
    :class:`ScriptMissing`.
    """

    entries: list[ScriptEntry]
    calls: list[tuple[int, str, int, tuple[ChatTurn, ...]]] = field(default_factory=list)

    @classmethod
    def from_list(cls, items: list[dict]) -> ScriptedResponder:
        entries = []
        for it in items:
            try:
                step = None if it["step"] == "*" else int(it["step"])
                entries.append(ScriptEntry(step, str(it["op"]), str(it["reply"]), it.get("attempt")))
            except (KeyError, TypeError, ValueError) as e:
                raise GatewayError(f"bad script entry {it!r}: {e}") from None
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> ScriptedResponder:
        try:
            items = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise GatewayError(f"script file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise GatewayError(f"script file {path} is not valid JSON: {e}") from None
        if not isinstance(items, list):
            raise GatewayError("script file must hold a JSON array")
        return cls.from_list(items)

    def lookup(self, op: str, step: int, attempt: int) -> str:
        ranked = []
        for e in self.entries:
            if e.op != op or (e.step is not None and e.step != step):
                continue
            if e.attempt is not None and e.attempt != attempt:
                continue
            ranked.append((e.step is None, e.attempt is None, e))
        if not ranked:
            raise ScriptMissing(f"no scripted reply for step {step}, op {op!r}")
        ranked.sort(key=lambda r: (r[0], r[1]))
        return ranked[0][2].reply

    def complete(self, turns: Sequence[ChatTurn], op: str, step: int, attempt: int = 0) -> str:
        self.calls.append((step, op, attempt, tuple(turns)))
        return self.lookup(op, step, attempt)
