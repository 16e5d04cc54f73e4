"""Chat-completions clients: HTTP endpoint and in-process scripted playback."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import httpx

from voiplace.errors import ToolError


class LLMEndpointError(ToolError):
    """The endpoint could not be reached or did not speak the wire protocol."""


@dataclass(frozen=True)
class EndpointConfig:
    url: str = "http://127.0.0.1:8000"
    model: str = "default"
    api_key: Optional[str] = None
    temperature: float = 0.0
    timeout: float = 120.0

    @classmethod
    def from_env(cls, url: Optional[str] = None, model: Optional[str] = None,
                 api_key: Optional[str] = None) -> "EndpointConfig":
        return cls(url=url or os.environ.get("VOIPLACE_LLM_URL", cls.url),
                   model=model or os.environ.get("VOIPLACE_LLM_MODEL", cls.model),
                   api_key=api_key or os.environ.get("VOIPLACE_LLM_KEY") or None)

    def to_json(self) -> dict:
        # credentials never enter artifacts
        return {"url": self.url, "model": self.model, "temperature": self.temperature,
                "auth": self.api_key is not None}


class ChatClient:
    """Minimal OpenAI-compatible ``/v1/chat/completions`` client."""

    def __init__(self, config: EndpointConfig):
        self.config = config

    @property
    def provenance(self) -> str:
        return f"{self.config.url} model={self.config.model}"

    def chat(self, messages: Sequence[Dict[str, str]]) -> str:
        url = self.config.url.rstrip("/") + "/v1/chat/completions"
        payload = {"model": self.config.model, "messages": list(messages),
                   "temperature": self.config.temperature}
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            resp = httpx.post(url, json=payload, headers=headers, timeout=self.config.timeout)
        except httpx.HTTPError as exc:
            raise LLMEndpointError(f"LLM endpoint {url} unreachable: {exc}") from exc
        if resp.status_code >= 400:
            raise LLMEndpointError(f"LLM endpoint {url} returned HTTP {resp.status_code}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LLMEndpointError(f"LLM endpoint {url} reply is not a chat completion: {exc}") from exc
        return content if isinstance(content, str) else ""


@dataclass
class ResponseScript:
    """Ordered canned replies; each item is text or ``{"status": code}`` for an HTTP failure."""

    responses: List[Union[str, dict]]
    on_exhausted: str = "repeat_last"

    @classmethod
    def load(cls, source: Union[str, Path, dict, list]) -> "ResponseScript":
        if isinstance(source, (str, Path)):
            source = json.loads(Path(source).read_text(encoding="utf-8"))
        if isinstance(source, list):
            return cls(list(source))
        return cls(list(source["responses"]), source.get("on_exhausted", "repeat_last"))

    def item(self, i: int) -> Union[str, dict]:
        if i < len(self.responses):
            return self.responses[i]
        if self.on_exhausted == "repeat_last" and self.responses:
            return self.responses[-1]
        return {"status": 500}


class ScriptedClient:
    """In-process stand-in for an endpoint: plays back a response script."""

    def __init__(self, script: Union[ResponseScript, Sequence[Union[str, dict]]], model: str = "scripted"):
        self.script = script if isinstance(script, ResponseScript) else ResponseScript(list(script))
        self.model = model
        self.requests: List[List[Dict[str, str]]] = []

    @property
    def provenance(self) -> str:
        return f"scripted model={self.model}"

    def chat(self, messages: Sequence[Dict[str, str]]) -> str:
        item = self.script.item(len(self.requests))
        self.requests.append([dict(m) for m in messages])
        if isinstance(item, dict):
            if "status" in item:
                raise LLMEndpointError(f"scripted endpoint failure (HTTP {item['status']})")
            return str(item.get("content", ""))
        return item
