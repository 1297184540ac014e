"""Pluggable chat-completion backends and the versioned prompt-template catalog.

The mock backend is a fixture table keyed by a cryptographic hash of the
normalized prompt, so any drift in a template or in prompt assembly breaks
tests loudly instead of silently changing behavior. The remote backend
speaks the de-facto chat-completions JSON wire format.
"""

from __future__ import annotations

import hashlib
import json
import os
import string
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import httpx

try:
    from importlib.resources import files as _resource_files
except ImportError:  # pragma: no cover
    from importlib_resources import files as _resource_files


class BackendError(RuntimeError):
    """Completion failed."""


class TransportError(BackendError):
    """Network-level failure talking to a remote backend."""


class FixtureMissingError(BackendError):
    """The mock has no fixture for a prompt and no registered default."""


class TemplateError(ValueError):
    """Template file or slot binding problem."""


@dataclass
class CompletionParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None


def normalize_prompt(prompt: str) -> str:
    return "\n".join(line.rstrip() for line in prompt.strip().splitlines())


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(normalize_prompt(prompt).encode("utf-8")).hexdigest()


class MockBackend:
    """Deterministic backend: fixture table keyed by prompt hash, with an
    optional default (a string or a callable of the prompt)."""

    kind = "mock"

    def __init__(
        self,
        fixtures: dict[str, str] | None = None,
        default: str | Callable[[str], str] | None = None,
    ):
        self.fixtures = dict(fixtures or {})
        self.default = default
        self.calls = 0

    def add(self, prompt: str, response: str) -> str:
        key = prompt_hash(prompt)
        self.fixtures[key] = response
        return key

    def complete(self, prompt: str, params: CompletionParams | None = None) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self.calls += 1
        key = prompt_hash(prompt)
        if key in self.fixtures:
            return self.fixtures[key]
        if self.default is not None:
            return self.default(prompt) if callable(self.default) else self.default
        raise FixtureMissingError(f"no mock fixture for prompt hash {key}")

    @classmethod
    def from_jsonl(cls, path: str | Path, default: str | None = None) -> "MockBackend":
        fixtures = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                fixtures[record["prompt_hash"]] = record["response"]
        return cls(fixtures=fixtures, default=default)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.fixtures):
                fh.write(
                    json.dumps({"prompt_hash": key, "response": self.fixtures[key]}, ensure_ascii=False)
                    + "\n"
                )


class RecordingBackend:
    """Wraps any backend and records (prompt, response) exchanges, which can
    then be dumped as mock fixtures for replay."""

    kind = "recording"

    def __init__(self, inner):
        self.inner = inner
        self.exchanges: list[tuple[str, str]] = []

    def complete(self, prompt: str, params: CompletionParams | None = None) -> str:
        response = self.inner.complete(prompt, params)
        self.exchanges.append((prompt, response))
        return response

    def as_mock(self) -> MockBackend:
        mock = MockBackend()
        for prompt, response in self.exchanges:
            mock.add(prompt, response)
        return mock

    def to_jsonl(self, path: str | Path) -> None:
        self.as_mock().to_jsonl(path)


class RemoteBackend:
    """Chat-completions HTTP backend with a per-backend concurrency limit,
    a minimum-interval rate limiter, and a bounded retry budget."""

    kind = "remote"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "DIAGCHAT_API_KEY",
        timeout: float = 30.0,
        max_retries: int = 2,
        max_concurrency: int = 4,
        min_interval: float = 0.0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.min_interval = min_interval
        self._semaphore = threading.BoundedSemaphore(max_concurrency)
        self._rate_lock = threading.Lock()
        self._last_call = 0.0

    def _throttle(self) -> None:
        if self.min_interval <= 0:
            return
        with self._rate_lock:
            wait = self._last_call + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_call = time.monotonic()

    def complete(self, prompt: str, params: CompletionParams | None = None) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        params = params or CompletionParams()
        payload: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        headers = {}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_error: Exception | None = None
        with self._semaphore:
            for _ in range(self.max_retries + 1):
                self._throttle()
                try:
                    response = httpx.post(
                        self.endpoint, json=payload, headers=headers, timeout=self.timeout
                    )
                except httpx.TimeoutException as exc:
                    last_error = TransportError(f"timeout talking to {self.endpoint}: {exc}")
                    continue
                except httpx.HTTPError as exc:
                    last_error = TransportError(f"transport failure to {self.endpoint}: {exc}")
                    continue
                if response.status_code in (429,) or response.status_code >= 500:
                    last_error = BackendError(
                        f"HTTP {response.status_code} from {self.endpoint}: {response.text}"
                    )
                    continue
                if response.status_code != 200:
                    raise BackendError(
                        f"HTTP {response.status_code} from {self.endpoint}: {response.text}"
                    )
                try:
                    return response.json()["choices"][0]["message"]["content"]
                except (KeyError, IndexError, ValueError) as exc:
                    raise BackendError(f"malformed completion payload: {exc}") from exc
        raise last_error if last_error else BackendError("completion failed")


def load_backend(config: dict):
    """Build a backend from a config mapping ({"kind": "mock"|"remote", ...})."""
    kind = config.get("kind")
    if kind == "mock":
        fixtures_path = config.get("fixtures")
        default = config.get("default")
        if fixtures_path:
            return MockBackend.from_jsonl(fixtures_path, default=default)
        return MockBackend(default=default)
    if kind == "remote":
        return RemoteBackend(
            endpoint=config["endpoint"],
            model=config["model"],
            api_key_env=config.get("api_key_env", "DIAGCHAT_API_KEY"),
            timeout=float(config.get("timeout", 30.0)),
            max_retries=int(config.get("max_retries", 2)),
            max_concurrency=int(config.get("max_concurrency", 4)),
            min_interval=float(config.get("min_interval", 0.0)),
        )
    raise ValueError(f"unknown backend kind {kind!r}")


def load_backend_file(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        return load_backend(json.load(fh))


TEMPLATE_NAMES = (
    "soap_extract",
    "abductive_refine",
    "deductive_analyze",
    "thought_cot",
    "annotate_pri",
    "annotate_post",
    "disease_match",
)


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: int
    body: str

    @property
    def slots(self) -> tuple[str, ...]:
        fields = []
        for _, field_name, _, _ in string.Formatter().parse(self.body):
            if field_name is None:
                continue
            if not field_name.isidentifier():
                raise TemplateError(f"template {self.name!r}: bad slot name {field_name!r}")
            if field_name not in fields:
                fields.append(field_name)
        return tuple(fields)

    def render(self, **bindings: str) -> str:
        declared = set(self.slots)
        missing = sorted(declared - bindings.keys())
        if missing:
            raise TemplateError(f"template {self.name!r}: unbound slots {missing}")
        unknown = sorted(bindings.keys() - declared)
        if unknown:
            raise TemplateError(f"template {self.name!r}: unknown slots {unknown}")
        text = self.body.format(**bindings)
        return f"{text.rstrip()}\n\n[template: {self.name} v{self.version}]"


def parse_template_text(name: str, text: str) -> PromptTemplate:
    """Template file format: `name:` and `version:` header lines, a `---`
    separator, then the body."""
    head, sep, body = text.partition("\n---\n")
    if not sep:
        raise TemplateError(f"template {name!r}: missing '---' separator")
    meta = {}
    for line in head.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition(":")
        meta[key.strip()] = value.strip()
    if meta.get("name") != name:
        raise TemplateError(f"template file for {name!r} declares name {meta.get('name')!r}")
    try:
        version = int(meta["version"])
    except (KeyError, ValueError) as exc:
        raise TemplateError(f"template {name!r}: bad or missing version") from exc
    return PromptTemplate(name=name, version=version, body=body.strip("\n"))


class TemplateCatalog:
    """Loads and serves the packaged prompt templates."""

    def __init__(self, templates: dict[str, PromptTemplate]):
        self._templates = templates

    @classmethod
    def load_default(cls) -> "TemplateCatalog":
        root = _resource_files("diagchat") / "templates"
        templates = {}
        for name in TEMPLATE_NAMES:
            text = (root / f"{name}.txt").read_text(encoding="utf-8")
            templates[name] = parse_template_text(name, text)
        return cls(templates)

    def get(self, name: str) -> PromptTemplate:
        if name not in self._templates:
            raise TemplateError(f"unknown template {name!r}")
        return self._templates[name]

    def names(self) -> list[str]:
        return sorted(self._templates)
