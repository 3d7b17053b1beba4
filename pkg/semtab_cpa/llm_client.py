"""LLM backends: an HTTP chat-completion client plus deterministic mocks.

The HTTP backend speaks either the Ollama `/api/chat` protocol or the
OpenAI-style `/v1/chat/completions` protocol. Mock backends never touch the
network and make whole runs byte-reproducible:

* `oracle`   - answers with the ground-truth relation when it is offered, else the first option
* `first`    - always answers with the first option
* `scripted` - replays answers from a JSON script
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Union

import requests

from semtab_cpa.candidates import CandidateSet
from semtab_cpa.errors import BackendRefusal, ConfigError, ConfigFileError, TransportFailure
from semtab_cpa.prompts import KIND_TOPIC, RenderedPrompt
from semtab_cpa.tables import DomainLabel, GroundTruth, RelationLabel

API_KEY_ENV = "CPA_API_KEY"
DEFAULT_ENDPOINT = "http://localhost:11434"
DEFAULT_MODEL = "qwen2.5:32b-instruct-q3_K_L"
DEFAULT_MAX_RETRIES = 3
DEFAULT_BACKOFF_SECONDS = 0.5

BACKEND_KINDS = ("http", "oracle", "first", "scripted")


class ApiFlavor(str, Enum):
    OLLAMA = "ollama"
    OPENAI = "openai"


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = DEFAULT_ENDPOINT
    model_name: str = DEFAULT_MODEL
    fallback_model_name: Optional[str] = None
    temperature: float = 0.0
    max_output_tokens: int = 512
    request_timeout_seconds: int = 120
    max_retries_transport: int = DEFAULT_MAX_RETRIES
    api_flavor: ApiFlavor = ApiFlavor.OLLAMA
    max_in_flight: int = 1
    api_key: Optional[str] = None

    def __post_init__(self) -> None:
        if self.fallback_model_name is not None and self.fallback_model_name == self.model_name:
            raise ConfigError("backend.fallback_model must differ from backend.model")
        if self.temperature < 0:
            raise ConfigError("backend.temperature must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("backend.max_in_flight must be >= 1")
        if self.max_retries_transport < 0:
            raise ConfigError("backend.max_retries_transport must be >= 0")

    @classmethod
    def from_json(cls, data: Mapping[str, object]) -> "BackendConfig":
        flavor_raw = str(data.get("api_flavor") or ApiFlavor.OLLAMA.value).strip().lower()
        try:
            flavor = ApiFlavor(flavor_raw)
        except ValueError as exc:
            raise ConfigFileError(f"Unknown backend.api_flavor '{flavor_raw}' (expected ollama or openai)") from exc
        fallback = str(data.get("fallback_model") or "").strip() or None
        try:
            return cls(
                endpoint=str(data.get("endpoint") or DEFAULT_ENDPOINT).strip(),
                model_name=str(data.get("model") or DEFAULT_MODEL).strip(),
                fallback_model_name=fallback,
                temperature=float(data.get("temperature", 0.0) or 0.0),  # type: ignore[arg-type]
                max_output_tokens=int(data.get("max_output_tokens", 512) or 512),  # type: ignore[arg-type]
                request_timeout_seconds=int(data.get("request_timeout_seconds", 120) or 120),  # type: ignore[arg-type]
                max_retries_transport=int(data.get("max_retries_transport", DEFAULT_MAX_RETRIES)),  # type: ignore[arg-type]
                api_flavor=flavor,
                max_in_flight=int(data.get("max_in_flight", 1) or 1),  # type: ignore[arg-type]
                api_key=os.getenv(API_KEY_ENV) or None,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"Invalid backend setting: {exc}") from exc

    def model_for(self, use_fallback_model: bool) -> str:
        if use_fallback_model and self.fallback_model_name:
            return self.fallback_model_name
        return self.model_name


@dataclass(frozen=True)
class LlmResponse:
    text: str
    latency_seconds: float
    model_used: str


class LlmBackend(ABC):
    """Common interface for every backend."""

    def __init__(self, config: Optional[BackendConfig] = None) -> None:
        self.config = config or BackendConfig()
        self.transport_retries = 0
        self._counter_lock = threading.Lock()

    def complete(self, prompt: RenderedPrompt, use_fallback_model: bool = False) -> LlmResponse:
        model = self.config.model_for(use_fallback_model)
        started = time.perf_counter()
        text = self._generate(prompt, model)
        return LlmResponse(text=text, latency_seconds=time.perf_counter() - started, model_used=model)

    @abstractmethod
    def _generate(self, prompt: RenderedPrompt, model: str) -> str:
        ...

    def _count_retry(self) -> None:
        with self._counter_lock:
            self.transport_retries += 1


class HttpBackend(LlmBackend):
    """Chat-completion client for Ollama-style or OpenAI-style endpoints."""

    def __init__(
        self,
        config: Optional[BackendConfig] = None,
        *,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff_seconds: float = DEFAULT_BACKOFF_SECONDS,
        log_prefix: str = "[llm]",
    ) -> None:
        super().__init__(config)
        self.session = session or requests.Session()
        self.sleep = sleep
        self.backoff_seconds = backoff_seconds
        self.log_prefix = log_prefix
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)

    @property
    def chat_url(self) -> str:
        base = self.config.endpoint.rstrip("/")
        if self.config.api_flavor is ApiFlavor.OLLAMA:
            return base if base.endswith("/api/chat") else f"{base}/api/chat"
        if base.endswith("/chat/completions"):
            return base
        if base.endswith("/v1"):
            return f"{base}/chat/completions"
        return f"{base}/v1/chat/completions"

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        return headers

    def build_payload(self, prompt: RenderedPrompt, model: str) -> Dict[str, object]:
        messages = [{"role": "user", "content": prompt.text}]
        if self.config.api_flavor is ApiFlavor.OLLAMA:
            return {
                "model": model,
                "messages": messages,
                "stream": False,
                "options": {
                    "temperature": self.config.temperature,
                    "num_predict": self.config.max_output_tokens,
                },
            }
        return {
            "model": model,
            "messages": messages,
            "stream": False,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }

    def extract_text(self, body: object) -> str:
        try:
            if self.config.api_flavor is ApiFlavor.OLLAMA:
                content = body["message"]["content"]  # type: ignore[index]
            else:
                content = body["choices"][0]["message"]["content"]  # type: ignore[index]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportFailure(f"Unexpected response shape from {self.chat_url}: {exc}") from exc
        return "" if content is None else str(content)

    def _post_once(self, payload: Dict[str, object]) -> str:
        try:
            response = self.session.post(
                self.chat_url,
                json=payload,
                headers=self._headers(),
                timeout=self.config.request_timeout_seconds,
            )
        except requests.exceptions.RequestException as exc:
            raise _TransientError(f"Request failed: {exc}") from exc
        status = response.status_code
        if status >= 500:
            raise _TransientError(f"HTTP {status} from {self.chat_url}")
        if status >= 400:
            detail = (response.text or "").strip()[:200]
            raise BackendRefusal(f"HTTP {status} from {self.chat_url}: {detail}")
        try:
            body = response.json()
        except ValueError as exc:
            raise _TransientError(f"Invalid JSON response: {exc}") from exc
        return self.extract_text(body)

    def _generate(self, prompt: RenderedPrompt, model: str) -> str:
        payload = self.build_payload(prompt, model)
        retries = self.config.max_retries_transport
        with self._slots:
            for attempt in range(retries + 1):
                try:
                    return self._post_once(payload)
                except _TransientError as exc:
                    if attempt >= retries:
                        raise TransportFailure(f"{exc} (gave up after {retries} retries)") from exc
                    delay = self.backoff_seconds * (2 ** attempt)
                    self._count_retry()
                    print(f"{self.log_prefix} {exc}; retry {attempt + 1}/{retries} in {delay:.1f}s")
                    self.sleep(delay)
        raise TransportFailure("unreachable")  # pragma: no cover


class _TransientError(Exception):
    """Network error or 5xx; retried before surfacing as TransportFailure."""


class OracleBackend(LlmBackend):
    """Answers with the ground-truth label whenever it is among the offered options."""

    def __init__(
        self,
        ground_truth: GroundTruth,
        domains: Optional[Mapping[str, DomainLabel]] = None,
        config: Optional[BackendConfig] = None,
    ) -> None:
        super().__init__(config)
        self.ground_truth = ground_truth
        self.domains = dict(domains or {})

    def _generate(self, prompt: RenderedPrompt, model: str) -> str:
        if not prompt.options:
            return ""
        if prompt.kind == KIND_TOPIC:
            expected: Optional[str] = self.domains.get(prompt.table_id)
        else:
            expected = self.ground_truth.get(prompt.table_id, {}).get(prompt.column_index)  # type: ignore[arg-type]
        if expected is not None and expected in prompt.options:
            return expected
        return prompt.options[0]


class FirstCandidateBackend(LlmBackend):
    """Always picks the first offered option."""

    def _generate(self, prompt: RenderedPrompt, model: str) -> str:
        return prompt.options[0] if prompt.options else ""


ScriptEntry = Union[str, Sequence[str]]


class ScriptedBackend(LlmBackend):
    """Replays scripted answers.

    The script is either a plain list (answers handed out in call order) or a
    mapping keyed by `"<table_id>:<column_index>"` / `"topic:<table_id>"` with a
    string or a list of answers per key (one per attempt; the last one repeats).
    A `"default"` key covers prompts without a dedicated entry.
    """

    def __init__(
        self,
        script: Union[Sequence[str], Mapping[str, ScriptEntry]],
        config: Optional[BackendConfig] = None,
    ) -> None:
        super().__init__(config)
        self._lock = threading.Lock()
        self._sequence: Optional[List[str]] = None
        self._keyed: Dict[str, List[str]] = {}
        self._cursors: Dict[str, int] = {}
        if isinstance(script, Mapping):
            for key, entry in script.items():
                self._keyed[str(key)] = [entry] if isinstance(entry, str) else [str(item) for item in entry]
        else:
            self._sequence = [str(item) for item in script]

    @classmethod
    def from_file(cls, path: str, config: Optional[BackendConfig] = None) -> "ScriptedBackend":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                script = json.load(handle)
        except OSError as exc:
            raise ConfigFileError(f"Unable to read backend script '{path}': {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"Invalid JSON in backend script '{path}': {exc}") from exc
        if not isinstance(script, (list, dict)):
            raise ConfigFileError(f"Backend script '{path}' must be a JSON list or object")
        return cls(script, config)

    @staticmethod
    def key_for(prompt: RenderedPrompt) -> str:
        if prompt.kind == KIND_TOPIC:
            return f"topic:{prompt.table_id}"
        return f"{prompt.table_id}:{prompt.column_index}"

    def _next(self, key: str, answers: List[str]) -> str:
        if not answers:
            return ""
        position = self._cursors.get(key, 0)
        self._cursors[key] = position + 1
        return answers[min(position, len(answers) - 1)]

    def _generate(self, prompt: RenderedPrompt, model: str) -> str:
        with self._lock:
            if self._sequence is not None:
                return self._next("*", self._sequence)
            key = self.key_for(prompt)
            if key in self._keyed:
                return self._next(key, self._keyed[key])
            return self._next("default", self._keyed.get("default", []))


def create_backend(
    kind: str,
    config: Optional[BackendConfig] = None,
    *,
    ground_truth: Optional[GroundTruth] = None,
    domains: Optional[Mapping[str, DomainLabel]] = None,
    script_path: Optional[str] = None,
) -> LlmBackend:
    key = (kind or "").strip().lower()
    if key == "http":
        return HttpBackend(config)
    if key == "oracle":
        if ground_truth is None:
            raise ConfigError("The oracle backend needs ground truth (--gt)")
        return OracleBackend(ground_truth, domains, config)
    if key == "first":
        return FirstCandidateBackend(config)
    if key == "scripted":
        if not script_path:
            raise ConfigError("The scripted backend needs a script file (--script)")
        return ScriptedBackend.from_file(script_path, config)
    raise ConfigError(f"Unknown backend '{kind}' (expected one of {', '.join(BACKEND_KINDS)})")


# ----------------------------------------------------------------------
# Output parsing
# ----------------------------------------------------------------------
_FENCE = re.compile(r"^```[\w-]*\s*(.*?)\s*```$", re.DOTALL)
_WRAPPERS = ('"', "'", "`", "*", "_")
_CURLY_PAIRS = (("“", "”"), ("‘", "’"))
_TRAILING_PUNCTUATION = ".,;:!?"


def normalize_output(text: str) -> str:
    """Strip whitespace, code fences, quotes/backticks/markdown emphasis and trailing punctuation."""
    value = (text or "").strip()
    fence = _FENCE.match(value)
    if fence:
        value = fence.group(1)
    previous = None
    while value != previous:
        previous = value
        value = value.strip().rstrip(_TRAILING_PUNCTUATION).strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in _WRAPPERS:
            value = value[1:-1]
            continue
        for opening, closing in _CURLY_PAIRS:
            if len(value) >= 2 and value.startswith(opening) and value.endswith(closing):
                value = value[1:-1]
                break
    return value


def parse_single_choice(text: str, options: Sequence[str]) -> Optional[str]:
    """Map model output onto exactly one option, or None when it cannot be done safely."""
    if not options or not (text or "").strip():
        return None
    value = normalize_output(text)
    if value in options:
        return value
    folded = value.casefold()
    insensitive = [option for option in options if option.casefold() == folded]
    if len(insensitive) == 1:
        return insensitive[0]
    mentioned = [
        option
        for option in options
        if re.search(r"(?<!\w)" + re.escape(option) + r"(?!\w)", text)
    ]
    if len(mentioned) == 1:
        return mentioned[0]
    return None


def parse_single_relation(text: str, candidates: Union[CandidateSet, Sequence[str]]) -> Optional[RelationLabel]:
    options = candidates.relations if isinstance(candidates, CandidateSet) else tuple(candidates)
    choice = parse_single_choice(text, options)
    return RelationLabel(choice) if choice is not None else None


__all__ = [
    "API_KEY_ENV",
    "ApiFlavor",
    "BACKEND_KINDS",
    "BackendConfig",
    "FirstCandidateBackend",
    "HttpBackend",
    "LlmBackend",
    "LlmResponse",
    "OracleBackend",
    "ScriptedBackend",
    "create_backend",
    "normalize_output",
    "parse_single_choice",
    "parse_single_relation",
]
