"""Configuration loading for the CPA pipeline."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Mapping, Optional

from dotenv import load_dotenv

from semtab_cpa.candidates import VARIANTS
from semtab_cpa.errors import ConfigFileError
from semtab_cpa.llm_client import BACKEND_KINDS, BackendConfig
from semtab_cpa.prompts import DEFAULT_CELL_MAX_CHARS, DEFAULT_EXCERPT_ROWS, DEFAULT_TEMPLATE_PATH, PromptParts
from semtab_cpa.stats import DEFAULT_SAMPLE_SIZE, DEFAULT_THRESHOLD
from semtab_cpa.type_detector import TypeDetector, TypeGrammar, TypeMode

load_dotenv()

CONFIG_ENV = os.getenv("CPA_CONFIG_PATH", "cpa_config.json")
CONFIG_PATH = CONFIG_ENV

DOMAIN_SOURCES = ("none", "filename", "map")


def _resolve_config_path(path: str) -> str:
    """Resolve a config path: try as given, then relative to repo root when missing.

    Absolute paths are returned unchanged. Relative paths prefer the cwd location
    and fall back to the repository root (parent of the package directory). The
    cwd candidate is returned when neither exists so callers can report it.
    """
    if os.path.isabs(path):
        return path
    cwd_candidate = os.path.abspath(path)
    if os.path.exists(cwd_candidate):
        return cwd_candidate
    pkg_dir = os.path.dirname(__file__)
    repo_root = os.path.abspath(os.path.join(pkg_dir, os.pardir))
    repo_candidate = os.path.join(repo_root, path)
    if os.path.exists(repo_candidate):
        return repo_candidate
    return cwd_candidate


def _optional_path(value: object) -> Optional[str]:
    text = str(value).strip() if value is not None else ""
    return text or None


def _as_int(data: Mapping[str, object], key: str, default: int, section: str, minimum: int = 1) -> int:
    raw = data.get(key, default)
    try:
        value = int(raw)  # type: ignore[arg-type]
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"{section}.{key} must be an integer (got {raw!r})") from exc
    if value < minimum:
        raise ConfigFileError(f"{section}.{key} must be >= {minimum} (got {value})")
    return value


def _as_bool(data: Mapping[str, object], key: str, default: bool) -> bool:
    raw = data.get(key, default)
    if isinstance(raw, str):
        return raw.strip().lower() in {"1", "true", "yes", "on"}
    return bool(raw)


@dataclass
class TypeDetectorSettings:
    mode: TypeMode = TypeMode.MAJORITY
    stats_mode: TypeMode = TypeMode.FIRST_CELL
    sample_limit: int = DEFAULT_SAMPLE_SIZE
    grammar_path: Optional[str] = None

    @classmethod
    def from_json(cls, data: Dict[str, object]) -> "TypeDetectorSettings":
        return cls(
            mode=TypeMode.parse(data.get("mode", TypeMode.MAJORITY.value)),
            stats_mode=TypeMode.parse(data.get("stats_mode", TypeMode.FIRST_CELL.value)),
            sample_limit=_as_int(data, "sample_limit", DEFAULT_SAMPLE_SIZE, "type_detector"),
            grammar_path=_optional_path(data.get("grammar_path")),
        )

    def build_detector(self) -> TypeDetector:
        if not self.grammar_path:
            return TypeDetector()
        return TypeDetector(TypeGrammar.from_file(self.grammar_path))


@dataclass
class StatsSettings:
    threshold: float = DEFAULT_THRESHOLD
    sample_size: int = DEFAULT_SAMPLE_SIZE
    path: Optional[str] = None

    @classmethod
    def from_json(cls, data: Dict[str, object]) -> "StatsSettings":
        raw_threshold = data.get("threshold", DEFAULT_THRESHOLD)
        try:
            threshold = float(raw_threshold)  # type: ignore[arg-type]
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"stats.threshold must be a number (got {raw_threshold!r})") from exc
        if not 0 < threshold <= 1:
            raise ConfigFileError(f"stats.threshold must be in (0, 1] (got {threshold})")
        return cls(
            threshold=threshold,
            sample_size=_as_int(data, "sample_size", DEFAULT_SAMPLE_SIZE, "stats"),
            path=_optional_path(data.get("path")),
        )


@dataclass
class ApproachSettings:
    variant: str = "rd"
    precision_gate_path: Optional[str] = None
    fallback: bool = True

    @classmethod
    def from_json(cls, data: Dict[str, object]) -> "ApproachSettings":
        variant = str(data.get("variant") or "rd").strip().lower()
        if variant not in VARIANTS:
            raise ConfigFileError(f"Unknown approach.variant '{variant}' (expected one of {', '.join(VARIANTS)})")
        return cls(
            variant=variant,
            precision_gate_path=_optional_path(data.get("precision_gate_path")),
            fallback=_as_bool(data, "fallback", True),
        )


@dataclass
class PromptSettings:
    template_path: str = DEFAULT_TEMPLATE_PATH
    parts: PromptParts = field(default_factory=PromptParts)
    excerpt_rows: int = DEFAULT_EXCERPT_ROWS
    cell_max_chars: int = DEFAULT_CELL_MAX_CHARS

    @classmethod
    def from_json(cls, data: Dict[str, object]) -> "PromptSettings":
        raw_parts = data.get("parts")
        if isinstance(raw_parts, list):
            raw_parts = ",".join(str(item) for item in raw_parts) or "none"
        return cls(
            template_path=_optional_path(data.get("template_path")) or DEFAULT_TEMPLATE_PATH,
            parts=PromptParts.from_flag(None if raw_parts is None else str(raw_parts)),
            excerpt_rows=_as_int(data, "excerpt_rows", DEFAULT_EXCERPT_ROWS, "prompt"),
            cell_max_chars=_as_int(data, "cell_max_chars", DEFAULT_CELL_MAX_CHARS, "prompt", minimum=4),
        )


@dataclass
class BackendSettings:
    kind: str = "http"
    script_path: Optional[str] = None
    client: BackendConfig = field(default_factory=BackendConfig)

    @classmethod
    def from_json(cls, data: Dict[str, object]) -> "BackendSettings":
        kind = str(data.get("kind") or "http").strip().lower()
        if kind not in BACKEND_KINDS:
            raise ConfigFileError(f"Unknown backend.kind '{kind}' (expected one of {', '.join(BACKEND_KINDS)})")
        return cls(
            kind=kind,
            script_path=_optional_path(data.get("script_path")),
            client=BackendConfig.from_json(data),
        )


@dataclass
class RunSettings:
    workers: int = 1
    use_gt_domain: bool = False
    domain_source: str = "filename"
    domain_map: Optional[str] = None
    workspace_root: str = field(default_factory=os.getcwd)
    trace_log: Optional[str] = None

    @classmethod
    def from_json(cls, data: Dict[str, object]) -> "RunSettings":
        domain_source = str(data.get("domain_source") or "filename").strip().lower()
        if domain_source not in DOMAIN_SOURCES:
            raise ConfigFileError(f"Unknown run.domain_source '{domain_source}' (expected none, filename or map)")
        domain_map = _optional_path(data.get("domain_map"))
        if domain_source == "map" and not domain_map:
            raise ConfigFileError("run.domain_source 'map' needs run.domain_map")
        return cls(
            workers=_as_int(data, "workers", 1, "run"),
            use_gt_domain=_as_bool(data, "use_gt_domain", False),
            domain_source=domain_source,
            domain_map=domain_map,
            workspace_root=os.path.abspath(_optional_path(data.get("workspace_root")) or os.getcwd()),
            trace_log=_optional_path(data.get("trace_log")),
        )


@dataclass
class AppConfig:
    type_detector: TypeDetectorSettings
    stats: StatsSettings
    approach: ApproachSettings
    prompt: PromptSettings
    backend: BackendSettings
    run: RunSettings
    document: Dict[str, object] = field(default_factory=dict)
    source_path: Optional[str] = None

    def effective(self) -> Dict[str, Dict[str, object]]:
        """Merged settings with defaults filled in; secrets are left out."""
        client = self.backend.client
        return {
            "type_detector": {
                "mode": self.type_detector.mode.value,
                "stats_mode": self.type_detector.stats_mode.value,
                "sample_limit": self.type_detector.sample_limit,
                "grammar_path": self.type_detector.grammar_path,
            },
            "stats": asdict(self.stats),
            "approach": asdict(self.approach),
            "prompt": {
                "template_path": self.prompt.template_path,
                "parts": self.prompt.parts.to_flag(),
                "excerpt_rows": self.prompt.excerpt_rows,
                "cell_max_chars": self.prompt.cell_max_chars,
            },
            "backend": {
                "kind": self.backend.kind,
                "script_path": self.backend.script_path,
                "api_flavor": client.api_flavor.value,
                "endpoint": client.endpoint,
                "model": client.model_name,
                "fallback_model": client.fallback_model_name,
                "temperature": client.temperature,
                "max_output_tokens": client.max_output_tokens,
                "request_timeout_seconds": client.request_timeout_seconds,
                "max_retries_transport": client.max_retries_transport,
                "max_in_flight": client.max_in_flight,
            },
            "run": asdict(self.run),
        }

    def to_json(self) -> str:
        return json.dumps(self.effective(), indent=2, sort_keys=True)


def _load_json_config(path: str = CONFIG_PATH) -> Dict[str, object]:
    resolved = _resolve_config_path(path)
    try:
        with open(resolved, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        tried = []
        for candidate in (os.path.abspath(path), resolved):
            if candidate not in tried:
                tried.append(candidate)
        print(f"[WARN] Config file not found (tried): {', '.join(tried)}; continuing with defaults")
        return {}
    except OSError as exc:
        raise ConfigFileError(f"Unable to read config file '{resolved}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"Invalid JSON in config file '{resolved}': {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigFileError(f"Config file '{resolved}' must contain a JSON object")
    return data


def apply_overrides(data: Mapping[str, object], overrides: Optional[Mapping[str, object]]) -> Dict[str, object]:
    """Return a copy of `data` with dotted keys (`backend.model`) set; None values are skipped."""
    merged: Dict[str, object] = copy.deepcopy(dict(data))
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section_name, _, key = dotted.partition(".")
        if not key:
            raise ConfigFileError(f"Override '{dotted}' must be of the form section.key")
        section = merged.setdefault(section_name, {})
        if not isinstance(section, dict):
            raise ConfigFileError(f"Config section '{section_name}' must be a JSON object")
        section[key] = value
    return merged


def _section(data: Mapping[str, object], name: str) -> Dict[str, object]:
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise ConfigFileError(f"Config section '{name}' must be a JSON object")
    return section


def load_app_config(path: str | None = None, overrides: Optional[Mapping[str, object]] = None) -> AppConfig:
    source = path or CONFIG_PATH
    document = apply_overrides(_load_json_config(source), overrides)
    return AppConfig(
        type_detector=TypeDetectorSettings.from_json(_section(document, "type_detector")),
        stats=StatsSettings.from_json(_section(document, "stats")),
        approach=ApproachSettings.from_json(_section(document, "approach")),
        prompt=PromptSettings.from_json(_section(document, "prompt")),
        backend=BackendSettings.from_json(_section(document, "backend")),
        run=RunSettings.from_json(_section(document, "run")),
        document=document,
        source_path=_resolve_config_path(source),
    )


__all__ = [
    "AppConfig",
    "ApproachSettings",
    "BackendSettings",
    "CONFIG_PATH",
    "PromptSettings",
    "RunSettings",
    "StatsSettings",
    "TypeDetectorSettings",
    "apply_overrides",
    "load_app_config",
]
