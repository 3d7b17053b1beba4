"""Prompt rendering with toggleable role, example and chain-of-thought parts."""

from __future__ import annotations

import hashlib
import math
import os
import re
from dataclasses import dataclass
from typing import AbstractSet, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from semtab_cpa.candidates import CandidateSet
from semtab_cpa.errors import ConfigError, ConfigFileError, ContractError, EmptyCandidates
from semtab_cpa.tables import DomainLabel, Table

DEFAULT_TEMPLATE_PATH = os.path.join(os.path.dirname(__file__), "templates", "default_prompt.txt")
DEFAULT_EXCERPT_ROWS = 5
DEFAULT_CELL_MAX_CHARS = 80
ELLIPSIS = "..."

REQUIRED_SECTIONS = ("role", "example", "cot", "main", "retry", "topic")
MAIN_REQUIRED_PLACEHOLDERS = ("table_excerpt", "column_marker", "candidates")
SECTION_HEADER = re.compile(r"^\[\[([a-z_]+)\]\]\s*$")
OPTION_LINE = re.compile(r"^\s*- ", re.MULTILINE)
FIXED_PARTS = ("role", "example", "cot")

KIND_ANNOTATION = "annotation"
KIND_RETRY = "retry"
KIND_TOPIC = "topic"


@dataclass(frozen=True)
class PromptParts:
    include_role: bool = True
    include_example: bool = True
    include_cot: bool = True

    @classmethod
    def from_flag(cls, value: Optional[str]) -> "PromptParts":
        """Parse `role,example,cot` (any subset; `none` or empty for no parts)."""
        if value is None:
            return cls()
        tokens = {token.strip().lower() for token in re.split(r"[,+]", value) if token.strip()}
        tokens.discard("none")
        aliases = {"e": "example", "examples": "example", "chain_of_thought": "cot"}
        tokens = {aliases.get(token, token) for token in tokens}
        unknown = tokens - {"role", "example", "cot"}
        if unknown:
            raise ConfigError(f"Unknown prompt part(s): {', '.join(sorted(unknown))}")
        return cls("role" in tokens, "example" in tokens, "cot" in tokens)

    @classmethod
    def without(cls, ablation: str) -> "PromptParts":
        """Prompt-ablation rows, named by the parts they leave out."""
        key = ablation.strip().upper()
        if key not in ABLATION_ROWS:
            raise ConfigError(f"Unknown prompt ablation '{ablation}' (expected one of {', '.join(ABLATION_ROWS)})")
        return ABLATION_ROWS[key]

    def to_flag(self) -> str:
        names = [
            name
            for name, enabled in (("role", self.include_role), ("example", self.include_example), ("cot", self.include_cot))
            if enabled
        ]
        return "+".join(names) if names else "none"


ABLATION_ROWS: Dict[str, PromptParts] = {
    "ALL": PromptParts(False, False, False),
    "COT": PromptParts(True, True, False),
    "ROLE": PromptParts(False, True, True),
    "E": PromptParts(True, False, True),
    "E+COT": PromptParts(True, False, False),
    "-": PromptParts(True, True, True),
}


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    candidate_count: int
    token_estimate: int
    kind: str = KIND_ANNOTATION
    options: Tuple[str, ...] = ()
    table_id: str = ""
    column_index: Optional[int] = None

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def _estimate_tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / 4))


def _substitute(template: str, values: Mapping[str, str]) -> str:
    pattern = re.compile(r"\{(" + "|".join(re.escape(name) for name in values) + r")\}")
    return pattern.sub(lambda match: values[match.group(1)], template)


class PromptTemplate:
    """Sectioned prompt wording loaded from a plain-text template file."""

    def __init__(self, sections: Mapping[str, str], source: str = "<memory>") -> None:
        missing = [name for name in REQUIRED_SECTIONS if name not in sections]
        if missing:
            raise ConfigFileError(f"Prompt template '{source}' is missing section(s): {', '.join(missing)}")
        for placeholder in MAIN_REQUIRED_PLACEHOLDERS:
            if "{" + placeholder + "}" not in sections["main"]:
                raise ConfigFileError(f"Prompt template '{source}' main section lacks {{{placeholder}}}")
        for name in FIXED_PARTS:
            if OPTION_LINE.search(sections[name]):
                raise ConfigFileError(
                    f"Prompt template '{source}' section '{name}' has a '- ' list line; those are reserved for options"
                )
        self.sections = dict(sections)
        self.source = source

    @classmethod
    def parse(cls, text: str, source: str = "<memory>") -> "PromptTemplate":
        sections: Dict[str, List[str]] = {}
        current: Optional[str] = None
        for line in text.splitlines():
            header = SECTION_HEADER.match(line)
            if header:
                current = header.group(1)
                sections[current] = []
                continue
            if current is None:
                # header comments and blank lines before the first section
                continue
            sections[current].append(line)
        return cls({name: "\n".join(lines).strip("\n") for name, lines in sections.items()}, source)

    @classmethod
    def from_file(cls, path: str) -> "PromptTemplate":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return cls.parse(handle.read(), source=path)
        except OSError as exc:
            raise ConfigFileError(f"Unable to read prompt template '{path}': {exc}") from exc

    def part(self, name: str, enabled: bool) -> str:
        return self.sections[name] + "\n\n" if enabled else ""


class PromptBuilder:
    """Renders annotation, retry and topic prompts deterministically."""

    def __init__(
        self,
        template: Optional[PromptTemplate] = None,
        *,
        cell_max_chars: int = DEFAULT_CELL_MAX_CHARS,
    ) -> None:
        self.template = template or PromptTemplate.from_file(DEFAULT_TEMPLATE_PATH)
        self.cell_max_chars = max(len(ELLIPSIS) + 1, int(cell_max_chars))

    # ------------------------------------------------------------------
    # Table excerpt
    # ------------------------------------------------------------------
    def format_cell(self, cell: str) -> str:
        text = " ".join((cell or "").split()).replace("|", "\\|")
        if len(text) > self.cell_max_chars:
            return text[: self.cell_max_chars - len(ELLIPSIS)] + ELLIPSIS
        return text

    def render_excerpt(self, table: Table, excerpt_rows: int, marked_column: Optional[int] = None) -> str:
        if excerpt_rows < 1:
            raise ContractError(f"excerpt_rows must be >= 1 (got {excerpt_rows})")
        header = [
            f">>{index}<<" if index == marked_column else str(index)
            for index in range(table.column_count)
        ]
        lines = ["| " + " | ".join(header) + " |"]
        for row in table.rows[:excerpt_rows]:
            lines.append("| " + " | ".join(self.format_cell(cell) for cell in row) + " |")
        return "\n".join(lines)

    @staticmethod
    def column_marker(column_index: int) -> str:
        return f"column {column_index} (marked >>{column_index}<< in the header row)"

    @staticmethod
    def option_lines(options: Iterable[str]) -> str:
        return "\n".join(f"- {option}" for option in options)

    # ------------------------------------------------------------------
    # Prompts
    # ------------------------------------------------------------------
    def render_annotation_prompt(
        self,
        table: Table,
        column_index: int,
        candidates: CandidateSet,
        parts: PromptParts,
        excerpt_rows: int = DEFAULT_EXCERPT_ROWS,
    ) -> RenderedPrompt:
        if candidates.empty:
            raise EmptyCandidates(f"No candidates for column {column_index} of table '{table.id}'")
        if not 0 <= column_index < table.column_count:
            raise ContractError(f"Column {column_index} is out of range for table '{table.id}'")
        text = _substitute(
            self.template.sections["main"],
            {
                "role": self.template.part("role", parts.include_role),
                "example": self.template.part("example", parts.include_example),
                "cot": self.template.part("cot", parts.include_cot),
                "table_excerpt": self.render_excerpt(table, excerpt_rows, column_index),
                "column_marker": self.column_marker(column_index),
                "candidates": self.option_lines(candidates.relations),
            },
        ) + "\n"
        return RenderedPrompt(
            text=text,
            candidate_count=len(candidates),
            token_estimate=_estimate_tokens(text),
            kind=KIND_ANNOTATION,
            options=tuple(candidates.relations),
            table_id=table.id,
            column_index=column_index,
        )

    def render_choice_retry(
        self,
        previous_output: str,
        options: Sequence[str],
        *,
        table_id: str = "",
        column_index: Optional[int] = None,
        kind: str = KIND_RETRY,
    ) -> RenderedPrompt:
        if not (previous_output or "").strip():
            raise ContractError("Retry prompt needs the previous (non-empty) model output")
        if not options:
            raise EmptyCandidates("Retry prompt needs at least one option")
        text = _substitute(
            self.template.sections["retry"],
            {"previous_output": previous_output.strip(), "candidates": self.option_lines(options)},
        ) + "\n"
        return RenderedPrompt(
            text=text,
            candidate_count=len(options),
            token_estimate=_estimate_tokens(text),
            kind=kind,
            options=tuple(options),
            table_id=table_id,
            column_index=column_index,
        )

    def render_retry_prompt(
        self,
        previous_output: str,
        candidates: CandidateSet,
        *,
        table_id: str = "",
        column_index: Optional[int] = None,
    ) -> RenderedPrompt:
        return self.render_choice_retry(
            previous_output,
            candidates.relations,
            table_id=table_id,
            column_index=column_index,
        )

    def render_topic_prompt(
        self,
        table: Table,
        domains: AbstractSet[DomainLabel],
        excerpt_rows: int = DEFAULT_EXCERPT_ROWS,
    ) -> RenderedPrompt:
        if not domains:
            raise ContractError("Topic prompt needs at least one domain")
        options = tuple(sorted(domains))
        text = _substitute(
            self.template.sections["topic"],
            {
                "table_excerpt": self.render_excerpt(table, excerpt_rows),
                "domains": self.option_lines(options),
            },
        ) + "\n"
        return RenderedPrompt(
            text=text,
            candidate_count=len(options),
            token_estimate=_estimate_tokens(text),
            kind=KIND_TOPIC,
            options=options,
            table_id=table.id,
        )


_DEFAULT_BUILDER: Optional[PromptBuilder] = None


def default_builder() -> PromptBuilder:
    global _DEFAULT_BUILDER
    if _DEFAULT_BUILDER is None:
        _DEFAULT_BUILDER = PromptBuilder()
    return _DEFAULT_BUILDER


def render_annotation_prompt(
    table: Table,
    column_index: int,
    candidates: CandidateSet,
    parts: PromptParts,
    excerpt_rows: int = DEFAULT_EXCERPT_ROWS,
) -> RenderedPrompt:
    return default_builder().render_annotation_prompt(table, column_index, candidates, parts, excerpt_rows)


def render_retry_prompt(previous_output: str, candidates: CandidateSet) -> RenderedPrompt:
    return default_builder().render_retry_prompt(previous_output, candidates)


def render_topic_prompt(
    table: Table,
    domains: AbstractSet[DomainLabel],
    excerpt_rows: int = DEFAULT_EXCERPT_ROWS,
) -> RenderedPrompt:
    return default_builder().render_topic_prompt(table, domains, excerpt_rows)


__all__ = [
    "ABLATION_ROWS",
    "DEFAULT_EXCERPT_ROWS",
    "DEFAULT_TEMPLATE_PATH",
    "KIND_ANNOTATION",
    "KIND_RETRY",
    "KIND_TOPIC",
    "PromptBuilder",
    "PromptParts",
    "PromptTemplate",
    "RenderedPrompt",
    "default_builder",
    "render_annotation_prompt",
    "render_retry_prompt",
    "render_topic_prompt",
]
