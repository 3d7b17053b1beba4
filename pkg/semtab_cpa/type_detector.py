"""Primitive type detection for cells and columns.

Every grammar lives in a `TypeGrammar` table so it can be tuned from a JSON file
(`type_detector.grammar_path`) without touching code.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional, Pattern, Sequence, Tuple

from semtab_cpa.errors import ConfigFileError, ContractError
from semtab_cpa.tables import Table, sample_rows


class PrimitiveType(str, Enum):
    STRING = "String"
    NUMBER = "Number"
    DATE = "Date"
    URL = "URL"


class TypeMode(str, Enum):
    FIRST_CELL = "first_cell"
    MAJORITY = "majority"

    @classmethod
    def parse(cls, value: object) -> "TypeMode":
        token = str(value or "").strip().lower().replace("-", "_")
        if token in {"first", "firstcell"}:
            token = cls.FIRST_CELL.value
        if token in {"majorityvote", "majority_vote"}:
            token = cls.MAJORITY.value
        try:
            return cls(token)
        except ValueError as exc:
            raise ConfigFileError(f"Unknown type_detector mode '{value}' (expected first_cell or majority)") from exc


DEFAULT_URL_SCHEMES: Tuple[str, ...] = ("http", "https", "ftp")

DEFAULT_TLDS: Tuple[str, ...] = (
    "com", "org", "net", "edu", "gov", "mil", "int", "info", "biz", "io", "co", "me", "tv",
    "uk", "de", "fr", "it", "es", "nl", "be", "ch", "at", "se", "no", "dk", "fi", "pl", "pt",
    "gr", "ie", "eu", "ru", "us", "ca", "au", "nz", "jp", "cn", "in", "br", "mx", "za",
)

DEFAULT_CURRENCY_SYMBOLS = "$€£¥₹"

DEFAULT_DATE_FORMATS: Tuple[str, ...] = (
    "%Y-%m-%d",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M:%S.%f",
    "%Y-%m-%dT%H:%M:%S%z",
    "%Y-%m-%dT%H:%M:%S.%f%z",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%d %H:%M:%S",
    "%d %B %Y",
    "%d %b %Y",
    "%B %d, %Y",
    "%b %d, %Y",
    "%Y/%m/%d",
    "%m/%d/%Y",
    "%d/%m/%Y",
)


def _build_number_pattern(currency_symbols: str) -> Pattern[str]:
    core = (
        r"[+-]?(?:\d{1,3}(?:[,\u2009]\d{3})+(?:\.\d+)?|\d+(?:\.\d*)?|\.\d+)"
        r"(?:[eE][+-]?\d+)?"
    )
    symbols = re.escape(currency_symbols) if currency_symbols else ""
    if not symbols:
        return re.compile(rf"^(?:{core}%?)$")
    return re.compile(
        rf"^(?:[+-]?[{symbols}]\s?{core}|{core}\s?(?:%|[{symbols}])?)$"
    )


def _build_url_patterns(schemes: Sequence[str], tlds: Sequence[str]) -> Tuple[Pattern[str], Pattern[str]]:
    scheme_group = "|".join(re.escape(scheme) for scheme in schemes) or "https?"
    with_scheme = re.compile(rf"^(?:{scheme_group})://[^\s/$.?#][^\s]*$", re.IGNORECASE)
    tld_group = "|".join(sorted((re.escape(tld) for tld in tlds), key=len, reverse=True)) or "com"
    bare = re.compile(
        rf"^(?:(?:www\.)(?:[a-z0-9-]+\.)*[a-z0-9-]+\.(?:{tld_group})(?:/\S*)?"
        rf"|(?:[a-z0-9-]+\.)+(?:{tld_group})/\S*)$",
        re.IGNORECASE,
    )
    return with_scheme, bare


@dataclass
class TypeGrammar:
    url_schemes: Tuple[str, ...] = DEFAULT_URL_SCHEMES
    tlds: Tuple[str, ...] = DEFAULT_TLDS
    currency_symbols: str = DEFAULT_CURRENCY_SYMBOLS
    date_formats: Tuple[str, ...] = DEFAULT_DATE_FORMATS
    bare_year_range: Tuple[int, int] = (1000, 2999)
    _url_with_scheme: Pattern[str] = field(init=False, repr=False)
    _url_bare: Pattern[str] = field(init=False, repr=False)
    _number: Pattern[str] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._url_with_scheme, self._url_bare = _build_url_patterns(self.url_schemes, self.tlds)
        self._number = _build_number_pattern(self.currency_symbols)

    @classmethod
    def from_json(cls, data: Dict[str, object]) -> "TypeGrammar":
        def _tuple(key: str, default: Tuple[str, ...]) -> Tuple[str, ...]:
            value = data.get(key)
            if value is None:
                return default
            if not isinstance(value, list):
                raise ConfigFileError(f"Grammar key '{key}' must be a list")
            return tuple(str(item).strip() for item in value if str(item).strip())

        year_range = data.get("bare_year_range") or [1000, 2999]
        try:
            low, high = int(year_range[0]), int(year_range[1])  # type: ignore[index]
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigFileError("Grammar key 'bare_year_range' must be a [low, high] pair") from exc
        return cls(
            url_schemes=_tuple("url_schemes", DEFAULT_URL_SCHEMES),
            tlds=_tuple("tlds", DEFAULT_TLDS),
            currency_symbols=str(data.get("currency_symbols", DEFAULT_CURRENCY_SYMBOLS) or ""),
            date_formats=_tuple("date_formats", DEFAULT_DATE_FORMATS),
            bare_year_range=(low, high),
        )

    @classmethod
    def from_file(cls, path: str) -> "TypeGrammar":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                data = json.load(handle)
        except OSError as exc:
            raise ConfigFileError(f"Unable to read type grammar '{path}': {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"Invalid JSON in type grammar '{path}': {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigFileError(f"Type grammar '{path}' must be a JSON object")
        return cls.from_json(data)

    def is_url(self, text: str) -> bool:
        return bool(self._url_with_scheme.match(text) or self._url_bare.match(text))

    def is_bare_year(self, text: str) -> bool:
        if len(text) != 4 or not text.isdigit():
            return False
        low, high = self.bare_year_range
        return low <= int(text) <= high

    def is_date(self, text: str) -> bool:
        if self.is_bare_year(text):
            return False
        candidate = text[:-1] + "+0000" if text.endswith("Z") else text
        for pattern in self.date_formats:
            try:
                datetime.strptime(candidate, pattern)
                return True
            except ValueError:
                continue
        return False

    def is_number(self, text: str) -> bool:
        return bool(self._number.match(text))


class TypeDetector:
    """Classifies cells and columns into String, Number, Date or URL."""

    def __init__(self, grammar: Optional[TypeGrammar] = None) -> None:
        self.grammar = grammar or TypeGrammar()

    def detect_cell_type(self, cell: str) -> PrimitiveType:
        text = (cell or "").strip()
        if not text:
            return PrimitiveType.STRING
        if self.grammar.is_url(text):
            return PrimitiveType.URL
        if self.grammar.is_date(text):
            return PrimitiveType.DATE
        if self.grammar.is_number(text):
            return PrimitiveType.NUMBER
        return PrimitiveType.STRING

    def detect_column_type(
        self,
        table: Table,
        column_index: int,
        sample_limit: int,
        mode: TypeMode = TypeMode.MAJORITY,
    ) -> PrimitiveType:
        if sample_limit < 1:
            raise ContractError(f"sample_limit must be >= 1 (got {sample_limit})")
        cells = table.column(column_index)
        if mode is TypeMode.FIRST_CELL:
            for cell in cells:
                if cell.strip():
                    return self.detect_cell_type(cell)
            return PrimitiveType.STRING
        return self._majority_type(cells, sample_limit)

    def _majority_type(self, cells: Sequence[str], sample_limit: int) -> PrimitiveType:
        counts: Counter = Counter()
        first_seen: Dict[PrimitiveType, int] = {}
        seen = 0
        for cell in cells:
            if not cell.strip():
                continue
            detected = self.detect_cell_type(cell)
            counts[detected] += 1
            first_seen.setdefault(detected, seen)
            seen += 1
            if seen >= sample_limit:
                break
        if not counts:
            return PrimitiveType.STRING
        best = max(counts.values())
        leaders: List[PrimitiveType] = [kind for kind, count in counts.items() if count == best]
        if len(leaders) > 1:
            leaders = [kind for kind in leaders if kind is not PrimitiveType.STRING]
        return min(leaders, key=lambda kind: first_seen[kind])


DEFAULT_DETECTOR = TypeDetector()


def detect_cell_type(cell: str) -> PrimitiveType:
    return DEFAULT_DETECTOR.detect_cell_type(cell)


def detect_column_type(
    table: Table,
    column_index: int,
    sample_limit: int,
    mode: TypeMode = TypeMode.MAJORITY,
) -> PrimitiveType:
    return DEFAULT_DETECTOR.detect_column_type(table, column_index, sample_limit, mode)


__all__ = [
    "DEFAULT_DETECTOR",
    "PrimitiveType",
    "TypeDetector",
    "TypeGrammar",
    "TypeMode",
    "detect_cell_type",
    "detect_column_type",
]
