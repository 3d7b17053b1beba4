"""Core table, label and annotation types plus table ingestion."""

from __future__ import annotations

import csv
import gzip
import io
import json
import os
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from enum import Enum
from typing import Dict, Iterator, List, Mapping, NewType, Optional, Sequence, Tuple

from semtab_cpa.errors import ContractError, IoFailure, MalformedInput
from semtab_cpa.paths import list_table_files, strip_table_suffixes

RelationLabel = NewType("RelationLabel", str)
DomainLabel = NewType("DomainLabel", str)

GroundTruth = Dict[str, Dict[int, RelationLabel]]

GT_TABLE_KEYS = ("table_id", "table_name", "table")
GT_COLUMN_KEYS = ("column_index", "column_id", "col_id", "column")
GT_RELATION_KEYS = ("relation", "label", "property")


def _clean_label(value: object, kind: str) -> str:
    text = "" if value is None else str(value).strip()
    if not text:
        raise ValueError(f"{kind} label must be non-empty")
    return text


def relation_label(value: object) -> RelationLabel:
    return RelationLabel(_clean_label(value, "Relation"))


def domain_label(value: object) -> DomainLabel:
    return DomainLabel(_clean_label(value, "Domain"))


class TableFormat(str, Enum):
    CSV = "csv"
    JSON_ROWS = "jsonrows"

    @classmethod
    def from_path(cls, path: str) -> "TableFormat":
        lowered = os.path.basename(path).lower()
        if lowered.endswith(".gz"):
            lowered = lowered[:-3]
        if lowered.endswith(".csv"):
            return cls.CSV
        if lowered.endswith((".json", ".jsonl")):
            return cls.JSON_ROWS
        raise MalformedInput(f"Cannot infer table format from '{path}'")


@dataclass(frozen=True)
class Table:
    id: str
    rows: Tuple[Tuple[str, ...], ...]
    column_count: int
    domain: Optional[DomainLabel] = None
    ground_truth: Optional[Dict[int, RelationLabel]] = field(default=None, hash=False)

    def __post_init__(self) -> None:
        if self.column_count < 1:
            raise MalformedInput(f"Table '{self.id}' must have at least one column")
        for index, row in enumerate(self.rows):
            if len(row) != self.column_count:
                raise MalformedInput(
                    f"Table '{self.id}' row {index} has {len(row)} cells; expected {self.column_count}"
                )
        for column_index in self.ground_truth or {}:
            if not 0 <= column_index < self.column_count:
                raise MalformedInput(
                    f"Table '{self.id}' ground truth references column {column_index} outside [0, {self.column_count})"
                )

    @property
    def row_count(self) -> int:
        return len(self.rows)

    def column(self, column_index: int) -> Tuple[str, ...]:
        if not 0 <= column_index < self.column_count:
            raise ContractError(f"Column {column_index} is out of range for table '{self.id}'")
        return tuple(row[column_index] for row in self.rows)

    def with_labels(
        self,
        *,
        domain: Optional[DomainLabel] = None,
        ground_truth: Optional[Mapping[int, RelationLabel]] = None,
    ) -> "Table":
        return replace(
            self,
            domain=domain if domain is not None else self.domain,
            ground_truth=dict(ground_truth) if ground_truth is not None else self.ground_truth,
        )


@dataclass(frozen=True)
class ColumnRef:
    table_id: str
    column_index: int

    def __post_init__(self) -> None:
        if self.column_index < 0:
            raise ContractError(f"Column index must be >= 0 (got {self.column_index})")


class AnnotationStatus(str, Enum):
    OK = "Ok"
    FAILED_FORMAT = "FailedFormat"
    NO_CANDIDATES = "NoCandidates"


@dataclass(frozen=True)
class Annotation:
    column: ColumnRef
    predicted: Optional[RelationLabel]
    status: AnnotationStatus
    attempts: int
    elapsed_seconds: float

    def __post_init__(self) -> None:
        if (self.status is AnnotationStatus.OK) != (self.predicted is not None):
            raise ContractError("Annotation status Ok requires a prediction (and only Ok carries one)")
        if self.attempts not in (1, 2, 3):
            raise ContractError(f"Annotation attempts must be 1, 2 or 3 (got {self.attempts})")
        if self.elapsed_seconds < 0:
            raise ContractError("Annotation elapsed time cannot be negative")

    @property
    def ok(self) -> bool:
        return self.status is AnnotationStatus.OK


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------
def _coerce_cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        try:
            return format(Decimal(repr(value)), "f")
        except InvalidOperation:
            return repr(value)
    if isinstance(value, str):
        return value
    return json.dumps(value, sort_keys=True, ensure_ascii=False)


def _decode(raw: bytes) -> str:
    try:
        return raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise MalformedInput(f"Table is not valid UTF-8: {exc}") from exc


def _pad(cells: Sequence[str], width: int, line_no: int) -> Tuple[str, ...]:
    if len(cells) > width:
        raise MalformedInput(f"Row {line_no} has {len(cells)} cells; header width is {width}")
    return tuple(cells) + ("",) * (width - len(cells))


def _parse_csv(text: str, delimiter: str) -> Tuple[int, List[Tuple[str, ...]]]:
    reader = csv.reader(io.StringIO(text, newline=""), delimiter=delimiter, strict=True)
    width = 0
    rows: List[Tuple[str, ...]] = []
    try:
        for record in reader:
            if not record:
                continue
            if not width:
                width = len(record)
                continue
            rows.append(_pad(record, width, reader.line_num))
    except csv.Error as exc:
        raise MalformedInput(f"CSV parse error near line {reader.line_num}: {exc}") from exc
    if not width:
        raise MalformedInput("CSV input has no header row")
    return width, rows


def _json_row_cells(payload: object, line_no: int) -> List[str]:
    if isinstance(payload, list):
        return [_coerce_cell(value) for value in payload]
    if isinstance(payload, dict):
        indexed: Dict[int, str] = {}
        for key, value in payload.items():
            try:
                indexed[int(key)] = _coerce_cell(value)
            except (TypeError, ValueError) as exc:
                raise MalformedInput(f"Line {line_no}: object key '{key}' is not a column index") from exc
        if not indexed:
            return []
        if min(indexed) < 0:
            raise MalformedInput(f"Line {line_no}: negative column index")
        return [indexed.get(index, "") for index in range(max(indexed) + 1)]
    raise MalformedInput(f"Line {line_no}: expected a JSON array of cell values")


def _parse_json_rows(text: str) -> Tuple[int, List[Tuple[str, ...]]]:
    # no header row: the widest row sets the width and shorter rows are padded
    records: List[Tuple[int, List[str]]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedInput(f"Line {line_no}: invalid JSON ({exc})") from exc
        records.append((line_no, _json_row_cells(payload, line_no)))
    width = max((len(cells) for _, cells in records), default=0)
    if not width:
        raise MalformedInput("JSON-rows input has no non-empty rows")
    return width, [_pad(cells, width, line_no) for line_no, cells in records]


def parse_table(
    raw: bytes,
    fmt: TableFormat,
    *,
    table_id: str = "",
    domain: Optional[DomainLabel] = None,
    ground_truth: Optional[Mapping[int, RelationLabel]] = None,
    delimiter: str = ",",
) -> Table:
    """Parse CSV (header row required) or JSON-rows bytes into a rectangular Table."""
    text = _decode(raw)
    if fmt is TableFormat.CSV:
        width, rows = _parse_csv(text, delimiter)
    else:
        width, rows = _parse_json_rows(text)
    return Table(
        id=table_id,
        rows=tuple(rows),
        column_count=width,
        domain=domain,
        ground_truth=dict(ground_truth) if ground_truth is not None else None,
    )


def serialize_table(table: Table, fmt: TableFormat, *, delimiter: str = ",") -> bytes:
    if fmt is TableFormat.CSV:
        buffer = io.StringIO(newline="")
        writer = csv.writer(buffer, delimiter=delimiter, lineterminator="\n")
        writer.writerow([f"col{index}" for index in range(table.column_count)])
        writer.writerows(table.rows)
        return buffer.getvalue().encode("utf-8")
    lines = [json.dumps(list(row), ensure_ascii=False) for row in table.rows]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def sample_rows(table: Table, n: int) -> Table:
    """Deterministic head sample of at most `n` rows."""
    if n < 1:
        raise ContractError(f"Sample size must be >= 1 (got {n})")
    if table.row_count <= n:
        return table
    return replace(table, rows=table.rows[:n])


# ----------------------------------------------------------------------
# Files
# ----------------------------------------------------------------------
def table_id_from_name(name: str) -> str:
    return strip_table_suffixes(name)


def domain_from_filename(name: str) -> Optional[DomainLabel]:
    """`Book_example.com_September2020.json.gz` -> `Book`."""
    stem = table_id_from_name(name)
    if "_" not in stem:
        return None
    prefix = stem.split("_", 1)[0].strip()
    if not prefix:
        return None
    return DomainLabel(prefix)


def read_bytes(path: str) -> bytes:
    try:
        if path.lower().endswith(".gz"):
            with gzip.open(path, "rb") as handle:
                return handle.read()
        with open(path, "rb") as handle:
            return handle.read()
    except (OSError, EOFError) as exc:
        raise IoFailure(f"Unable to read '{path}': {exc}") from exc


def read_table_file(
    path: str,
    *,
    fmt: Optional[TableFormat] = None,
    domain: Optional[DomainLabel] = None,
    ground_truth: Optional[Mapping[int, RelationLabel]] = None,
) -> Table:
    table_format = fmt or TableFormat.from_path(path)
    return parse_table(
        read_bytes(path),
        table_format,
        table_id=table_id_from_name(path),
        domain=domain,
        ground_truth=ground_truth,
    )


def iter_table_files(directory: str) -> Iterator[Tuple[str, str]]:
    """Yield `(table_id, path)` pairs for every table file in `directory`."""
    for path in list_table_files(directory):
        yield table_id_from_name(path), path


def pick_field(row: Mapping[str, str], keys: Sequence[str]) -> Optional[str]:
    for key in keys:
        if key in row and row[key] is not None:
            return row[key]
    return None


def read_csv_records(path: str) -> List[Dict[str, str]]:
    try:
        text = _decode(read_bytes(path))
        reader = csv.DictReader(io.StringIO(text, newline=""))
        if reader.fieldnames is None:
            raise MalformedInput(f"'{path}' has no header row")
        reader.fieldnames = [name.strip().lower() for name in reader.fieldnames]
        return list(reader)
    except csv.Error as exc:
        raise MalformedInput(f"CSV parse error in '{path}': {exc}") from exc


def load_column_labels(path: str, *, require_relation: bool) -> GroundTruth:
    """Read a `table_id,column_index,relation` CSV (relation optional for target files)."""
    labels: GroundTruth = {}
    for line_no, row in enumerate(read_csv_records(path), start=2):
        raw_table = pick_field(row, GT_TABLE_KEYS)
        raw_column = pick_field(row, GT_COLUMN_KEYS)
        if raw_table is None or raw_column is None:
            raise MalformedInput(f"{path}:{line_no}: expected table_id and column_index columns")
        try:
            column_index = int(raw_column.strip())
        except ValueError as exc:
            raise MalformedInput(f"{path}:{line_no}: invalid column index '{raw_column}'") from exc
        raw_relation = (pick_field(row, GT_RELATION_KEYS) or "").strip()
        if require_relation and not raw_relation:
            raise MalformedInput(f"{path}:{line_no}: missing relation label")
        table_columns = labels.setdefault(table_id_from_name(raw_table), {})
        if column_index in table_columns:
            print(f"[WARN] {path}:{line_no}: duplicate entry for column {column_index}; keeping the first")
            continue
        table_columns[column_index] = RelationLabel(raw_relation)
    return labels


def load_ground_truth(path: str) -> GroundTruth:
    return load_column_labels(path, require_relation=True)


def load_targets(path: str) -> Dict[str, List[int]]:
    labels = load_column_labels(path, require_relation=False)
    return {table_id: sorted(columns) for table_id, columns in labels.items()}


def load_domain_map(path: str) -> Dict[str, DomainLabel]:
    domains: Dict[str, DomainLabel] = {}
    for line_no, row in enumerate(read_csv_records(path), start=2):
        raw_table = pick_field(row, GT_TABLE_KEYS)
        raw_domain = pick_field(row, ("domain", "topic", "type"))
        if raw_table is None or not (raw_domain or "").strip():
            raise MalformedInput(f"{path}:{line_no}: expected table_id and domain columns")
        domains[table_id_from_name(raw_table)] = domain_label(raw_domain)
    return domains


__all__ = [
    "Annotation",
    "AnnotationStatus",
    "ColumnRef",
    "DomainLabel",
    "GroundTruth",
    "RelationLabel",
    "Table",
    "TableFormat",
    "domain_from_filename",
    "domain_label",
    "iter_table_files",
    "load_column_labels",
    "load_domain_map",
    "load_ground_truth",
    "load_targets",
    "parse_table",
    "pick_field",
    "read_bytes",
    "read_csv_records",
    "read_table_file",
    "relation_label",
    "sample_rows",
    "serialize_table",
    "table_id_from_name",
]
