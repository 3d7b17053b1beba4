"""SemTab-style scoring of CPA predictions."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from semtab_cpa.errors import IoFailure, MalformedInput
from semtab_cpa.paths import ensure_parent_directory
from semtab_cpa.tables import (
    GT_COLUMN_KEYS,
    GT_RELATION_KEYS,
    GT_TABLE_KEYS,
    GroundTruth,
    RelationLabel,
    load_ground_truth,
    pick_field,
    read_csv_records,
    table_id_from_name,
)

ISSUE_DUPLICATE = "DuplicatePrediction"
ISSUE_UNKNOWN_KEY = "UnknownKey"

PredictionRow = Tuple[str, int, str]
Key = Tuple[str, int]


@dataclass(frozen=True)
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int
    correct: int


@dataclass(frozen=True)
class EvalIssue:
    kind: str
    table_id: str
    column_index: int
    rows: int = 1


@dataclass
class EvalReport:
    micro_f1: float
    macro_f1: float
    precision: float
    recall: float
    per_class: Dict[str, ClassScores] = field(default_factory=dict)
    failed_iterations: int = 0
    mean_seconds_per_column: float = 0.0
    targets: int = 0
    submitted: int = 0
    correct: int = 0
    issues: List[EvalIssue] = field(default_factory=list)

    def to_json(self) -> Dict[str, object]:
        return {
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "precision": self.precision,
            "recall": self.recall,
            "failed_iterations": self.failed_iterations,
            "mean_seconds_per_column": self.mean_seconds_per_column,
            "targets": self.targets,
            "submitted": self.submitted,
            "correct": self.correct,
            "per_class": {name: asdict(scores) for name, scores in sorted(self.per_class.items())},
            "issues": [asdict(issue) for issue in self.issues],
        }


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def read_predictions(path: str) -> List[PredictionRow]:
    """Read a `table_id,column_index,relation` predictions CSV; blank relations mark failures."""
    rows: List[PredictionRow] = []
    for line_no, row in enumerate(read_csv_records(path), start=2):
        raw_table = pick_field(row, GT_TABLE_KEYS)
        raw_column = pick_field(row, GT_COLUMN_KEYS)
        if raw_table is None or raw_column is None:
            raise MalformedInput(f"{path}:{line_no}: expected table_id and column_index columns")
        try:
            column_index = int(raw_column.strip())
        except ValueError as exc:
            raise MalformedInput(f"{path}:{line_no}: invalid column index '{raw_column}'") from exc
        relation = (pick_field(row, GT_RELATION_KEYS) or "").strip()
        rows.append((table_id_from_name(raw_table), column_index, relation))
    return rows


def score(
    predictions: Iterable[PredictionRow],
    ground_truth: GroundTruth,
    *,
    mean_seconds_per_column: float = 0.0,
) -> EvalReport:
    rows = list(predictions)
    truth: Dict[Key, RelationLabel] = {
        (table_id, column_index): relation
        for table_id, columns in ground_truth.items()
        for column_index, relation in columns.items()
    }
    key_counts = Counter((table_id, column_index) for table_id, column_index, _ in rows)

    issues: List[EvalIssue] = []
    reported: Set[Key] = set()
    accepted: List[PredictionRow] = []
    for table_id, column_index, relation in rows:
        key = (table_id, column_index)
        if key_counts[key] > 1:
            if key not in reported:
                reported.add(key)
                issues.append(EvalIssue(ISSUE_DUPLICATE, table_id, column_index, key_counts[key]))
            continue
        if key not in truth:
            issues.append(EvalIssue(ISSUE_UNKNOWN_KEY, table_id, column_index))
            continue
        accepted.append((table_id, column_index, relation))

    failed = sum(1 for _, _, relation in accepted if not relation)
    submitted_rows = [(key_table, key_column, relation) for key_table, key_column, relation in accepted if relation]
    correct_rows = [row for row in submitted_rows if truth[(row[0], row[1])] == row[2]]

    precision = _ratio(len(correct_rows), len(submitted_rows))
    recall = _ratio(len(correct_rows), len(truth))

    support = Counter(truth.values())
    predicted = Counter(relation for _, _, relation in submitted_rows)
    correct = Counter(relation for _, _, relation in correct_rows)
    per_class: Dict[str, ClassScores] = {}
    for relation in sorted(set(support) | set(predicted)):
        class_precision = _ratio(correct[relation], predicted[relation])
        class_recall = _ratio(correct[relation], support[relation])
        per_class[relation] = ClassScores(
            precision=class_precision,
            recall=class_recall,
            f1=_f1(class_precision, class_recall),
            support=support[relation],
            predicted=predicted[relation],
            correct=correct[relation],
        )
    gt_classes = sorted(support)
    macro_f1 = sum(per_class[relation].f1 for relation in gt_classes) / len(gt_classes) if gt_classes else 0.0

    return EvalReport(
        micro_f1=_f1(precision, recall),
        macro_f1=macro_f1,
        precision=precision,
        recall=recall,
        per_class=per_class,
        failed_iterations=failed,
        mean_seconds_per_column=mean_seconds_per_column,
        targets=len(truth),
        submitted=len(submitted_rows),
        correct=len(correct_rows),
        issues=issues,
    )


def mean_seconds_from_traces(path: str) -> float:
    """Sum of attempt latencies per annotated column, averaged over columns."""
    totals: Dict[Key, float] = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedInput(f"{path}:{line_no}: invalid trace record: {exc}") from exc
                if record.get("column_index") is None:
                    continue
                key = (str(record.get("table_id")), int(record["column_index"]))
                totals[key] = totals.get(key, 0.0) + float(record.get("latency_seconds") or 0.0)
    except OSError as exc:
        raise IoFailure(f"Unable to read trace log '{path}': {exc}") from exc
    return sum(totals.values()) / len(totals) if totals else 0.0


def evaluate(predictions_path: str, ground_truth_path: str, *, traces_path: Optional[str] = None) -> EvalReport:
    report = score(read_predictions(predictions_path), load_ground_truth(ground_truth_path))
    for issue in report.issues:
        print(f"[WARN] {issue.kind}: {issue.table_id} column {issue.column_index} (excluded)")
    if traces_path:
        report.mean_seconds_per_column = mean_seconds_from_traces(traces_path)
    return report


def compute_precision_gate(report: EvalReport) -> FrozenSet[RelationLabel]:
    """Relations predicted at least once and never wrongly."""
    return frozenset(
        RelationLabel(relation)
        for relation, scores in report.per_class.items()
        if scores.predicted >= 1 and scores.correct == scores.predicted
    )


def write_json(payload: object, path: str) -> None:
    ensure_parent_directory(path)
    try:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
    except OSError as exc:
        raise IoFailure(f"Unable to write '{path}': {exc}") from exc


def save_report(report: EvalReport, path: str) -> None:
    write_json(report.to_json(), path)


def save_precision_gate(gate: Iterable[RelationLabel], path: str) -> None:
    write_json(sorted(gate), path)


REPORT_COLUMNS = ("Macro_F1", "Micro_F1", "P", "R", "Time", "Failed")


def format_report_table(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    """Fixed-order comparison table, one line per run."""
    label_width = max([len("Run")] + [len(label) for label, _ in rows])
    header = "Run".ljust(label_width) + "  " + "  ".join(column.rjust(8) for column in REPORT_COLUMNS)
    lines = [header, "-" * len(header)]
    for label, report in rows:
        values = (
            f"{report.macro_f1:.3f}",
            f"{report.micro_f1:.3f}",
            f"{report.precision:.3f}",
            f"{report.recall:.3f}",
            f"{report.mean_seconds_per_column:.2f}s",
            str(report.failed_iterations),
        )
        lines.append(label.ljust(label_width) + "  " + "  ".join(value.rjust(8) for value in values))
    return "\n".join(lines)


__all__ = [
    "ClassScores",
    "EvalIssue",
    "EvalReport",
    "ISSUE_DUPLICATE",
    "ISSUE_UNKNOWN_KEY",
    "compute_precision_gate",
    "evaluate",
    "format_report_table",
    "mean_seconds_from_traces",
    "read_predictions",
    "save_precision_gate",
    "save_report",
    "write_json",
    "score",
]
