"""Per-table inference: topic detection, the left-to-right column loop and output recovery."""

from __future__ import annotations

import csv
import io
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import AbstractSet, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from tqdm import tqdm

from semtab_cpa.candidates import ApproachConfig, CandidateSet, reduce_candidates
from semtab_cpa.errors import ConfigError, ContractError, IoFailure, TransportFailure
from semtab_cpa.llm_client import BackendConfig, LlmBackend, parse_single_choice
from semtab_cpa.paths import ensure_parent_directory
from semtab_cpa.prompts import (
    DEFAULT_EXCERPT_ROWS,
    KIND_TOPIC,
    PromptBuilder,
    PromptParts,
    RenderedPrompt,
    default_builder,
)
from semtab_cpa.stats import StatsModel
from semtab_cpa.tables import (
    Annotation,
    AnnotationStatus,
    ColumnRef,
    DomainLabel,
    RelationLabel,
    Table,
    sample_rows,
)
from semtab_cpa.type_detector import DEFAULT_DETECTOR, TypeDetector, TypeMode

DEFAULT_SAMPLE_LIMIT = 500
EMPTY_OUTPUT_PLACEHOLDER = "(no answer)"

STAGE_MAIN = "main"
STAGE_RETRY = "retry"
STAGE_FALLBACK_MODEL = "fallback_model"
STAGE_TOPIC = "topic"
STAGE_TOPIC_RETRY = "topic_retry"

DOMAIN_FROM_GROUND_TRUTH = "ground_truth"
DOMAIN_FROM_TOPIC = "topic"
DOMAIN_FROM_FALLBACK = "largest_domain"

PREDICTIONS_HEADER = ("table_id", "column_index", "relation")


@dataclass(frozen=True)
class RunConfig:
    approach: ApproachConfig
    prompt_parts: PromptParts = field(default_factory=PromptParts)
    backend: BackendConfig = field(default_factory=BackendConfig)
    excerpt_rows: int = DEFAULT_EXCERPT_ROWS
    stats_path: Optional[str] = None
    use_gt_domain: bool = False
    type_mode: TypeMode = TypeMode.MAJORITY
    sample_limit: int = DEFAULT_SAMPLE_LIMIT
    workers: int = 1

    def __post_init__(self) -> None:
        if self.approach.uses_stats and not self.stats_path:
            raise ConfigError(f"Approach '{self.approach.name}' needs a stats file (stats.path / --stats)")
        if self.excerpt_rows < 1:
            raise ConfigError("prompt.excerpt_rows must be >= 1")
        if self.sample_limit < 1:
            raise ConfigError("type_detector.sample_limit must be >= 1")
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")


@dataclass
class TableRunTrace:
    table_id: str
    detected_domain: Optional[DomainLabel]
    annotations: List[Annotation] = field(default_factory=list)
    total_seconds: float = 0.0
    domain_source: Optional[str] = None

    @property
    def failed_count(self) -> int:
        return sum(1 for annotation in self.annotations if not annotation.ok)

    def predictions(self) -> List[Tuple[str, int, str]]:
        return [
            (self.table_id, annotation.column.column_index, annotation.predicted or "")
            for annotation in self.annotations
        ]


@dataclass
class DatasetRun:
    traces: List[TableRunTrace] = field(default_factory=list)
    missing_tables: List[str] = field(default_factory=list)
    predictions_path: Optional[str] = None

    @property
    def column_count(self) -> int:
        return sum(len(trace.annotations) for trace in self.traces)

    @property
    def failed_count(self) -> int:
        return sum(trace.failed_count for trace in self.traces)

    @property
    def mean_seconds_per_column(self) -> float:
        columns = self.column_count
        if columns == 0:
            return 0.0
        return sum(annotation.elapsed_seconds for trace in self.traces for annotation in trace.annotations) / columns


class TraceWriter:
    """Thread-safe JSON-lines writer; one object per LLM attempt."""

    def __init__(self, path: Optional[str]) -> None:
        self.path = path
        self._lock = threading.Lock()
        self._handle = None
        if path:
            ensure_parent_directory(path)
            try:
                self._handle = open(path, "w", encoding="utf-8")
            except OSError as exc:
                raise IoFailure(f"Unable to open trace log '{path}': {exc}") from exc

    def write(self, record: Mapping[str, object]) -> None:
        if self._handle is None:
            return
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock:
            self._handle.write(line + "\n")
            self._handle.flush()

    def close(self) -> None:
        with self._lock:
            if self._handle is not None:
                self._handle.close()
                self._handle = None

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()


class CpaPipeline:
    """Annotates target columns of tables with one relation each."""

    def __init__(
        self,
        config: RunConfig,
        backend: LlmBackend,
        *,
        stats: Optional[StatsModel] = None,
        vocabulary: Optional[AbstractSet[RelationLabel]] = None,
        builder: Optional[PromptBuilder] = None,
        detector: Optional[TypeDetector] = None,
        trace_writer: Optional[TraceWriter] = None,
        show_progress: bool = False,
    ) -> None:
        if config.approach.uses_stats and stats is None:
            raise ContractError(f"Approach '{config.approach.name}' needs a loaded stats model")
        self.config = config
        self.backend = backend
        self.stats = stats
        vocab = frozenset(vocabulary) if vocabulary else (stats.vocabulary if stats is not None else frozenset())
        if not vocab:
            raise ConfigError("No relation vocabulary available; provide a stats file or a relations list")
        self.vocabulary = vocab
        self.builder = builder or default_builder()
        self.detector = detector or DEFAULT_DETECTOR
        self.trace_writer = trace_writer or TraceWriter(None)
        self.show_progress = show_progress
        self._fallback_notice = threading.Event()

    # ------------------------------------------------------------------
    # LLM plumbing
    # ------------------------------------------------------------------
    def _ask(
        self,
        prompt: RenderedPrompt,
        *,
        stage: str,
        attempt: int,
        options: Sequence[str],
        use_fallback_model: bool = False,
    ) -> Tuple[str, Optional[str]]:
        if use_fallback_model and not self.backend.config.fallback_model_name and not self._fallback_notice.is_set():
            self._fallback_notice.set()
            print("[INFO] No fallback model configured; the last recovery stage re-asks the main model")
        record: Dict[str, object] = {
            "table_id": prompt.table_id,
            "column_index": prompt.column_index,
            "stage": stage,
            "attempt": attempt,
            "prompt_sha256": prompt.sha256,
            "candidate_count": prompt.candidate_count,
        }
        started = time.perf_counter()
        try:
            response = self.backend.complete(prompt, use_fallback_model=use_fallback_model)
        except TransportFailure as exc:
            record.update(
                {
                    "model": self.backend.config.model_for(use_fallback_model),
                    "latency_seconds": round(time.perf_counter() - started, 6),
                    "outcome": "transport_error",
                    "error": str(exc),
                }
            )
            self.trace_writer.write(record)
            raise
        choice = parse_single_choice(response.text, options)
        record.update(
            {
                "model": response.model_used,
                "latency_seconds": round(response.latency_seconds, 6),
                "outcome": "ok" if choice is not None else "unparsed",
                "choice": choice,
            }
        )
        self.trace_writer.write(record)
        return response.text, choice

    # ------------------------------------------------------------------
    # Topic detection
    # ------------------------------------------------------------------
    def _detect_domain(self, table: Table) -> Tuple[Optional[DomainLabel], str]:
        if self.config.use_gt_domain and table.domain is not None:
            return table.domain, DOMAIN_FROM_GROUND_TRUTH
        if self.stats is None or not self.stats.domain_dict.entries:
            raise ContractError("Topic detection needs a stats model with a non-empty domain dictionary")
        domain_dict = self.stats.domain_dict
        prompt = self.builder.render_topic_prompt(table, set(domain_dict.domains()), self.config.excerpt_rows)
        try:
            text, choice = self._ask(prompt, stage=STAGE_TOPIC, attempt=1, options=prompt.options)
            if choice is None:
                retry = self.builder.render_choice_retry(
                    text if text.strip() else EMPTY_OUTPUT_PLACEHOLDER,
                    prompt.options,
                    table_id=table.id,
                    kind=KIND_TOPIC,
                )
                _, choice = self._ask(retry, stage=STAGE_TOPIC_RETRY, attempt=2, options=prompt.options)
        except TransportFailure as exc:
            print(f"[WARN] Topic detection for '{table.id}' failed: {exc}")
            choice = None
        if choice is not None:
            return DomainLabel(choice), DOMAIN_FROM_TOPIC
        fallback = domain_dict.largest_domain()
        print(f"[WARN] Could not detect the topic of '{table.id}'; falling back to '{fallback}'")
        return fallback, DOMAIN_FROM_FALLBACK

    def detect_table_domain(self, table: Table) -> Optional[DomainLabel]:
        return self._detect_domain(table)[0]

    # ------------------------------------------------------------------
    # Column annotation
    # ------------------------------------------------------------------
    def _recover(self, table: Table, column_index: int, candidates: CandidateSet) -> Tuple[Optional[RelationLabel], int]:
        """Main prompt, then a single-word retry, then the main prompt against the fallback model."""
        options = candidates.relations
        prompt = self.builder.render_annotation_prompt(
            table, column_index, candidates, self.config.prompt_parts, self.config.excerpt_rows
        )
        attempt = 1
        try:
            text, choice = self._ask(prompt, stage=STAGE_MAIN, attempt=attempt, options=options)
            if choice is not None:
                return RelationLabel(choice), attempt
            attempt = 2
            retry = self.builder.render_retry_prompt(
                text if text.strip() else EMPTY_OUTPUT_PLACEHOLDER,
                candidates,
                table_id=table.id,
                column_index=column_index,
            )
            _, choice = self._ask(retry, stage=STAGE_RETRY, attempt=attempt, options=options)
            if choice is not None:
                return RelationLabel(choice), attempt
            attempt = 3
            _, choice = self._ask(
                prompt,
                stage=STAGE_FALLBACK_MODEL,
                attempt=attempt,
                options=options,
                use_fallback_model=True,
            )
            if choice is not None:
                return RelationLabel(choice), attempt
        except TransportFailure as exc:
            print(f"[WARN] {table.id} column {column_index}: {exc}")
        return None, attempt

    def annotate_table(self, table: Table, target_columns: Sequence[int]) -> TableRunTrace:
        columns = list(target_columns)
        if columns != sorted(set(columns)):
            raise ContractError(f"Target columns for '{table.id}' must be unique and ascending")
        for column_index in columns:
            if not 0 <= column_index < table.column_count:
                raise ContractError(f"Column {column_index} is out of range for table '{table.id}'")

        started = time.perf_counter()
        approach = self.config.approach
        domain: Optional[DomainLabel] = None
        domain_source: Optional[str] = None
        if approach.needs_domain:
            domain, domain_source = self._detect_domain(table)
        sample = sample_rows(table, self.config.sample_limit) if table.row_count else table

        trace = TableRunTrace(table_id=table.id, detected_domain=domain, domain_source=domain_source)
        predicted: List[RelationLabel] = []
        for column_index in columns:
            column_started = time.perf_counter()
            coltype = self.detector.detect_column_type(
                sample, column_index, self.config.sample_limit, self.config.type_mode
            )
            candidates = reduce_candidates(
                self.vocabulary,
                domain,
                coltype,
                frozenset(predicted),
                approach.anchors(predicted),
                self.stats,
                approach,
            )
            ref = ColumnRef(table.id, column_index)
            if candidates.empty:
                print(f"[WARN] {table.id} column {column_index}: no candidates left ({', '.join(candidates.applied_filters)})")
                trace.annotations.append(
                    Annotation(ref, None, AnnotationStatus.NO_CANDIDATES, 1, time.perf_counter() - column_started)
                )
                continue
            if candidates.fallback_used:
                print(f"[INFO] {table.id} column {column_index}: dropped filter(s) {', '.join(candidates.dropped_filters)}")
            relation, attempts = self._recover(table, column_index, candidates)
            elapsed = time.perf_counter() - column_started
            if relation is None:
                trace.annotations.append(Annotation(ref, None, AnnotationStatus.FAILED_FORMAT, attempts, elapsed))
                continue
            predicted.append(relation)
            trace.annotations.append(Annotation(ref, relation, AnnotationStatus.OK, attempts, elapsed))
        trace.total_seconds = time.perf_counter() - started
        return trace

    # ------------------------------------------------------------------
    # Batch driver
    # ------------------------------------------------------------------
    def run_dataset(
        self,
        tables: Iterable[Table],
        targets: Mapping[str, Sequence[int]],
        predictions_path: Optional[str] = None,
    ) -> DatasetRun:
        by_id: Dict[str, Table] = {}
        for table in tables:
            if table.id in targets:
                by_id.setdefault(table.id, table)

        run = DatasetRun(predictions_path=predictions_path)
        jobs: List[Tuple[Table, List[int]]] = []
        for table_id in sorted(targets):
            table = by_id.get(table_id)
            if table is None:
                print(f"[WARN] Target table '{table_id}' not found in the input tables")
                run.missing_tables.append(table_id)
                continue
            columns = sorted(set(targets[table_id]))
            valid = [column for column in columns if 0 <= column < table.column_count]
            if len(valid) != len(columns):
                print(f"[WARN] Ignoring out-of-range target column(s) for '{table_id}'")
            jobs.append((table, valid))

        def _run(job: Tuple[Table, List[int]]) -> TableRunTrace:
            return self.annotate_table(*job)

        progress_disabled = None if self.show_progress else True
        if self.config.workers == 1:
            results = (_run(job) for job in jobs)
            run.traces = list(tqdm(results, total=len(jobs), desc="annotate", unit="table", disable=progress_disabled))
        else:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = pool.map(_run, jobs)
                run.traces = list(tqdm(results, total=len(jobs), desc="annotate", unit="table", disable=progress_disabled))

        if predictions_path:
            write_predictions(run.traces, predictions_path)
        return run


def render_predictions(traces: Iterable[TableRunTrace]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(PREDICTIONS_HEADER)
    for trace in traces:
        for table_id, column_index, relation in trace.predictions():
            writer.writerow((table_id, column_index, relation))
    return buffer.getvalue()


def write_predictions(traces: Iterable[TableRunTrace], path: str) -> None:
    ensure_parent_directory(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as handle:
            handle.write(render_predictions(traces))
    except OSError as exc:
        raise IoFailure(f"Unable to write predictions '{path}': {exc}") from exc


__all__ = [
    "CpaPipeline",
    "DatasetRun",
    "PREDICTIONS_HEADER",
    "RunConfig",
    "TableRunTrace",
    "TraceWriter",
    "render_predictions",
    "write_predictions",
]
