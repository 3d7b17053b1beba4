"""Service layer binding corpus loading, stats, annotation, evaluation and ablation."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

from semtab_cpa.candidates import VARIANTS, ApproachConfig, load_precision_gate
from semtab_cpa.config import AppConfig
from semtab_cpa.errors import ConfigError, ConfigFileError, MalformedInput
from semtab_cpa.evaluator import (
    EvalReport,
    compute_precision_gate,
    evaluate,
    format_report_table,
    save_precision_gate,
    save_report,
    write_json,
)
from semtab_cpa.llm_client import LlmBackend, create_backend
from semtab_cpa.paths import display_path
from semtab_cpa.pipeline import CpaPipeline, DatasetRun, RunConfig, TraceWriter
from semtab_cpa.prompts import PromptBuilder, PromptParts, PromptTemplate
from semtab_cpa.stats import BuildReport, StatsBuilder, StatsModel, load_stats, save_stats
from semtab_cpa.tables import (
    DomainLabel,
    GroundTruth,
    RelationLabel,
    Table,
    domain_from_filename,
    iter_table_files,
    load_domain_map,
    load_ground_truth,
    load_targets,
    read_table_file,
    relation_label,
)


def load_relations(path: str) -> FrozenSet[RelationLabel]:
    """Relation vocabulary from a JSON array or a one-label-per-line text file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigFileError(f"Unable to read relations file '{path}': {exc}") from exc
    if path.lower().endswith(".json"):
        try:
            items = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"Invalid JSON in relations file '{path}': {exc}") from exc
        if not isinstance(items, list):
            raise ConfigFileError(f"Relations file '{path}' must be a JSON array")
    else:
        items = [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    try:
        return frozenset(relation_label(item) for item in items)
    except ValueError as exc:
        raise ConfigFileError(f"Relations file '{path}': {exc}") from exc


class CorpusService:
    """Reads table directories and attaches domains and labels."""

    def __init__(self, app: AppConfig) -> None:
        self.app = app
        self._domain_map: Optional[Dict[str, DomainLabel]] = None

    def domain_for(self, table_id: str, path: str) -> Optional[DomainLabel]:
        source = self.app.run.domain_source
        if source == "filename":
            return domain_from_filename(os.path.basename(path))
        if source == "map":
            if self._domain_map is None:
                self._domain_map = load_domain_map(self.app.run.domain_map or "")
            return self._domain_map.get(table_id)
        return None

    def table_paths(self, directory: str, only: Optional[Sequence[str]] = None) -> List[Tuple[str, str]]:
        wanted = set(only) if only is not None else None
        return [(table_id, path) for table_id, path in iter_table_files(directory) if wanted is None or table_id in wanted]

    def domains(self, directory: str, only: Optional[Sequence[str]] = None) -> Dict[str, DomainLabel]:
        resolved: Dict[str, DomainLabel] = {}
        for table_id, path in self.table_paths(directory, only):
            domain = self.domain_for(table_id, path)
            if domain is not None:
                resolved[table_id] = domain
        return resolved

    def load_tables(
        self,
        directory: str,
        *,
        ground_truth: Optional[GroundTruth] = None,
        only: Optional[Sequence[str]] = None,
    ) -> Iterator[Table]:
        for table_id, path in self.table_paths(directory, only):
            labels = (ground_truth or {}).get(table_id)
            try:
                yield read_table_file(path, domain=self.domain_for(table_id, path), ground_truth=labels)
            except MalformedInput as exc:
                print(f"[WARN] Skipping {display_path(path, self.app.run.workspace_root)}: {exc}")


class StatsService:
    """Offline stats build and stats file access."""

    def __init__(self, app: AppConfig, corpus: CorpusService) -> None:
        self.app = app
        self.corpus = corpus
        self.last_report = BuildReport()

    def build(self, corpus_dir: str, gt_path: str, out_path: str, *, show_progress: bool = True) -> StatsModel:
        ground_truth = load_ground_truth(gt_path)
        builder = StatsBuilder(
            self.app.stats.threshold,
            self.app.stats.sample_size,
            detector=self.app.type_detector.build_detector(),
            mode=self.app.type_detector.stats_mode,
            workers=self.app.run.workers,
            show_progress=show_progress,
        )
        model = builder.build(self.corpus.load_tables(corpus_dir, ground_truth=ground_truth))
        save_stats(model, out_path)
        self.last_report = builder.report
        for line in builder.report.summary_lines():
            print(f"[INFO] {line}")
        print(f"[INFO] Stats written to {display_path(out_path, self.app.run.workspace_root)}")
        return model

    def load(self, path: Optional[str]) -> Optional[StatsModel]:
        return load_stats(path) if path else None


@dataclass(frozen=True)
class AblationCell:
    variant: str
    parts: Optional[PromptParts] = None

    @property
    def label(self) -> str:
        if self.parts is None:
            return self.variant
        return f"{self.variant}:{self.parts.to_flag()}"

    @property
    def directory_name(self) -> str:
        return self.label.replace(":", "-")


def parse_matrix(matrix: str) -> List[AblationCell]:
    """`base,rd,rd:role+cot,rdc_p` -> cells; parts use `+` between role/example/cot or `none`."""
    cells: List[AblationCell] = []
    for token in (matrix or "").split(","):
        token = token.strip()
        if not token:
            continue
        variant, _, parts = token.partition(":")
        variant = variant.strip().lower()
        if variant not in VARIANTS:
            raise ConfigError(f"Unknown approach '{variant}' in matrix (expected one of {', '.join(VARIANTS)})")
        cell = AblationCell(variant, PromptParts.from_flag(parts) if parts.strip() else None)
        if cell in cells:
            raise ConfigError(f"Matrix cell '{cell.label}' is listed twice")
        cells.append(cell)
    if not cells:
        raise ConfigError("The ablation matrix is empty")
    return cells


class AnnotationService:
    """Builds pipelines from the app config and runs them over a table directory."""

    def __init__(self, app: AppConfig, corpus: CorpusService, stats: StatsService) -> None:
        self.app = app
        self.corpus = corpus
        self.stats = stats
        self._builder: Optional[PromptBuilder] = None

    @property
    def builder(self) -> PromptBuilder:
        if self._builder is None:
            template = PromptTemplate.from_file(self.app.prompt.template_path)
            self._builder = PromptBuilder(template, cell_max_chars=self.app.prompt.cell_max_chars)
        return self._builder

    def approach(self, variant: str, precision_gate: Optional[FrozenSet[RelationLabel]] = None) -> ApproachConfig:
        gate = precision_gate
        if gate is None and variant == "rdc_p":
            if not self.app.approach.precision_gate_path:
                raise ConfigError("Approach 'rdc_p' needs approach.precision_gate_path (see evaluate --gate-out)")
            gate = load_precision_gate(self.app.approach.precision_gate_path)
        return ApproachConfig.for_variant(variant, precision_gate=gate, fallback=self.app.approach.fallback)

    def backend(self, ground_truth: Optional[GroundTruth], domains: Dict[str, DomainLabel]) -> LlmBackend:
        return create_backend(
            self.app.backend.kind,
            self.app.backend.client,
            ground_truth=ground_truth,
            domains=domains,
            script_path=self.app.backend.script_path,
        )

    def annotate(
        self,
        tables_dir: str,
        targets_path: str,
        out_path: str,
        *,
        variant: Optional[str] = None,
        parts: Optional[PromptParts] = None,
        gt_path: Optional[str] = None,
        relations_path: Optional[str] = None,
        precision_gate: Optional[FrozenSet[RelationLabel]] = None,
        trace_path: Optional[str] = None,
        show_progress: bool = True,
    ) -> DatasetRun:
        targets = load_targets(targets_path)
        ground_truth = load_ground_truth(gt_path) if gt_path else None
        approach = self.approach(variant or self.app.approach.variant, precision_gate)
        run_config = RunConfig(
            approach=approach,
            prompt_parts=parts or self.app.prompt.parts,
            backend=self.app.backend.client,
            excerpt_rows=self.app.prompt.excerpt_rows,
            stats_path=self.app.stats.path,
            use_gt_domain=self.app.run.use_gt_domain,
            type_mode=self.app.type_detector.mode,
            sample_limit=self.app.type_detector.sample_limit,
            workers=self.app.run.workers,
        )
        stats_model = self.stats.load(self.app.stats.path)
        vocabulary = load_relations(relations_path) if relations_path else None
        domains = self.corpus.domains(tables_dir, sorted(targets))
        trace_file = trace_path or self.app.run.trace_log or os.path.splitext(out_path)[0] + ".trace.jsonl"
        with TraceWriter(trace_file) as writer:
            pipeline = CpaPipeline(
                run_config,
                self.backend(ground_truth, domains),
                stats=stats_model,
                vocabulary=vocabulary,
                builder=self.builder,
                detector=self.app.type_detector.build_detector(),
                trace_writer=writer,
                show_progress=show_progress,
            )
            run = pipeline.run_dataset(self.corpus.load_tables(tables_dir, only=sorted(targets)), targets, out_path)
        root = self.app.run.workspace_root
        print(
            f"[INFO] {approach.name}: annotated {run.column_count} column(s) in {len(run.traces)} table(s); "
            f"{run.failed_count} failed, {len(run.missing_tables)} missing table(s)"
        )
        print(f"[INFO] Predictions written to {display_path(out_path, root)}; trace log {display_path(trace_file, root)}")
        return run


class EvaluationService:
    def __init__(self, app: AppConfig) -> None:
        self.app = app

    def evaluate(
        self,
        predictions_path: str,
        gt_path: str,
        *,
        report_out: Optional[str] = None,
        gate_out: Optional[str] = None,
        traces_path: Optional[str] = None,
        label: str = "run",
    ) -> EvalReport:
        report = evaluate(predictions_path, gt_path, traces_path=traces_path)
        print(format_report_table([(label, report)]))
        root = self.app.run.workspace_root
        if report_out:
            save_report(report, report_out)
            print(f"[INFO] Report written to {display_path(report_out, root)}")
        if gate_out:
            gate = compute_precision_gate(report)
            save_precision_gate(gate, gate_out)
            print(f"[INFO] Precision gate ({len(gate)} relation(s)) written to {display_path(gate_out, root)}")
        return report


class AblationService:
    """Runs every matrix cell over the same inputs and collects one report per cell."""

    def __init__(self, app: AppConfig, annotation: AnnotationService) -> None:
        self.app = app
        self.annotation = annotation

    def run(
        self,
        cells: Sequence[AblationCell],
        tables_dir: str,
        targets_path: str,
        gt_path: str,
        out_dir: str,
        *,
        relations_path: Optional[str] = None,
        gate_tables: Optional[str] = None,
        gate_gt: Optional[str] = None,
        show_progress: bool = True,
    ) -> List[Tuple[str, EvalReport]]:
        root = self.app.run.workspace_root
        rows: List[Tuple[str, EvalReport]] = []
        timed_rows: List[Tuple[str, EvalReport]] = []
        gates: Dict[str, FrozenSet[RelationLabel]] = {}
        comparison: Dict[str, Dict[str, object]] = {}
        for cell in cells:
            cell_dir = os.path.join(out_dir, cell.directory_name)
            predictions_path = os.path.join(cell_dir, "predictions.csv")
            gate = None
            if cell.variant == "rdc_p" and not self.app.approach.precision_gate_path:
                if gate_tables and gate_gt:
                    gate = self._validation_gate(
                        cell, gate_tables, gate_gt, cell_dir, relations_path=relations_path, show_progress=show_progress
                    )
                else:
                    gate = gates.get(_parts_key(cell), next(iter(gates.values()), None))
                if gate is None:
                    raise ConfigError(
                        "Matrix cell 'rdc_p' needs approach.precision_gate_path, --gate-tables/--gate-gt or an earlier 'rd' cell"
                    )
                save_precision_gate(gate, os.path.join(cell_dir, "precision_gate.json"))
            print(f"[INFO] Ablation cell {cell.label}")
            run = self.annotation.annotate(
                tables_dir,
                targets_path,
                predictions_path,
                variant=cell.variant,
                parts=cell.parts,
                gt_path=gt_path,
                relations_path=relations_path,
                precision_gate=gate,
                trace_path=os.path.join(cell_dir, "trace.jsonl"),
                show_progress=show_progress,
            )
            report = evaluate(predictions_path, gt_path)
            save_report(report, os.path.join(cell_dir, "report.json"))
            if cell.variant == "rd":
                gate_from_rd = compute_precision_gate(report)
                gates[_parts_key(cell)] = gate_from_rd
                save_precision_gate(gate_from_rd, os.path.join(cell_dir, "precision_gate.json"))
            write_json(
                {
                    "mean_seconds_per_column": run.mean_seconds_per_column,
                    "total_seconds": sum(trace.total_seconds for trace in run.traces),
                    "columns": run.column_count,
                },
                os.path.join(cell_dir, "timing.json"),
            )
            rows.append((cell.label, report))
            timed_rows.append((cell.label, replace(report, mean_seconds_per_column=run.mean_seconds_per_column)))
            comparison[cell.label] = {
                "micro_f1": report.micro_f1,
                "macro_f1": report.macro_f1,
                "precision": report.precision,
                "recall": report.recall,
                "failed_iterations": report.failed_iterations,
                "predictions": display_path(predictions_path, root),
                "report": display_path(os.path.join(cell_dir, "report.json"), root),
            }
        write_json(comparison, os.path.join(out_dir, "comparison.json"))
        print(format_report_table(timed_rows))
        return rows

    def _validation_gate(
        self,
        cell: AblationCell,
        gate_tables: str,
        gate_gt: str,
        cell_dir: str,
        *,
        relations_path: Optional[str],
        show_progress: bool,
    ) -> FrozenSet[RelationLabel]:
        """Gate from an `rd` run over a separate validation split."""
        validation_dir = os.path.join(cell_dir, "validation_rd")
        predictions_path = os.path.join(validation_dir, "predictions.csv")
        print(f"[INFO] Deriving the precision gate for {cell.label} from {display_path(gate_tables, self.app.run.workspace_root)}")
        self.annotation.annotate(
            gate_tables,
            gate_gt,
            predictions_path,
            variant="rd",
            parts=cell.parts,
            gt_path=gate_gt,
            relations_path=relations_path,
            trace_path=os.path.join(validation_dir, "trace.jsonl"),
            show_progress=show_progress,
        )
        report = evaluate(predictions_path, gate_gt)
        save_report(report, os.path.join(validation_dir, "report.json"))
        return compute_precision_gate(report)


def _parts_key(cell: AblationCell) -> str:
    return cell.parts.to_flag() if cell.parts else ""


@dataclass
class Services:
    corpus: CorpusService
    stats: StatsService
    annotation: AnnotationService
    evaluation: EvaluationService
    ablation: AblationService


def build_services(app: AppConfig) -> Services:
    corpus = CorpusService(app)
    stats = StatsService(app, corpus)
    annotation = AnnotationService(app, corpus, stats)
    return Services(
        corpus=corpus,
        stats=stats,
        annotation=annotation,
        evaluation=EvaluationService(app),
        ablation=AblationService(app, annotation),
    )


__all__ = [
    "AblationCell",
    "AblationService",
    "AnnotationService",
    "CorpusService",
    "EvaluationService",
    "Services",
    "StatsService",
    "build_services",
    "load_relations",
    "parse_matrix",
]
