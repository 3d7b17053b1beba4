"""Command-line entry point: build-stats, annotate, evaluate and ablate."""

from __future__ import annotations

import argparse
from typing import Dict, Optional, Sequence

from semtab_cpa import config
from semtab_cpa.candidates import VARIANTS
from semtab_cpa.errors import ConfigError, CpaError, DataError
from semtab_cpa.llm_client import BACKEND_KINDS
from semtab_cpa.services import Services, build_services, parse_matrix

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_CONFIG_ERROR = 2


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (default: $CPA_CONFIG_PATH or cpa_config.json).")
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="Print the effective merged configuration before running.",
    )
    parser.add_argument(
        "--workspace-root",
        dest="workspace_root",
        help="Directory that output paths are recorded relative to (default: current directory).",
    )
    parser.add_argument("--workers", type=int, help="Table-level parallelism (default 1).")
    parser.add_argument("--no-progress", action="store_true", help="Disable progress bars.")


def _add_domain_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--domain-map",
        dest="domain_map",
        help="CSV with table_id,domain columns; overrides the file-name prefix convention.",
    )
    parser.add_argument(
        "--domain-source",
        dest="domain_source",
        choices=config.DOMAIN_SOURCES,
        help="Where table domains come from (default: filename).",
    )


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--tables", required=True, help="Directory of test tables (.csv/.json/.jsonl, optionally .gz).")
    parser.add_argument("--targets", help="Target columns CSV (table_id,column_index); defaults to --gt.")
    parser.add_argument("--stats", help="Stats file written by build-stats.")
    parser.add_argument("--relations", help="Relation vocabulary (JSON array or one label per line).")
    parser.add_argument("--backend", choices=BACKEND_KINDS, help="LLM backend kind.")
    parser.add_argument("--script", help="Answer script for the scripted backend.")
    parser.add_argument("--endpoint", help="Chat-completion endpoint for the http backend.")
    parser.add_argument("--api-flavor", dest="api_flavor", choices=("ollama", "openai"), help="HTTP protocol flavor.")
    parser.add_argument("--model", help="Main model name.")
    parser.add_argument("--fallback-model", dest="fallback_model", help="Model re-asked by the last recovery stage.")
    parser.add_argument("--precision-gate", dest="precision_gate", help="JSON array of gate relations for rdc_p.")
    parser.add_argument(
        "--use-gt-domain",
        dest="use_gt_domain",
        action="store_true",
        default=None,
        help="Use the dataset-supplied table domain instead of topic detection.",
    )
    parser.add_argument("--trace-log", dest="trace_log", help="JSON-lines trace log path.")
    parser.add_argument("--prompt-template", dest="prompt_template", help="Sectioned prompt template file.")
    _add_domain_arguments(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semtab-cpa",
        description="Column property annotation with statistical candidate reduction and an LLM annotator.",
    )
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True

    build = commands.add_parser("build-stats", help="Build the domain/range/co-appearance dictionaries.")
    build.add_argument("--corpus", required=True, help="Directory of labeled training tables.")
    build.add_argument("--gt", required=True, help="Training ground truth CSV (table_id,column_index,relation).")
    build.add_argument("--out", help="Stats file to write (default: stats.path).")
    build.add_argument("--threshold", type=float, help="Range-dictionary frequency threshold (default 0.05).")
    build.add_argument("--sample-size", dest="sample_size", type=int, help="Rows sampled per table (default 500).")
    _add_domain_arguments(build)
    _add_common_arguments(build)

    annotate = commands.add_parser("annotate", help="Annotate target columns and write a predictions CSV.")
    _add_run_arguments(annotate)
    annotate.add_argument("--approach", choices=tuple(VARIANTS), help="Reduction variant (default: rd).")
    annotate.add_argument("--parts", "--prompt-parts", dest="parts", help="Prompt parts, e.g. role,example,cot or none.")
    annotate.add_argument("--gt", help="Ground truth CSV (needed by the oracle backend).")
    annotate.add_argument("--out", required=True, help="Predictions CSV to write.")
    _add_common_arguments(annotate)

    evaluate = commands.add_parser("evaluate", help="Score a predictions CSV against ground truth.")
    evaluate.add_argument("--predictions", required=True, help="Predictions CSV.")
    evaluate.add_argument("--gt", required=True, help="Ground truth CSV.")
    evaluate.add_argument("--report-out", dest="report_out", help="Write the full per-class report as JSON.")
    evaluate.add_argument("--gate-out", dest="gate_out", help="Write the precision-1.0 relations as a JSON array.")
    evaluate.add_argument("--traces", help="Trace log used to compute the mean time per column.")
    _add_common_arguments(evaluate)

    ablate = commands.add_parser("ablate", help="Run a matrix of variants/prompt parts and compare them.")
    _add_run_arguments(ablate)
    ablate.add_argument(
        "--matrix",
        required=True,
        help="Comma-separated cells: variant or variant:parts (e.g. base,rd,rdc,rd:role+cot,rdc_p).",
    )
    ablate.add_argument("--gt", required=True, help="Ground truth CSV used to score every cell.")
    ablate.add_argument("--out-dir", dest="out_dir", required=True, help="Directory receiving one subdirectory per cell.")
    ablate.add_argument("--gate-tables", dest="gate_tables", help="Validation tables used to derive the rdc_p precision gate.")
    ablate.add_argument("--gate-gt", dest="gate_gt", help="Ground truth CSV for --gate-tables.")
    _add_common_arguments(ablate)
    return parser


def parse_cli_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    values: Dict[str, object] = {
        "run.workers": getattr(args, "workers", None),
        "run.workspace_root": getattr(args, "workspace_root", None),
        "run.domain_source": getattr(args, "domain_source", None),
        "run.use_gt_domain": getattr(args, "use_gt_domain", None),
        "run.trace_log": getattr(args, "trace_log", None),
        "stats.threshold": getattr(args, "threshold", None),
        "stats.sample_size": getattr(args, "sample_size", None),
        "stats.path": getattr(args, "stats", None),
        "approach.variant": getattr(args, "approach", None),
        "approach.precision_gate_path": getattr(args, "precision_gate", None),
        "prompt.parts": getattr(args, "parts", None),
        "prompt.template_path": getattr(args, "prompt_template", None),
        "backend.kind": getattr(args, "backend", None),
        "backend.script_path": getattr(args, "script", None),
        "backend.endpoint": getattr(args, "endpoint", None),
        "backend.api_flavor": getattr(args, "api_flavor", None),
        "backend.model": getattr(args, "model", None),
        "backend.fallback_model": getattr(args, "fallback_model", None),
    }
    domain_map = getattr(args, "domain_map", None)
    if domain_map:
        values["run.domain_map"] = domain_map
        if values["run.domain_source"] is None:
            values["run.domain_source"] = "map"
    return values


def _run_command(args: argparse.Namespace, services: Services, app: config.AppConfig) -> None:
    show_progress = not args.no_progress
    if args.command == "build-stats":
        out = args.out or app.stats.path
        if not out:
            raise ConfigError("build-stats needs --out or stats.path")
        services.stats.build(args.corpus, args.gt, out, show_progress=show_progress)
        return

    if args.command == "evaluate":
        services.evaluation.evaluate(
            args.predictions,
            args.gt,
            report_out=args.report_out,
            gate_out=args.gate_out,
            traces_path=args.traces,
        )
        return

    targets = args.targets or args.gt
    if not targets:
        raise ConfigError(f"{args.command} needs --targets (or --gt)")

    if args.command == "annotate":
        services.annotation.annotate(
            args.tables,
            targets,
            args.out,
            gt_path=args.gt,
            relations_path=args.relations,
            show_progress=show_progress,
        )
        return

    if args.command == "ablate":
        if bool(args.gate_tables) != bool(args.gate_gt):
            raise ConfigError("--gate-tables and --gate-gt must be given together")
        services.ablation.run(
            parse_matrix(args.matrix),
            args.tables,
            targets,
            args.gt,
            args.out_dir,
            relations_path=args.relations,
            gate_tables=args.gate_tables,
            gate_gt=args.gate_gt,
            show_progress=show_progress,
        )
        return

    raise ConfigError(f"Unknown command '{args.command}'")  # pragma: no cover


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_cli_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else EXIT_CONFIG_ERROR

    try:
        app = config.load_app_config(args.config, _overrides(args))
        if args.print_config:
            print(app.to_json())
        _run_command(args, build_services(app), app)
    except ConfigError as exc:
        print(f"[ERROR] {exc}")
        return EXIT_CONFIG_ERROR
    except DataError as exc:
        print(f"[ERROR] {exc}")
        return EXIT_DATA_ERROR
    except CpaError as exc:
        print(f"[ERROR] {exc}")
        return EXIT_DATA_ERROR
    return EXIT_OK


__all__ = ["EXIT_CONFIG_ERROR", "EXIT_DATA_ERROR", "EXIT_OK", "build_parser", "main", "parse_cli_args"]
