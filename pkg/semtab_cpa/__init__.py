"""Column property annotation for SemTab-style tables: statistical candidate reduction plus an LLM annotator."""

__version__ = "0.1.0-dev"

from .candidates import ApproachConfig, CandidateSet, reduce_candidates
from .config import AppConfig, load_app_config
from .errors import (
	ConfigError,
	ConfigFileError,
	ContractError,
	CpaError,
	DataError,
)
from .evaluator import EvalReport, compute_precision_gate, evaluate
from .llm_client import BackendConfig, HttpBackend, create_backend
from .pipeline import CpaPipeline, RunConfig, TableRunTrace
from .stats import StatsModel, build_stats, load_stats, save_stats
from .tables import Annotation, Table, parse_table

__all__ = [
	"__version__",
	"AppConfig",
	"Annotation",
	"ApproachConfig",
	"BackendConfig",
	"CandidateSet",
	"ConfigError",
	"ConfigFileError",
	"ContractError",
	"CpaError",
	"CpaPipeline",
	"DataError",
	"EvalReport",
	"HttpBackend",
	"RunConfig",
	"StatsModel",
	"Table",
	"TableRunTrace",
	"build_stats",
	"compute_precision_gate",
	"create_backend",
	"evaluate",
	"load_app_config",
	"load_stats",
	"parse_table",
	"reduce_candidates",
	"save_stats",
]
