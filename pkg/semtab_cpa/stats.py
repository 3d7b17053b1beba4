"""Offline construction of the search-space reduction dictionaries.

One pass over a labeled training corpus produces:

* a domain dictionary: domain -> relations observed under it,
* a range dictionary: primitive column type -> relation counts, cut at a
  fraction of the most frequent relation for that type,
* a co-appearance dictionary: (domain, relation) -> relations sharing a table.

Partial builds merge associatively; the threshold cut runs once, after the merge.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Set, Tuple

from tqdm import tqdm

from semtab_cpa.errors import ContractError, EmptyCorpus, IoFailure, SchemaVersionMismatch
from semtab_cpa.paths import ensure_parent_directory
from semtab_cpa.tables import DomainLabel, RelationLabel, Table, sample_rows
from semtab_cpa.type_detector import DEFAULT_DETECTOR, PrimitiveType, TypeDetector, TypeMode

SCHEMA_VERSION = 1
DEFAULT_THRESHOLD = 0.05
DEFAULT_SAMPLE_SIZE = 500

CoKey = Tuple[DomainLabel, RelationLabel]


@dataclass(frozen=True)
class DomainDict:
    entries: Dict[DomainLabel, FrozenSet[RelationLabel]] = field(default_factory=dict)

    def relations_for(self, domain: Optional[DomainLabel]) -> Optional[FrozenSet[RelationLabel]]:
        if domain is None:
            return None
        return self.entries.get(domain)

    def domains(self) -> List[DomainLabel]:
        return sorted(self.entries)

    def largest_domain(self) -> Optional[DomainLabel]:
        """Domain with the most relations; ties go to the lexicographically first name."""
        if not self.entries:
            return None
        return min(self.entries, key=lambda domain: (-len(self.entries[domain]), domain))


@dataclass(frozen=True)
class RangeDict:
    entries: Dict[PrimitiveType, Dict[RelationLabel, int]] = field(default_factory=dict)
    filtered: Dict[PrimitiveType, FrozenSet[RelationLabel]] = field(default_factory=dict)

    def allowed(self, coltype: PrimitiveType) -> FrozenSet[RelationLabel]:
        return self.filtered.get(coltype, frozenset())


@dataclass(frozen=True)
class CoAppearanceDict:
    entries: Dict[CoKey, FrozenSet[RelationLabel]] = field(default_factory=dict)

    def partners(self, domain: Optional[DomainLabel], relation: RelationLabel) -> FrozenSet[RelationLabel]:
        if domain is None:
            return frozenset()
        return self.entries.get((domain, relation), frozenset())


@dataclass(frozen=True)
class StatsModel:
    domain_dict: DomainDict
    range_dict: RangeDict
    co_dict: CoAppearanceDict
    threshold: float = DEFAULT_THRESHOLD
    sample_size: int = DEFAULT_SAMPLE_SIZE
    corpus_fingerprint: str = ""

    @property
    def vocabulary(self) -> FrozenSet[RelationLabel]:
        relations: Set[RelationLabel] = set()
        for members in self.domain_dict.entries.values():
            relations.update(members)
        for counts in self.range_dict.entries.values():
            relations.update(counts)
        return frozenset(relations)


@dataclass
class BuildReport:
    tables_scanned: int = 0
    tables_used: int = 0
    skipped_missing_labels: List[str] = field(default_factory=list)
    relations_seen: int = 0
    range_counts_sizes: Dict[str, int] = field(default_factory=dict)
    range_filtered_sizes: Dict[str, int] = field(default_factory=dict)

    def summary_lines(self) -> List[str]:
        lines = [
            f"Tables scanned: {self.tables_scanned}",
            f"Tables used: {self.tables_used}",
            f"Tables skipped (missing domain or ground truth): {len(self.skipped_missing_labels)}",
            f"Relations seen: {self.relations_seen}",
        ]
        for type_name in sorted(self.range_counts_sizes):
            kept = self.range_filtered_sizes.get(type_name, 0)
            lines.append(f"Range {type_name}: {kept}/{self.range_counts_sizes[type_name]} relations kept after threshold cut")
        return lines


def threshold_cut(counts: Mapping[RelationLabel, int], threshold: float) -> FrozenSet[RelationLabel]:
    """Keep relations whose count is at least ceil(threshold x the type's maximum count)."""
    if not counts:
        return frozenset()
    minimum = math.ceil(Fraction(str(threshold)) * max(counts.values()))
    return frozenset(relation for relation, count in counts.items() if count >= minimum)


def _table_digest(table: Table, sample: Table) -> str:
    payload = json.dumps(
        [
            table.id,
            table.domain,
            sorted((index, relation) for index, relation in (table.ground_truth or {}).items()),
            [list(row) for row in sample.rows],
        ],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class StatsAccumulator:
    """Mergeable partial build; counts add and sets union."""

    def __init__(
        self,
        sample_size: int = DEFAULT_SAMPLE_SIZE,
        *,
        detector: Optional[TypeDetector] = None,
        mode: TypeMode = TypeMode.FIRST_CELL,
    ) -> None:
        if sample_size < 1:
            raise ContractError(f"sample_size must be >= 1 (got {sample_size})")
        self.sample_size = sample_size
        self.detector = detector or DEFAULT_DETECTOR
        self.mode = mode
        self.domain_relations: Dict[DomainLabel, Set[RelationLabel]] = {}
        self.range_counts: Dict[PrimitiveType, Counter] = {}
        self.co_pairs: Dict[CoKey, Set[RelationLabel]] = {}
        self.table_digests: List[str] = []
        self.tables_scanned = 0
        self.skipped: List[str] = []

    def add_table(self, table: Table) -> bool:
        self.tables_scanned += 1
        if table.domain is None or not table.ground_truth:
            self.skipped.append(table.id)
            return False
        domain = table.domain
        sample = sample_rows(table, self.sample_size)
        domain_set = self.domain_relations.setdefault(domain, set())
        for column_index in sorted(table.ground_truth):
            relation = table.ground_truth[column_index]
            domain_set.add(relation)
            coltype = self.detector.detect_column_type(sample, column_index, self.sample_size, self.mode)
            self.range_counts.setdefault(coltype, Counter())[relation] += 1
        distinct = sorted(set(table.ground_truth.values()))
        for position, left in enumerate(distinct):
            for right in distinct[position + 1:]:
                self.co_pairs.setdefault((domain, left), set()).add(right)
                self.co_pairs.setdefault((domain, right), set()).add(left)
        self.table_digests.append(_table_digest(table, sample))
        return True

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        for domain, relations in other.domain_relations.items():
            self.domain_relations.setdefault(domain, set()).update(relations)
        for coltype, counts in other.range_counts.items():
            self.range_counts.setdefault(coltype, Counter()).update(counts)
        for key, partners in other.co_pairs.items():
            self.co_pairs.setdefault(key, set()).update(partners)
        self.table_digests.extend(other.table_digests)
        self.tables_scanned += other.tables_scanned
        self.skipped.extend(other.skipped)
        return self

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for table_digest in sorted(self.table_digests):
            digest.update(table_digest.encode("ascii"))
        return digest.hexdigest()

    def finalize(self, threshold: float) -> StatsModel:
        entries = {coltype: dict(counts) for coltype, counts in self.range_counts.items() if counts}
        return StatsModel(
            domain_dict=DomainDict({domain: frozenset(rels) for domain, rels in self.domain_relations.items()}),
            range_dict=RangeDict(
                entries=entries,
                filtered={coltype: threshold_cut(counts, threshold) for coltype, counts in entries.items()},
            ),
            co_dict=CoAppearanceDict({key: frozenset(partners) for key, partners in self.co_pairs.items()}),
            threshold=threshold,
            sample_size=self.sample_size,
            corpus_fingerprint=self.fingerprint(),
        )


class StatsBuilder:
    """Runs the offline build and keeps the report of the last run."""

    def __init__(
        self,
        threshold: float = DEFAULT_THRESHOLD,
        sample_size: int = DEFAULT_SAMPLE_SIZE,
        *,
        detector: Optional[TypeDetector] = None,
        mode: TypeMode = TypeMode.FIRST_CELL,
        workers: int = 1,
        show_progress: bool = False,
    ) -> None:
        if not 0 < threshold <= 1:
            raise ContractError(f"threshold must be in (0, 1] (got {threshold})")
        if sample_size < 1:
            raise ContractError(f"sample_size must be >= 1 (got {sample_size})")
        self.threshold = threshold
        self.sample_size = sample_size
        self.detector = detector or DEFAULT_DETECTOR
        self.mode = mode
        self.workers = max(1, int(workers))
        self.show_progress = show_progress
        self.report = BuildReport()

    def _new_accumulator(self) -> StatsAccumulator:
        return StatsAccumulator(self.sample_size, detector=self.detector, mode=self.mode)

    def _accumulate(self, tables: Iterable[Table]) -> StatsAccumulator:
        accumulator = self._new_accumulator()
        for table in tables:
            accumulator.add_table(table)
        return accumulator

    def build(self, corpus: Iterable[Table]) -> StatsModel:
        progress = tqdm(corpus, desc="stats", unit="table", disable=None if self.show_progress else True)
        if self.workers == 1:
            accumulator = self._accumulate(progress)
        else:
            tables = list(progress)
            shard_size = max(1, math.ceil(len(tables) / self.workers))
            shards = [tables[start:start + shard_size] for start in range(0, len(tables), shard_size)]
            accumulator = self._new_accumulator()
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                for partial in pool.map(self._accumulate, shards):
                    accumulator.merge(partial)
        if accumulator.tables_scanned == 0:
            raise EmptyCorpus("Corpus contains no tables; nothing to build")
        for table_id in accumulator.skipped:
            print(f"[WARN] Skipping table '{table_id}': missing domain or ground truth")
        if not accumulator.table_digests:
            raise EmptyCorpus(f"None of the {accumulator.tables_scanned} table(s) carry domain and ground truth labels")
        model = accumulator.finalize(self.threshold)
        self.report = BuildReport(
            tables_scanned=accumulator.tables_scanned,
            tables_used=len(accumulator.table_digests),
            skipped_missing_labels=list(accumulator.skipped),
            relations_seen=len(model.vocabulary),
            range_counts_sizes={coltype.value: len(counts) for coltype, counts in model.range_dict.entries.items()},
            range_filtered_sizes={coltype.value: len(kept) for coltype, kept in model.range_dict.filtered.items()},
        )
        return model


def build_stats(
    corpus: Iterable[Table],
    threshold: float = DEFAULT_THRESHOLD,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    *,
    detector: Optional[TypeDetector] = None,
    mode: TypeMode = TypeMode.FIRST_CELL,
    workers: int = 1,
) -> StatsModel:
    return StatsBuilder(threshold, sample_size, detector=detector, mode=mode, workers=workers).build(corpus)


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------
def stats_to_json(model: StatsModel) -> Dict[str, object]:
    dotted = sorted(relation for _, relation in model.co_dict.entries if "." in relation)
    if dotted:
        raise ContractError(f"Relation labels cannot contain '.' in a stats file: {', '.join(dotted)}")
    return {
        "version": SCHEMA_VERSION,
        "threshold": model.threshold,
        "sample_size": model.sample_size,
        "corpus_fingerprint": model.corpus_fingerprint,
        "domain_dict": {domain: sorted(rels) for domain, rels in sorted(model.domain_dict.entries.items())},
        "range_dict_counts": {
            coltype.value: dict(sorted(counts.items()))
            for coltype, counts in sorted(model.range_dict.entries.items(), key=lambda item: item[0].value)
        },
        "range_dict_filtered": {
            coltype.value: sorted(kept)
            for coltype, kept in sorted(model.range_dict.filtered.items(), key=lambda item: item[0].value)
        },
        "co_dict": {
            f"{domain}.{relation}": sorted(partners)
            for (domain, relation), partners in sorted(model.co_dict.entries.items())
        },
    }


def stats_from_json(data: Mapping[str, object]) -> StatsModel:
    version = data.get("version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"Stats file version {version!r} is not supported (expected {SCHEMA_VERSION})")
    try:
        co_entries: Dict[CoKey, FrozenSet[RelationLabel]] = {}
        for key, partners in data["co_dict"].items():  # type: ignore[union-attr]
            # relation labels carry no dots; domain labels may
            domain, separator, relation = key.rpartition(".")
            if not separator or not domain or not relation:
                raise IoFailure(f"Malformed co_dict key '{key}'")
            co_entries[(DomainLabel(domain), RelationLabel(relation))] = frozenset(partners)
        return StatsModel(
            domain_dict=DomainDict(
                {DomainLabel(domain): frozenset(rels) for domain, rels in data["domain_dict"].items()}  # type: ignore[union-attr]
            ),
            range_dict=RangeDict(
                entries={
                    PrimitiveType(coltype): {RelationLabel(rel): int(count) for rel, count in counts.items()}
                    for coltype, counts in data["range_dict_counts"].items()  # type: ignore[union-attr]
                },
                filtered={
                    PrimitiveType(coltype): frozenset(kept)
                    for coltype, kept in data["range_dict_filtered"].items()  # type: ignore[union-attr]
                },
            ),
            co_dict=CoAppearanceDict(co_entries),
            threshold=float(data["threshold"]),  # type: ignore[arg-type]
            sample_size=int(data["sample_size"]),  # type: ignore[arg-type]
            corpus_fingerprint=str(data["corpus_fingerprint"]),
        )
    except (KeyError, AttributeError, TypeError, ValueError) as exc:
        raise IoFailure(f"Stats document is incomplete or malformed: {exc}") from exc


def save_stats(model: StatsModel, path: str) -> None:
    ensure_parent_directory(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        with tempfile.NamedTemporaryFile("w", encoding="utf-8", dir=directory, delete=False, suffix=".tmp") as handle:
            json.dump(stats_to_json(model), handle, indent=2, ensure_ascii=False)
            handle.write("\n")
            temp_path = handle.name
        os.replace(temp_path, path)
    except OSError as exc:
        raise IoFailure(f"Unable to write stats file '{path}': {exc}") from exc


def load_stats(path: str) -> StatsModel:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except OSError as exc:
        raise IoFailure(f"Unable to read stats file '{path}': {exc}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IoFailure(f"Stats file '{path}' is truncated or not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise IoFailure(f"Stats file '{path}' must contain a JSON object")
    return stats_from_json(data)


__all__ = [
    "BuildReport",
    "CoAppearanceDict",
    "DEFAULT_SAMPLE_SIZE",
    "DEFAULT_THRESHOLD",
    "DomainDict",
    "RangeDict",
    "SCHEMA_VERSION",
    "StatsAccumulator",
    "StatsBuilder",
    "StatsModel",
    "build_stats",
    "load_stats",
    "save_stats",
    "stats_from_json",
    "stats_to_json",
    "threshold_cut",
]
