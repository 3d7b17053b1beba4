import json
import random
from collections import Counter

import pytest

from semtab_cpa.errors import ContractError, EmptyCorpus, IoFailure, SchemaVersionMismatch
from semtab_cpa.stats import (
    CoAppearanceDict,
    DomainDict,
    RangeDict,
    StatsModel,
    SCHEMA_VERSION,
    StatsAccumulator,
    StatsBuilder,
    build_stats,
    load_stats,
    save_stats,
    stats_to_json,
    threshold_cut,
)
from semtab_cpa.tables import DomainLabel, RelationLabel, Table
from semtab_cpa.type_detector import PrimitiveType, detect_cell_type

from conftest import SYNTHETIC_DOMAINS, cell_for, relation_name

CELL_KINDS = ("String", "Number", "Date", "URL")


def _random_corpus(seed):
    rng = random.Random(seed)
    domains = [f"D{index}" for index in range(rng.randint(1, 4))]
    relations = [f"rel{index}" for index in range(rng.randint(2, 12))]
    tables = []
    for table_index in range(rng.randint(1, 15)):
        domain = rng.choice(domains)
        width = rng.randint(1, min(5, len(relations)))
        chosen = rng.sample(relations, width)
        kinds = [rng.choice(CELL_KINDS) for _ in chosen]
        rows = tuple(
            tuple(cell_for(kind, domain, row, column) for column, kind in enumerate(kinds))
            for row in range(rng.randint(1, 4))
        )
        tables.append(
            Table(
                id=f"{domain}_{table_index}",
                rows=rows,
                column_count=width,
                domain=DomainLabel(domain),
                ground_truth={column: RelationLabel(relation) for column, relation in enumerate(chosen)},
            )
        )
    return tables


def _expected_range_counts(tables):
    counts = {}
    for table in tables:
        for column, relation in table.ground_truth.items():
            coltype = detect_cell_type(table.rows[0][column])
            counts.setdefault(coltype, Counter())[relation] += 1
    return counts


def _expected_co_dict(tables):
    pairs = {}
    for table in tables:
        labels = list(table.ground_truth.values())
        for left in labels:
            for right in labels:
                if left != right:
                    pairs.setdefault((table.domain, left), set()).add(right)
    return pairs


@pytest.mark.parametrize("seed", range(100))
def test_random_corpus_matches_scan_oracle(seed):
    tables = _random_corpus(seed)
    model = build_stats(tables, threshold=0.05)

    expected_counts = _expected_range_counts(tables)
    assert {coltype: dict(counts) for coltype, counts in expected_counts.items()} == model.range_dict.entries
    for coltype, counts in expected_counts.items():
        top = max(counts.values())
        kept = {relation for relation, count in counts.items() if count * 20 >= top}
        assert model.range_dict.allowed(coltype) == kept

    expected_pairs = _expected_co_dict(tables)
    assert {key: set(value) for key, value in model.co_dict.entries.items()} == expected_pairs
    for (domain, relation), partners in model.co_dict.entries.items():
        assert relation not in partners
        for partner in partners:
            assert relation in model.co_dict.partners(domain, partner)

    for domain in {table.domain for table in tables}:
        observed = {rel for table in tables if table.domain == domain for rel in table.ground_truth.values()}
        assert model.domain_dict.relations_for(domain) == observed


def test_threshold_cut_keeps_boundary_counts():
    counts = {RelationLabel("a"): 100, RelationLabel("b"): 5, RelationLabel("c"): 4}
    assert threshold_cut(counts, 0.05) == {"a", "b"}
    assert threshold_cut({}, 0.05) == frozenset()
    assert threshold_cut(counts, 1.0) == {"a"}


def test_synthetic_dictionaries(synthetic_stats):
    assert synthetic_stats.domain_dict.domains() == sorted(SYNTHETIC_DOMAINS)
    book = synthetic_stats.domain_dict.relations_for(DomainLabel("Book"))
    assert book == {relation_name("Book", index) for index in range(5)}
    assert synthetic_stats.domain_dict.relations_for(DomainLabel("Unknown")) is None
    assert synthetic_stats.domain_dict.relations_for(None) is None
    assert len(synthetic_stats.vocabulary) == 25
    # Book relation 0 is String, relation 1 Number.
    assert relation_name("Book", 0) in synthetic_stats.range_dict.allowed(PrimitiveType.STRING)
    assert relation_name("Book", 1) in synthetic_stats.range_dict.allowed(PrimitiveType.NUMBER)
    assert relation_name("Book", 1) not in synthetic_stats.range_dict.allowed(PrimitiveType.STRING)


def test_largest_domain_breaks_ties_by_name(synthetic_stats):
    assert synthetic_stats.domain_dict.largest_domain() == "Book"


def test_partial_builds_merge_to_the_same_model(synthetic_tables):
    whole = build_stats(synthetic_tables)
    left, right = StatsAccumulator(), StatsAccumulator()
    for table in synthetic_tables[:17]:
        left.add_table(table)
    for table in synthetic_tables[17:]:
        right.add_table(table)
    merged = left.merge(right).finalize(0.05)
    assert stats_to_json(merged) == stats_to_json(whole)


def test_parallel_build_matches_sequential(synthetic_tables):
    sequential = build_stats(synthetic_tables)
    parallel = build_stats(synthetic_tables, workers=3)
    assert stats_to_json(parallel) == stats_to_json(sequential)


def test_unlabeled_tables_are_skipped(synthetic_tables, capsys):
    unlabeled = Table(id="loose", rows=(("x",),), column_count=1)
    builder = StatsBuilder()
    model = builder.build(synthetic_tables + [unlabeled])
    assert builder.report.tables_scanned == len(synthetic_tables) + 1
    assert builder.report.skipped_missing_labels == ["loose"]
    assert "loose" in capsys.readouterr().out
    assert len(model.vocabulary) == 25


def test_empty_corpus_is_rejected():
    with pytest.raises(EmptyCorpus):
        build_stats([])
    with pytest.raises(EmptyCorpus):
        build_stats([Table(id="loose", rows=(("x",),), column_count=1)])


def test_builder_validates_parameters():
    with pytest.raises(ContractError):
        StatsBuilder(threshold=0)
    with pytest.raises(ContractError):
        StatsBuilder(sample_size=0)


def test_save_and_load(tmp_path, synthetic_stats):
    path = str(tmp_path / "nested" / "stats.json")
    save_stats(synthetic_stats, path)
    loaded = load_stats(path)
    assert loaded == synthetic_stats
    assert loaded.corpus_fingerprint == synthetic_stats.corpus_fingerprint


def test_fingerprint_ignores_table_order(synthetic_tables):
    forward = build_stats(synthetic_tables)
    backward = build_stats(list(reversed(synthetic_tables)))
    assert forward.corpus_fingerprint == backward.corpus_fingerprint


def test_load_rejects_other_schema_version(tmp_path, synthetic_stats):
    document = stats_to_json(synthetic_stats)
    document["version"] = SCHEMA_VERSION + 1
    path = tmp_path / "stats.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(SchemaVersionMismatch):
        load_stats(str(path))


def test_load_rejects_truncated_file(tmp_path):
    path = tmp_path / "stats.json"
    path.write_text('{"version": 1, "domain_dict": {', encoding="utf-8")
    with pytest.raises(IoFailure):
        load_stats(str(path))


def test_raising_threshold_never_grows_filtered_sets():
    rng = random.Random(23)
    for _ in range(500):
        counts = {RelationLabel(f"r{index}"): rng.randint(1, 400) for index in range(rng.randint(1, 12))}
        low, high = sorted(rng.randint(1, 100) / 100 for _ in range(2))
        assert threshold_cut(counts, high) <= threshold_cut(counts, low)
    for seed in range(20):
        tables = _random_corpus(seed)
        previous = None
        for threshold in (0.01, 0.05, 0.2, 0.5, 1.0):
            filtered = build_stats(tables, threshold).range_dict.filtered
            if previous is not None:
                for coltype, kept in filtered.items():
                    assert kept <= previous[coltype]
            previous = filtered


def test_dotted_domain_labels_survive_save_and_load(tmp_path):
    model = StatsModel(
        domain_dict=DomainDict({DomainLabel("shop.example"): frozenset({"name", "price"})}),
        range_dict=RangeDict(
            entries={PrimitiveType.NUMBER: {RelationLabel("price"): 3}},
            filtered={PrimitiveType.NUMBER: frozenset({"price"})},
        ),
        co_dict=CoAppearanceDict(
            {
                (DomainLabel("shop.example"), RelationLabel("name")): frozenset({"price"}),
                (DomainLabel("shop.example"), RelationLabel("price")): frozenset({"name"}),
            }
        ),
    )
    path = str(tmp_path / "stats.json")
    save_stats(model, path)
    loaded = load_stats(path)
    assert loaded == model
    assert loaded.co_dict.partners(DomainLabel("shop.example"), RelationLabel("name")) == {"price"}


def test_dotted_relation_labels_are_refused_on_save():
    model = StatsModel(
        domain_dict=DomainDict({DomainLabel("Shop"): frozenset({"a.b", "c"})}),
        range_dict=RangeDict(),
        co_dict=CoAppearanceDict({(DomainLabel("Shop"), RelationLabel("a.b")): frozenset({"c"})}),
    )
    with pytest.raises(ContractError):
        stats_to_json(model)
