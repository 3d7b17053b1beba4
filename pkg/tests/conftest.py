"""Shared fixtures: synthetic corpora, the adversarial shop fixture and mock backend factories."""

import csv
import json
import os
from typing import Dict, List, Tuple

import pytest

from semtab_cpa.llm_client import FirstCandidateBackend, OracleBackend, ScriptedBackend
from semtab_cpa.stats import build_stats
from semtab_cpa.tables import DomainLabel, GroundTruth, RelationLabel, Table

SYNTHETIC_DOMAINS = ("Book", "Movie", "Restaurant", "Event", "Product")
TYPE_CYCLE = ("String", "Number", "Date", "URL")
RELATIONS_PER_DOMAIN = 5
TABLES_PER_DOMAIN = 10
ROWS_PER_TABLE = 6


def cell_for(type_name: str, domain: str, row: int, column: int) -> str:
    if type_name == "String":
        return f"{domain} item {row} {column}"
    if type_name == "Number":
        return f"{row * 3 + column}.5"
    if type_name == "Date":
        return f"2020-0{column % 9 + 1}-{row + 1:02d}"
    return f"https://example.org/{domain.lower()}/{row}/{column}"


def relation_name(domain: str, index: int) -> str:
    return f"{domain.lower()}Rel{index}"


def relation_type(domain_index: int, relation_index: int) -> str:
    return TYPE_CYCLE[(domain_index + relation_index) % len(TYPE_CYCLE)]


def make_synthetic_tables() -> List[Table]:
    """Five domains, five relations each; every table drops one relation in rotation."""
    tables: List[Table] = []
    for domain_index, domain in enumerate(SYNTHETIC_DOMAINS):
        for table_index in range(TABLES_PER_DOMAIN):
            skipped = table_index % RELATIONS_PER_DOMAIN
            relation_indices = [index for index in range(RELATIONS_PER_DOMAIN) if index != skipped]
            rows = tuple(
                tuple(
                    cell_for(relation_type(domain_index, relation_index), domain, row, column)
                    for column, relation_index in enumerate(relation_indices)
                )
                for row in range(ROWS_PER_TABLE)
            )
            tables.append(
                Table(
                    id=f"{domain}_{table_index:04d}",
                    rows=rows,
                    column_count=len(relation_indices),
                    domain=DomainLabel(domain),
                    ground_truth={
                        column: RelationLabel(relation_name(domain, relation_index))
                        for column, relation_index in enumerate(relation_indices)
                    },
                )
            )
    return tables


def make_shop_fixture() -> Tuple[List[Table], Table]:
    """Training tables where co-appearance after a wrong first pick excludes every later truth."""
    shop = DomainLabel("Shop")
    train_products = Table(
        id="Shop_t1",
        rows=(
            ("Blue kettle", "19.99", "https://shop.example.com/kettle"),
            ("Red lamp", "42.50", "https://shop.example.com/lamp"),
        ),
        column_count=3,
        domain=shop,
        ground_truth={0: RelationLabel("name"), 1: RelationLabel("price"), 2: RelationLabel("url")},
    )
    train_sales = Table(
        id="Shop_t2",
        rows=(("2021-03-01", "2021-03-15"), ("2021-04-01", "2021-04-15")),
        column_count=2,
        domain=shop,
        ground_truth={0: RelationLabel("alias"), 1: RelationLabel("discount")},
    )
    test_table = Table(
        id="Shop_test",
        rows=(
            ("Green mug", "7.25", "https://shop.example.com/mug"),
            ("Oak desk", "310.00", "https://shop.example.com/desk"),
        ),
        column_count=3,
        domain=shop,
        ground_truth={0: RelationLabel("name"), 1: RelationLabel("price"), 2: RelationLabel("url")},
    )
    return [train_products, train_sales], test_table


def ground_truth_of(tables: List[Table]) -> GroundTruth:
    return {table.id: dict(table.ground_truth or {}) for table in tables}


def write_tables(directory: str, tables: List[Table]) -> None:
    os.makedirs(directory, exist_ok=True)
    for table in tables:
        with open(os.path.join(directory, f"{table.id}.json"), "w", encoding="utf-8") as handle:
            for row in table.rows:
                handle.write(json.dumps(list(row)) + "\n")


def write_ground_truth(path: str, tables: List[Table]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["table_id", "column_index", "relation"])
        for table in tables:
            for column, relation in sorted((table.ground_truth or {}).items()):
                writer.writerow([table.id, column, relation])


@pytest.fixture
def synthetic_tables() -> List[Table]:
    return make_synthetic_tables()


@pytest.fixture
def synthetic_stats(synthetic_tables):
    return build_stats(synthetic_tables)


@pytest.fixture
def shop_fixture():
    return make_shop_fixture()


@pytest.fixture
def synthetic_files(tmp_path, synthetic_tables) -> Dict[str, str]:
    """Synthetic corpus on disk: one table directory plus its ground truth CSV."""
    tables_dir = str(tmp_path / "tables")
    gt_path = str(tmp_path / "gt.csv")
    write_tables(tables_dir, synthetic_tables)
    write_ground_truth(gt_path, synthetic_tables)
    return {"tables": tables_dir, "gt": gt_path, "root": str(tmp_path)}


@pytest.fixture
def oracle_backend():
    """Factory fixture: OracleBackend(ground_truth, domains)."""

    def _factory(tables: List[Table]) -> OracleBackend:
        domains = {table.id: table.domain for table in tables if table.domain is not None}
        return OracleBackend(ground_truth_of(tables), domains)

    return _factory


@pytest.fixture
def first_backend():
    return FirstCandidateBackend()


@pytest.fixture
def scripted_backend():
    """Factory fixture: ScriptedBackend(script)."""

    def _factory(script) -> ScriptedBackend:
        return ScriptedBackend(script)

    return _factory
