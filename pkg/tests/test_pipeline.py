import json
import time

import pytest

from semtab_cpa.candidates import ApproachConfig
from semtab_cpa.errors import ConfigError, ContractError, TransportFailure
from semtab_cpa.evaluator import mean_seconds_from_traces, score
from semtab_cpa.llm_client import DEFAULT_MODEL, LlmBackend
from semtab_cpa.pipeline import (
    DOMAIN_FROM_FALLBACK,
    DOMAIN_FROM_GROUND_TRUTH,
    DOMAIN_FROM_TOPIC,
    CpaPipeline,
    RunConfig,
    TraceWriter,
    render_predictions,
)
from semtab_cpa.stats import build_stats
from semtab_cpa.tables import AnnotationStatus, RelationLabel, Table

from conftest import ground_truth_of

PAIR_TABLE = Table(id="T_1", rows=(("Dune", "Frank Herbert"), ("Emma", "Jane Austen")), column_count=2)
PAIR_VOCAB = frozenset({RelationLabel("author"), RelationLabel("name")})


def _config(variant, **kwargs):
    stats_path = None if variant == "base" else "stats.json"
    return RunConfig(approach=ApproachConfig.for_variant(variant), stats_path=stats_path, **kwargs)


def _targets(tables):
    return {table.id: sorted(table.ground_truth) for table in tables}


class BrokenBackend(LlmBackend):
    def _generate(self, prompt, model):
        raise TransportFailure("endpoint unreachable")


class SlowBackend(LlmBackend):
    def __init__(self, delay, fail=False):
        super().__init__()
        self.delay = delay
        self.fail = fail

    def _generate(self, prompt, model):
        time.sleep(self.delay)
        if self.fail:
            raise TransportFailure("timed out")
        return prompt.options[0]


def test_retry_recovers_on_second_attempt(scripted_backend):
    backend = scripted_backend({"T_1:0": ["I am not sure", "name"], "default": "author"})
    pipeline = CpaPipeline(_config("base"), backend, vocabulary=PAIR_VOCAB)
    trace = pipeline.annotate_table(PAIR_TABLE, [0])
    annotation = trace.annotations[0]
    assert annotation.status is AnnotationStatus.OK
    assert annotation.predicted == "name"
    assert annotation.attempts == 2


def test_three_bad_answers_fail_the_column(scripted_backend, capsys):
    backend = scripted_backend({"T_1:0": ["???"], "T_1:1": "author"})
    pipeline = CpaPipeline(_config("base"), backend, vocabulary=PAIR_VOCAB)
    trace = pipeline.annotate_table(PAIR_TABLE, [0, 1])
    failed, second = trace.annotations
    assert failed.status is AnnotationStatus.FAILED_FORMAT
    assert failed.predicted is None
    assert failed.attempts == 3
    # A failed column is not a prior prediction, so author stays available.
    assert second.predicted == "author"
    assert trace.failed_count == 1
    assert trace.predictions() == [("T_1", 0, ""), ("T_1", 1, "author")]
    assert "No fallback model configured" in capsys.readouterr().out


def test_transport_failure_fails_the_column():
    pipeline = CpaPipeline(_config("base"), BrokenBackend(), vocabulary=PAIR_VOCAB)
    annotation = pipeline.annotate_table(PAIR_TABLE, [1]).annotations[0]
    assert annotation.status is AnnotationStatus.FAILED_FORMAT
    assert annotation.attempts == 1


def test_prior_predictions_are_not_offered_again(first_backend):
    pipeline = CpaPipeline(_config("base"), first_backend, vocabulary=frozenset({RelationLabel("name")}))
    trace = pipeline.annotate_table(PAIR_TABLE, [0, 1])
    first, second = trace.annotations
    assert first.predicted == "name"
    assert second.status is AnnotationStatus.NO_CANDIDATES
    assert second.attempts == 1


def test_trace_log_records_every_attempt(tmp_path, scripted_backend):
    path = tmp_path / "logs" / "trace.jsonl"
    backend = scripted_backend({"T_1:0": ["nope", "still nope", "name"]})
    with TraceWriter(str(path)) as writer:
        pipeline = CpaPipeline(_config("base"), backend, vocabulary=PAIR_VOCAB, trace_writer=writer)
        pipeline.annotate_table(PAIR_TABLE, [0])
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert [record["stage"] for record in records] == ["main", "retry", "fallback_model"]
    assert [record["outcome"] for record in records] == ["unparsed", "unparsed", "ok"]
    assert records[-1]["choice"] == "name"
    assert all(len(record["prompt_sha256"]) == 64 for record in records)
    assert records[0]["prompt_sha256"] == records[2]["prompt_sha256"]


def test_target_columns_are_validated(first_backend):
    pipeline = CpaPipeline(_config("base"), first_backend, vocabulary=PAIR_VOCAB)
    with pytest.raises(ContractError):
        pipeline.annotate_table(PAIR_TABLE, [1, 0])
    with pytest.raises(ContractError):
        pipeline.annotate_table(PAIR_TABLE, [5])


def test_pipeline_needs_vocabulary_and_stats(first_backend, synthetic_stats):
    with pytest.raises(ConfigError):
        CpaPipeline(_config("base"), first_backend)
    with pytest.raises(ContractError):
        CpaPipeline(_config("rd"), first_backend)
    with pytest.raises(ConfigError):
        RunConfig(approach=ApproachConfig.for_variant("rd"))
    assert CpaPipeline(_config("rd"), first_backend, stats=synthetic_stats).vocabulary == synthetic_stats.vocabulary


@pytest.mark.parametrize("variant", ["base", "rd", "rdc"])
def test_oracle_run_on_synthetic_corpus_is_perfect(variant, synthetic_tables, synthetic_stats, oracle_backend):
    pipeline = CpaPipeline(_config(variant), oracle_backend(synthetic_tables), stats=synthetic_stats)
    run = pipeline.run_dataset(synthetic_tables, _targets(synthetic_tables))
    predictions = [row for trace in run.traces for row in trace.predictions()]
    report = score(predictions, ground_truth_of(synthetic_tables))
    assert report.micro_f1 == 1.0
    assert report.macro_f1 == 1.0
    assert run.failed_count == 0
    assert run.column_count == 200


def test_topic_detection_uses_the_model(synthetic_tables, synthetic_stats, oracle_backend):
    pipeline = CpaPipeline(_config("rd"), oracle_backend(synthetic_tables), stats=synthetic_stats)
    movie = next(table for table in synthetic_tables if table.domain == "Movie")
    trace = pipeline.annotate_table(movie, [0])
    assert trace.detected_domain == "Movie"
    assert trace.domain_source == DOMAIN_FROM_TOPIC


def test_ground_truth_domain_skips_topic_detection(synthetic_tables, synthetic_stats, scripted_backend):
    backend = scripted_backend({"default": "nothing useful"})
    pipeline = CpaPipeline(_config("rd", use_gt_domain=True), backend, stats=synthetic_stats)
    trace = pipeline.annotate_table(synthetic_tables[-1], [0])
    assert trace.detected_domain == synthetic_tables[-1].domain
    assert trace.domain_source == DOMAIN_FROM_GROUND_TRUTH


def test_unrecognized_topic_falls_back_to_largest_domain(synthetic_tables, synthetic_stats, scripted_backend, capsys):
    backend = scripted_backend({"default": "Spaceship"})
    pipeline = CpaPipeline(_config("d"), backend, stats=synthetic_stats)
    trace = pipeline.annotate_table(synthetic_tables[-1], [0])
    assert trace.detected_domain == "Book"
    assert trace.domain_source == DOMAIN_FROM_FALLBACK
    assert "falling back to 'Book'" in capsys.readouterr().out


def test_base_and_range_skip_topic_detection(synthetic_tables, synthetic_stats, first_backend):
    pipeline = CpaPipeline(_config("r"), first_backend, stats=synthetic_stats)
    trace = pipeline.annotate_table(synthetic_tables[0], [0])
    assert trace.detected_domain is None
    assert trace.domain_source is None


def test_coappearance_after_a_wrong_pick_hurts(shop_fixture, first_backend):
    train, test_table = shop_fixture
    stats = build_stats(train)
    targets = {test_table.id: [0, 1, 2]}
    truth = ground_truth_of([test_table])

    rd = CpaPipeline(_config("rd", use_gt_domain=True), first_backend, stats=stats).run_dataset([test_table], targets)
    c = CpaPipeline(_config("c", use_gt_domain=True), first_backend, stats=stats).run_dataset([test_table], targets)

    assert rd.traces[0].predictions() == [("Shop_test", 0, "name"), ("Shop_test", 1, "price"), ("Shop_test", 2, "url")]
    assert c.traces[0].predictions() == [("Shop_test", 0, "alias"), ("Shop_test", 1, "discount"), ("Shop_test", 2, "name")]
    assert score(rd.traces[0].predictions(), truth).micro_f1 == 1.0
    assert score(c.traces[0].predictions(), truth).micro_f1 == 0.0


def test_missing_tables_and_bad_columns_are_reported(synthetic_tables, synthetic_stats, first_backend, capsys):
    pipeline = CpaPipeline(_config("rd", use_gt_domain=True), first_backend, stats=synthetic_stats)
    table = synthetic_tables[0]
    run = pipeline.run_dataset(synthetic_tables, {"Ghost_0001": [0], table.id: [0, 99]})
    assert run.missing_tables == ["Ghost_0001"]
    assert [trace.table_id for trace in run.traces] == [table.id]
    assert [annotation.column.column_index for annotation in run.traces[0].annotations] == [0]
    out = capsys.readouterr().out
    assert "Ghost_0001" in out
    assert "out-of-range" in out


def test_reruns_are_byte_identical(tmp_path, synthetic_tables, synthetic_stats, oracle_backend):
    outputs = []
    for index, workers in enumerate((1, 1, 4)):
        path = tmp_path / f"run{index}" / "predictions.csv"
        pipeline = CpaPipeline(_config("rdc", workers=workers), oracle_backend(synthetic_tables), stats=synthetic_stats)
        pipeline.run_dataset(synthetic_tables, _targets(synthetic_tables), predictions_path=str(path))
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]
    assert outputs[0].startswith(b"table_id,column_index,relation\n")


def test_render_predictions_leaves_failures_blank(scripted_backend):
    backend = scripted_backend({"T_1:0": "???", "T_1:1": "author"})
    trace = CpaPipeline(_config("base"), backend, vocabulary=PAIR_VOCAB).annotate_table(PAIR_TABLE, [0, 1])
    assert render_predictions([trace]) == "table_id,column_index,relation\nT_1,0,\nT_1,1,author\n"


def test_transport_errors_are_traced_with_model_and_latency(tmp_path):
    path = tmp_path / "trace.jsonl"
    with TraceWriter(str(path)) as writer:
        pipeline = CpaPipeline(_config("base"), SlowBackend(0.02, fail=True), vocabulary=PAIR_VOCAB, trace_writer=writer)
        pipeline.annotate_table(PAIR_TABLE, [1])
    (record,) = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert record["outcome"] == "transport_error"
    assert record["model"] == DEFAULT_MODEL
    assert record["latency_seconds"] >= 0.02
    assert mean_seconds_from_traces(str(path)) >= 0.02


def test_traced_latency_matches_wall_clock(tmp_path):
    tables = [Table(id=f"T_{index}", rows=PAIR_TABLE.rows, column_count=2) for index in range(3)]
    path = tmp_path / "trace.jsonl"
    with TraceWriter(str(path)) as writer:
        pipeline = CpaPipeline(_config("base"), SlowBackend(0.05), vocabulary=PAIR_VOCAB, trace_writer=writer)
        started = time.perf_counter()
        run = pipeline.run_dataset(tables, {table.id: [0, 1] for table in tables})
        wall = time.perf_counter() - started
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert len(records) == 6
    traced = sum(record["latency_seconds"] for record in records)
    assert abs(traced - wall) <= 0.05 * wall
    assert sum(annotation.elapsed_seconds for trace in run.traces for annotation in trace.annotations) <= wall
