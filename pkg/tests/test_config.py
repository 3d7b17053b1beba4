import json

import pytest

from semtab_cpa.config import apply_overrides, load_app_config
from semtab_cpa.errors import ConfigFileError
from semtab_cpa.llm_client import API_KEY_ENV, ApiFlavor
from semtab_cpa.prompts import PromptParts
from semtab_cpa.type_detector import PrimitiveType, TypeMode


def _write(path, document):
    path.write_text(json.dumps(document), encoding="utf-8")
    return str(path)


def test_missing_file_falls_back_to_defaults(tmp_path, capsys):
    app = load_app_config(str(tmp_path / "absent.json"))
    assert "Config file not found" in capsys.readouterr().out
    assert app.approach.variant == "rd"
    assert app.stats.threshold == 0.05
    assert app.stats.sample_size == 500
    assert app.type_detector.mode is TypeMode.MAJORITY
    assert app.type_detector.stats_mode is TypeMode.FIRST_CELL
    assert app.prompt.parts == PromptParts()
    assert app.backend.kind == "http"
    assert app.run.workers == 1
    assert app.run.domain_source == "filename"


def test_file_values_and_cli_overrides(tmp_path):
    path = _write(
        tmp_path / "cpa.json",
        {
            "approach": {"variant": "rdc", "fallback": "no"},
            "prompt": {"parts": ["role", "cot"], "excerpt_rows": 3},
            "backend": {"kind": "first", "model": "file-model", "api_flavor": "openai"},
            "run": {"workers": 2, "workspace_root": str(tmp_path)},
        },
    )
    app = load_app_config(path, {"backend.model": "cli-model", "run.workers": None, "stats.threshold": 0.1})
    assert app.approach.variant == "rdc"
    assert app.approach.fallback is False
    assert app.prompt.parts == PromptParts(True, False, True)
    assert app.prompt.excerpt_rows == 3
    assert app.backend.kind == "first"
    assert app.backend.client.model_name == "cli-model"
    assert app.backend.client.api_flavor is ApiFlavor.OPENAI
    assert app.run.workers == 2
    assert app.stats.threshold == 0.1
    assert app.run.workspace_root == str(tmp_path)
    assert app.source_path == path


def test_effective_config_hides_the_api_key(tmp_path, monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "super-secret")
    app = load_app_config(str(tmp_path / "absent.json"))
    assert app.backend.client.api_key == "super-secret"
    dumped = app.to_json()
    assert "super-secret" not in dumped
    effective = json.loads(dumped)
    assert effective["prompt"]["parts"] == "role+example+cot"
    assert effective["backend"]["model"] == app.backend.client.model_name
    assert sorted(effective) == ["approach", "backend", "prompt", "run", "stats", "type_detector"]


@pytest.mark.parametrize(
    "document",
    [
        {"stats": {"threshold": 0}},
        {"stats": {"threshold": "high"}},
        {"stats": {"sample_size": 0}},
        {"approach": {"variant": "rdx"}},
        {"backend": {"kind": "carrier-pigeon"}},
        {"run": {"domain_source": "map"}},
        {"run": {"domain_source": "registry"}},
        {"prompt": {"cell_max_chars": 2}},
        {"type_detector": {"mode": "median"}},
        {"run": []},
    ],
)
def test_invalid_settings_are_rejected(tmp_path, document):
    with pytest.raises(ConfigFileError):
        load_app_config(_write(tmp_path / "cpa.json", document))


def test_invalid_files_are_rejected(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigFileError):
        load_app_config(str(broken))
    with pytest.raises(ConfigFileError):
        load_app_config(_write(tmp_path / "list.json", ["approach"]))


def test_apply_overrides_copies_and_validates():
    original = {"backend": {"model": "a"}}
    merged = apply_overrides(original, {"backend.model": "b", "run.workers": 3, "stats.path": None})
    assert merged == {"backend": {"model": "b"}, "run": {"workers": 3}}
    assert original == {"backend": {"model": "a"}}
    with pytest.raises(ConfigFileError):
        apply_overrides({}, {"workers": 3})
    with pytest.raises(ConfigFileError):
        apply_overrides({"run": "fast"}, {"run.workers": 3})


def test_grammar_file_feeds_the_detector(tmp_path):
    grammar = _write(tmp_path / "grammar.json", {"currency_symbols": "", "date_formats": ["%d.%m.%Y"]})
    app = load_app_config(str(tmp_path / "absent.json"), {"type_detector.grammar_path": grammar})
    detector = app.type_detector.build_detector()
    assert detector.detect_cell_type("24.12.2020") is PrimitiveType.DATE
    assert detector.detect_cell_type("$5") is PrimitiveType.STRING
