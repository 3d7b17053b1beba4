import pytest

from semtab_cpa.errors import ConfigError, ConfigFileError
from semtab_cpa.prompts import PromptParts
from semtab_cpa.services import AblationCell, load_relations, parse_matrix


def test_load_relations_from_text_and_json(tmp_path):
    text_path = tmp_path / "relations.txt"
    text_path.write_text("# vocabulary\nname\n\n author \n", encoding="utf-8")
    assert load_relations(str(text_path)) == {"name", "author"}

    json_path = tmp_path / "relations.json"
    json_path.write_text('["name", "url"]', encoding="utf-8")
    assert load_relations(str(json_path)) == {"name", "url"}

    json_path.write_text('{"name": 1}', encoding="utf-8")
    with pytest.raises(ConfigFileError):
        load_relations(str(json_path))
    with pytest.raises(ConfigFileError):
        load_relations(str(tmp_path / "missing.txt"))


def test_parse_matrix_cells_and_labels():
    cells = parse_matrix(" rd, RDC_P ,rd:role+cot,rd:none")
    assert [cell.label for cell in cells] == ["rd", "rdc_p", "rd:role+cot", "rd:none"]
    assert cells[2] == AblationCell("rd", PromptParts(True, False, True))
    assert cells[3].directory_name == "rd-none"


@pytest.mark.parametrize("matrix", ["", " , ", "rd,xyz", "rd,rd", "rd:role+colour"])
def test_parse_matrix_rejects_bad_input(matrix):
    with pytest.raises(ConfigError):
        parse_matrix(matrix)
