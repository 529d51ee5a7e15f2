import json

import pytest

from utils.translation_utils import TranslationManager
from utils.utils import TRANSLATIONS_FOLDER


@pytest.fixture
def manager():
    return TranslationManager(TRANSLATIONS_FOLDER)


def test_russian_is_source(manager):
    assert manager.translate("Пустой пакет") == "Пустой пакет"


def test_english_lookup(manager):
    manager.set_language('en')
    assert manager.translate("Пустой пакет") == "Empty batch"


def test_missing_string_falls_back(manager, caplog):
    manager.set_language('en')
    with caplog.at_level('WARNING'):
        assert manager.translate("нет такой строки") == "нет такой строки"
        manager.translate("нет такой строки")
    assert sum('нет такой строки' in r.getMessage() for r in caplog.records) == 1


def test_unsupported_language(manager):
    with pytest.raises(ValueError):
        manager.set_language('de')


def test_catalogue_keeps_placeholders(manager):
    with open(f"{TRANSLATIONS_FOLDER}/en.json", encoding='utf-8') as f:
        catalogue = json.load(f)
    assert manager.rejected['en'] == []
    assert len(manager.translations['en']) == len(catalogue)


def test_mismatched_placeholders_rejected(tmp_path):
    (tmp_path / 'en.json').write_text(json.dumps({
        "Стадия {stage}: старт": "Stage {name}: start",
        "Пустой пакет": "Empty batch",
    }), encoding='utf-8')
    manager = TranslationManager(str(tmp_path))
    manager.set_language('en')
    assert manager.rejected['en'] == ["Стадия {stage}: старт"]
    assert manager.translate("Стадия {stage}: старт") == "Стадия {stage}: старт"
    assert manager.translate("Пустой пакет") == "Empty batch"


def test_broken_catalogue_is_logged(tmp_path, caplog):
    (tmp_path / 'en.json').write_text('{broken', encoding='utf-8')
    with caplog.at_level('ERROR'):
        manager = TranslationManager(str(tmp_path))
    assert 'en' not in manager.translations
    assert caplog.records
