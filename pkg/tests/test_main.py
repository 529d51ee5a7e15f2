import logging
import os

import pytest

import main
from tests.test_pipeline import TINY_RUN


@pytest.fixture(autouse=True)
def restore_logging():
    yield
    logging.basicConfig(handlers=[logging.NullHandler()], force=True)


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / 'tiny.ini'
    path.write_text(TINY_RUN, encoding='utf-8')
    return str(path)


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / 'bad.ini'
    path.write_text("[run]\noutput_dir = out\n[nonsense]\nx = 1\n", encoding='utf-8')
    assert main.main(['generate', '--config', str(path)]) == main.EXIT_CONFIG


def test_missing_dependency_exit_code(tiny_ini, tmp_path):
    assert main.main(['teach', '--config', tiny_ini, '--output-dir', str(tmp_path / 'run')]) == main.EXIT_STAGE


def test_generate_and_report(tiny_ini, tmp_path):
    out = tmp_path / 'run'
    assert main.main(['generate', '--config', tiny_ini, '--output-dir', str(out), '--seed', '9']) == main.EXIT_OK
    assert (out / 'generate' / 'cohort.jsonl').exists()
    assert (out / 'logs').is_dir()
    assert main.main(['report', '--config', tiny_ini, '--output-dir', str(out)]) == main.EXIT_OK
    assert os.path.exists(out / 'report.md')


def test_unknown_command():
    with pytest.raises(SystemExit):
        main.main(['deploy'])
