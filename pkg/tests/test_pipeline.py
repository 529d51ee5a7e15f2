import os

import pytest

from pipeline.report import ABSENT, REPORT_FILE, write_report
from pipeline.stages import MANIFEST_FILE, TIMING_KEY, RunManifest, run_all, run_stage, select_patients
from utils.config_utils import STAGES, parse_config
from utils.errors import StageDependencyError
from utils.utils import sha256_file
from tests.conftest import make_record

TINY_RUN = """\
[run]
output_dir = out

[generator]
n_patients = 120
vocab_diag = 8
vocab_med = 4
target_prevalence = 0.3
planted_effects = A01:1.5; A02:-1.5
visits_mean = 4

[student]
d = 3
h = 3
m = 4
max_len = 8

[bdl]
batch_size = 64
max_epochs = 1

[bdld]
alpha = 0.5
batch_size = 64
max_epochs = 1

[explainer]
iterations = 3
samples_per_step = 2
n_pool = 4
n_patients = 2

[metrics]
n_samples = 4
n_rounds = 4

[association]
n_samples = 2
coefficient_samples = 20
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / 'tiny.ini'
    path.write_text(TINY_RUN, encoding='utf-8')
    return parse_config(str(path))


def test_stage_needs_dependencies(tiny_config):
    manifest = RunManifest(tiny_config.output_dir)
    with pytest.raises(StageDependencyError) as info:
        run_stage(tiny_config, 'teach', manifest)
    assert info.value.missing == ['generate']


def test_unknown_stage(tiny_config):
    with pytest.raises(ValueError):
        run_stage(tiny_config, 'deploy', RunManifest(tiny_config.output_dir))


def test_generate_is_recorded(tiny_config):
    manifest = run_stage(tiny_config, 'generate', RunManifest.load(tiny_config.output_dir))
    assert os.path.exists(os.path.join(tiny_config.output_dir, MANIFEST_FILE))
    entry = RunManifest.load(tiny_config.output_dir).stages['generate']
    assert entry['config_hash'] == tiny_config.stage_hash('generate')
    assert entry['seed'] == tiny_config.generator.seed
    assert 'generate/cohort.jsonl' in entry['outputs']
    assert manifest.outputs_intact('generate')


def test_generate_is_reproducible(tiny_config, tmp_path):
    first = run_stage(tiny_config, 'generate', RunManifest(tiny_config.output_dir))
    tiny_config.output_dir = str(tmp_path / 'again')
    second = run_stage(tiny_config, 'generate', RunManifest(tiny_config.output_dir))
    assert first.reproducible() == second.reproducible()
    assert set(first.stages['generate'][TIMING_KEY]) == {'wall_time', 'timestamp'}
    assert TIMING_KEY not in first.reproducible()['generate']


def test_report_marks_missing_sections(tiny_config):
    os.makedirs(tiny_config.output_dir)
    path = write_report(RunManifest(tiny_config.output_dir))
    with open(path, encoding='utf-8') as f:
        text = f.read()
    assert text.count(ABSENT) == 3
    assert '| generate | absent | | |' in text


def test_select_patients():
    records = [make_record(pid, [(0, 30)]) for pid in range(10)]
    chosen = select_patients(records, 4, seed=3)
    assert len(chosen) == 4
    assert [r.patient_id for r in chosen] == sorted(r.patient_id for r in chosen)
    assert chosen == select_patients(records, 4, seed=3)
    assert len(select_patients(records, 50, seed=3)) == 10


@pytest.mark.slow
class TestFullRun:

    @pytest.fixture
    def finished(self, tiny_config):
        manifest = run_all(tiny_config)
        return tiny_config, manifest

    def test_all_stages_recorded(self, finished):
        config, manifest = finished
        assert list(manifest.stages) == list(STAGES)
        for stage in STAGES:
            assert manifest.outputs_intact(stage)
            assert manifest.is_current(stage, config)
        outputs = manifest.outputs('explain')
        assert 'explain/summary.json' in outputs
        assert sum(path.endswith('.csv') for path in outputs) == 2

    def test_resume_skips_current_stages(self, finished):
        config, manifest = finished
        before = {stage: dict(entry) for stage, entry in manifest.stages.items()}
        after = run_all(config, RunManifest.load(config.output_dir), resume=True)
        assert after.stages == before

    def test_damaged_output_reruns_stage(self, finished):
        config, manifest = finished
        path = manifest.absolute('evaluate/metrics.json')
        with open(path, 'a', encoding='utf-8') as f:
            f.write(' ')
        assert not manifest.is_current('evaluate', config)
        with open(write_report(manifest), encoding='utf-8') as f:
            assert '| evaluate | stale |' in f.read()
        manifest = run_stage(config, 'evaluate', manifest, resume=True)
        assert manifest.outputs_intact('evaluate')
        assert manifest.stages['evaluate']['outputs']['evaluate/metrics.json'] == sha256_file(path)

    def test_report(self, finished):
        config, manifest = finished
        path = write_report(manifest)
        assert os.path.basename(path) == REPORT_FILE
        with open(path, encoding='utf-8') as f:
            text = f.read()
        assert ABSENT not in text
        assert '| BDLD |' in text and '| Teacher |' in text
        assert '### Latent variables (BDLD)' in text
        with open(write_report(manifest), encoding='utf-8') as f:
            assert f.read() == text
