import os
import textwrap

import pytest

from analysis.association import AgeBand
from models.layers import PRIOR_SD
from utils.config_utils import STAGES, config_summary, parse_config, read_sections
from utils.errors import ConfigError
from utils.utils import CONFIG_PATH, PAPER_CONFIG_PATH, derive_seed


def write_ini(tmp_path, text, name='run.ini'):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text), encoding='utf-8')
    return str(path)


MINIMAL = """
[run]
output_dir = out
"""


class TestShippedConfigs:

    def test_desk(self):
        config = parse_config(CONFIG_PATH)
        assert config.generator.n_patients == 20000
        assert config.generator.vocab_size == 200
        assert config.student.d == 32 and config.student.m == 20
        assert config.student.vocab_size == 200
        assert config.student.prior_sd == pytest.approx(PRIOR_SD)
        assert config.bdl.alpha == 1.0
        assert config.bdld.alpha == 0.5
        assert config.association.bands[0] == AgeBand(16, 45)
        assert len(config.association.bands) == 9
        assert config.explain.n_patients == 50
        assert config.output_dir.endswith(os.path.join('runs', 'desk'))

    def test_desk_codes_resolved(self):
        generator = parse_config(CONFIG_PATH).generator
        assert generator.planted_effects[12] == pytest.approx(1.2)
        assert generator.planted_effects[108] == pytest.approx(0.8)
        assert generator.planted_effects[153] == pytest.approx(1.0)
        assert generator.planted_effects[180] == pytest.approx(-1.0)
        assert len(generator.planted_effects) == 9
        assert generator.planted_interactions[0] == ((5, 152), 1.5)

    def test_paper(self):
        config = parse_config(PAPER_CONFIG_PATH)
        assert config.student.d == 150 and config.student.h == 150 and config.student.m == 100
        assert config.student.prior_sd == pytest.approx(PRIOR_SD)
        assert config.generator.vocab_size == 1533 + 360
        assert config.association.bands[0] == AgeBand(45, 55)

    def test_stage_seeds_derived(self):
        config = parse_config(CONFIG_PATH)
        assert config.generator.seed == derive_seed(0, 'generate')
        assert config.bdld.seed == derive_seed(0, 'train-bdld')
        assert config.explain.seed == derive_seed(0, 'explain')


class TestParsing:

    def test_minimal_defaults(self, tmp_path):
        config = parse_config(write_ini(tmp_path, MINIMAL))
        assert config.output_dir == os.path.join(str(tmp_path), 'out')
        assert config.generator.n_patients == 20000
        assert config.bdl.alpha == 1.0
        assert config.teacher.variant == 'oracle'

    def test_multiline_values(self, tmp_path):
        path = write_ini(tmp_path, """
        [run]
        output_dir = out
        [generator]
        vocab_diag = 10
        vocab_med = 0
        planted_effects = A01:1.0;
            A02:-0.5
        """)
        config = parse_config(path)
        assert config.generator.planted_effects == {1: 1.0, 2: -0.5}
        assert config.student.vocab_size == 10

    @pytest.mark.parametrize('body, key', [
        ("[run]\noutput_dir = out\n[nonsense]\na = 1\n", "[nonsense]"),
        ("[run]\noutput_dir = out\n[student]\nwidth = 3\n", "[student] width"),
        ("[run]\noutput_dir = out\n[bdld]\nalpha = x\n", "[bdld] alpha"),
        ("[run]\noutput_dir = out\n[bdld]\nalpha = 0.5\nalpha = 0.6\n", "[bdld] alpha"),
        ("[run]\noutput_dir = out\n[association]\nbands = 50-45\n", "[association] bands"),
        ("[run]\nglobal_seed = 1\n", "[run] output_dir"),
    ])
    def test_errors_name_the_key(self, tmp_path, body, key):
        with pytest.raises(ConfigError) as info:
            parse_config(write_ini(tmp_path, body))
        assert info.value.key == key

    def test_duplicate_section(self, tmp_path):
        path = write_ini(tmp_path, "[run]\noutput_dir = out\n[run]\nglobal_seed = 2\n")
        with pytest.raises(ConfigError) as info:
            read_sections(path)
        assert info.value.key == 'run'

    def test_range_checked(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            parse_config(write_ini(tmp_path, "[run]\noutput_dir = out\n[bdld]\nalpha = 1.5\n"))
        assert info.value.key == 'alpha'

    def test_unknown_label(self, tmp_path):
        path = write_ini(tmp_path, "[run]\noutput_dir = out\n[generator]\nplanted_effects = Z99:1.0\n")
        with pytest.raises(ConfigError):
            parse_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(str(tmp_path / 'absent.ini'))


class TestSeedsAndHashes:

    def test_explicit_seed_kept(self, tmp_path):
        config = parse_config(write_ini(tmp_path, "[run]\noutput_dir = out\n[bdl]\nseed = 77\n"))
        assert config.bdl.seed == 77
        assert config.bdld.seed == derive_seed(0, 'train-bdld')

    def test_reseeded(self):
        config = parse_config(CONFIG_PATH)
        other = config.reseeded(5)
        assert other.global_seed == 5
        assert other.generator.seed == derive_seed(5, 'generate')
        assert config.generator.seed == derive_seed(0, 'generate')
        assert other.stage_hash('generate') != config.stage_hash('generate')

    def test_stage_hash_isolated(self, tmp_path):
        base = parse_config(write_ini(tmp_path, MINIMAL, 'a.ini'))
        changed = parse_config(write_ini(tmp_path, MINIMAL + "[bdld]\nlearning_rate = 0.01\n", 'b.ini'))
        assert base.stage_hash('generate') == changed.stage_hash('generate')
        assert base.stage_hash('train-bdld') != changed.stage_hash('train-bdld')
        assert base.config_hash != changed.config_hash

    def test_summary(self):
        summary = config_summary(parse_config(CONFIG_PATH))
        assert summary['association']['bands'][0] == '16-45'
        assert len(summary['config_hash']) == 64
        assert set(STAGES) == {'generate', 'teach', 'train-bdl', 'train-bdld', 'evaluate', 'associate', 'explain'}
