"""
Конфигурация запуска: строгий INI.

Неизвестные секции и ключи, повторы секций и ключей, выход за допустимые
диапазоны приводят к ConfigError с именем ключа и причиной.
Многозначные ключи разделяются ';' и могут продолжаться на следующих строках.
"""
import configparser
import copy
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, List, Optional, Tuple

from analysis.association import DESK_BANDS, AgeBand, parse_bands
from analysis.explainer import ExplainerConfig
from cohort.generator import DEFAULT_FRACTIONS, GeneratorConfig, Vocabulary, build_vocabulary
from models.student import StudentArch, TrainConfig
from models.teacher import TeacherConfig
from utils.errors import ConfigError
from utils.utils import canonical_json, derive_seed, sha256_text, tr

logger = logging.getLogger(__name__)

STAGES = ('generate', 'teach', 'train-bdl', 'train-bdld', 'evaluate', 'associate', 'explain')


@dataclass
class MetricsConfig:
    n_samples: int = 30
    n_rounds: int = 30
    n_bins: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1 or self.n_rounds < 1:
            raise ConfigError('n_samples', tr("должно быть >= 1"))
        if self.n_rounds > self.n_samples:
            raise ConfigError('n_rounds', tr("не может превышать n_samples"))
        if self.n_bins < 2:
            raise ConfigError('n_bins', tr("должно быть >= 2"))


@dataclass
class AssociationConfig:
    bands: List[AgeBand] = field(default_factory=lambda: list(DESK_BANDS))
    n_samples: int = 30
    coefficient_samples: int = 1000
    collinearity_sample: int = 100000
    collinearity_threshold: float = 0.6
    plot: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1 or self.coefficient_samples < 2 or self.collinearity_sample < 1:
            raise ConfigError('n_samples', tr("размеры выборок должны быть положительными"))
        if not 0.0 <= self.collinearity_threshold <= 1.0:
            raise ConfigError('collinearity_threshold', tr("должно лежать в [0, 1]"))


@dataclass
class ExplainStageConfig:
    explainer: ExplainerConfig = field(default_factory=ExplainerConfig)
    n_patients: int = 50
    seed: int = 0


@dataclass
class RunConfig:
    output_dir: str
    global_seed: int = 0
    language: str = 'ru'
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    split_fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentArch = field(default_factory=lambda: StudentArch(vocab_size=200))
    bdl: TrainConfig = field(default_factory=lambda: TrainConfig(alpha=1.0))
    bdld: TrainConfig = field(default_factory=TrainConfig)
    explain: ExplainStageConfig = field(default_factory=ExplainStageConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    explicit_seeds: Tuple[str, ...] = ()

    @property
    def vocabulary(self) -> Vocabulary:
        return build_vocabulary(self.generator.vocab_diag, self.generator.vocab_med)

    def validate(self) -> None:
        if not self.output_dir:
            raise ConfigError('[run] output_dir', tr("обязательный ключ"))
        self.generator.validate()
        self.teacher.validate()
        self.student.validate()
        if self.student.vocab_size != self.generator.vocab_size:
            raise ConfigError('[student] vocab_size', tr("должен совпадать с размером словаря генератора"))
        self.bdl.validate()
        self.bdld.validate()
        self.explain.explainer.validate()
        if self.explain.n_patients < 1:
            raise ConfigError('[explainer] n_patients', tr("должно быть >= 1"))
        self.metrics.validate()
        self.association.validate()
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ConfigError('[generator] split_fractions', tr("три неотрицательные доли с суммой 1"))

    def section_dict(self, stage: str) -> Dict[str, Any]:
        """Часть конфигурации, от которой зависит стадия."""
        parts = {
            'generate': {'generator': _plain(self.generator), 'split_fractions': list(self.split_fractions)},
            'teach': {'teacher': _plain(self.teacher)},
            'train-bdl': {'student': _plain(self.student), 'train': _plain(self.bdl)},
            'train-bdld': {'student': _plain(self.student), 'train': _plain(self.bdld)},
            'evaluate': {'metrics': _plain(self.metrics)},
            'associate': {'association': _plain(self.association)},
            'explain': {'explain': _plain(self.explain)},
        }
        return parts[stage]

    def stage_hash(self, stage: str) -> str:
        return sha256_text(canonical_json(self.section_dict(stage)))

    @property
    def config_hash(self) -> str:
        return sha256_text(canonical_json({stage: self.section_dict(stage) for stage in STAGES}))

    def reseeded(self, global_seed: int, keep_explicit: bool = False) -> 'RunConfig':
        """Копия с новым глобальным зерном; зёрна стадий выводятся заново."""
        explicit = self.explicit_seeds if keep_explicit else ()
        config = copy.deepcopy(self)
        config.global_seed = global_seed
        config.explicit_seeds = explicit
        _derive_stage_seeds(config)
        return config


def _plain(obj: Any) -> Any:
    if isinstance(obj, AgeBand):
        return str(obj)
    if hasattr(obj, '__dataclass_fields__'):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# --- Разбор значений ---

def _split_list(raw: str) -> List[str]:
    raw = ' '.join(raw.splitlines())
    return [part.strip() for part in raw.split(';') if part.strip()]


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(tr("ожидается логическое значение"))


def _parse_fractions(raw: str) -> Tuple[float, float, float]:
    values = tuple(float(x) for x in _split_list(raw))
    if len(values) != 3:
        raise ValueError(tr("ожидаются три доли train; tune; validation"))
    return values


def _parse_effects(raw: str) -> Dict[str, float]:
    effects = {}
    for item in _split_list(raw):
        label, _, weight = item.partition(':')
        if not weight:
            raise ValueError(tr("ожидается КОД:вес, получено '{item}'").format(item=item))
        effects[label.strip()] = float(weight)
    return effects


def _parse_interactions(raw: str) -> List[Tuple[Tuple[str, str], float]]:
    result = []
    for item in _split_list(raw):
        pair, _, weight = item.partition(':')
        a, sep, b = pair.partition('*')
        if not sep or not weight:
            raise ValueError(tr("ожидается КОД*КОД:вес, получено '{item}'").format(item=item))
        result.append(((a.strip(), b.strip()), float(weight)))
    return result


def _optional_float(raw: str) -> Optional[float]:
    return None if raw.strip().lower() in ('', 'none', 'auto') else float(raw)


Parser = Callable[[str], Any]

TRAIN_KEYS: Dict[str, Parser] = {
    'alpha': float, 'learning_rate': float, 'batch_size': int, 'patience': int,
    'kl_scale': _optional_float, 'n_train_samples': int, 'seed': int, 'max_epochs': int,
    'clip_norm': float, 'soft_label': str, 'teacher_samples': int, 'canonicalize': _parse_bool,
}

SCHEMA: Dict[str, Dict[str, Parser]] = {
    'run': {'output_dir': str, 'global_seed': int, 'language': str},
    'generator': {
        'n_patients': int, 'vocab_diag': int, 'vocab_med': int, 'target_prevalence': float,
        'planted_effects': _parse_effects, 'planted_interactions': _parse_interactions,
        'age_slope': float, 'visits_mean': float, 'codes_per_visit_mean': float, 'seed': int,
        'forced_codes': _split_list, 'split_fractions': _parse_fractions,
    },
    'teacher': {
        'variant': str, 'noise_sd': float, 'n_samples': int, 'hidden': int, 'learning_rate': float,
        'batch_size': int, 'max_epochs': int, 'patience': int, 'prior_sd': float, 'seed': int,
    },
    'student': {'d': int, 'h': int, 'm': int, 'max_len': int, 'prior_sd': float},
    'bdl': TRAIN_KEYS,
    'bdld': TRAIN_KEYS,
    'explainer': {
        'gamma': float, 'learning_rate': float, 'iterations': int, 'temperature': float,
        'samples_per_step': int, 'selection_threshold': float, 'init_logit': float, 'n_pool': int,
        'n_patients': int, 'seed': int,
    },
    'metrics': {'n_samples': int, 'n_rounds': int, 'n_bins': int, 'seed': int},
    'association': {
        'bands': parse_bands, 'n_samples': int, 'coefficient_samples': int, 'collinearity_sample': int,
        'collinearity_threshold': float, 'plot': _parse_bool, 'seed': int,
    },
}

SEED_SECTIONS = {
    'generate': ('generator', 'seed'),
    'teach': ('teacher', 'seed'),
    'train-bdl': ('bdl', 'seed'),
    'train-bdld': ('bdld', 'seed'),
    'evaluate': ('metrics', 'seed'),
    'associate': ('association', 'seed'),
    'explain': ('explain', 'seed'),
}


def _check_duplicate_sections(path: str) -> None:
    section_counts: Dict[str, int] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line.startswith('[') and line.endswith(']'):
                section = line[1:-1].strip()
                section_counts[section] = section_counts.get(section, 0) + 1
    duplicates = [name for name, count in section_counts.items() if count > 1]
    if duplicates:
        raise ConfigError(', '.join(duplicates), tr("названия секций не должны повторяться"))


def read_sections(path: str) -> Dict[str, Dict[str, Any]]:
    """
    Читает INI и разбирает значения по схеме.

    :raises ConfigError: Синтаксис, повторы, неизвестные секции или ключи, неверные значения.
    """
    if not os.path.isfile(path):
        raise ConfigError(path, tr("файл конфигурации не найден"))
    _check_duplicate_sections(path)
    parser = configparser.ConfigParser(strict=True, interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding='utf-8')
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"[{e.section}] {e.option}", tr("ключ повторяется")) from e
    except configparser.Error as e:
        raise ConfigError(path, tr("ошибка разбора: {error}").format(error=e)) from e

    parsed: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"[{section}]", tr("неизвестная секция"))
        schema = SCHEMA[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"[{section}] {key}", tr("неизвестный ключ"))
            try:
                values[key] = schema[key](raw)
            except (ValueError, ConfigError) as e:
                reason = e.reason if isinstance(e, ConfigError) else str(e)
                raise ConfigError(f"[{section}] {key}", reason) from e
        parsed[section] = values
    return parsed


def _derive_stage_seeds(config: RunConfig) -> None:
    for stage, (section, key) in SEED_SECTIONS.items():
        if section in config.explicit_seeds:
            continue
        seed = derive_seed(config.global_seed, stage)
        target = {
            'generator': config.generator, 'teacher': config.teacher, 'bdl': config.bdl,
            'bdld': config.bdld, 'metrics': config.metrics, 'association': config.association,
            'explain': config.explain,
        }[section]
        setattr(target, key, seed)


def build_config(sections: Dict[str, Dict[str, Any]], base_dir: str = '') -> RunConfig:
    """
    Собирает RunConfig из разобранных секций; коды задаются метками словаря.

    :raises ConfigError: Нарушены ограничения.
    """
    run = dict(sections.get('run', {}))
    if not run.get('output_dir'):
        raise ConfigError('[run] output_dir', tr("обязательный ключ"))
    output_dir = run['output_dir']
    if base_dir and not os.path.isabs(output_dir):
        output_dir = os.path.normpath(os.path.join(base_dir, output_dir))

    gen = dict(sections.get('generator', {}))
    fractions = gen.pop('split_fractions', DEFAULT_FRACTIONS)
    effects = gen.pop('planted_effects', {})
    interactions = gen.pop('planted_interactions', [])
    forced = gen.pop('forced_codes', [])
    generator = GeneratorConfig(**gen)
    vocabulary = build_vocabulary(generator.vocab_diag, generator.vocab_med)
    try:
        generator.planted_effects = {vocabulary.id_of(label): w for label, w in effects.items()}
        generator.planted_interactions = [((vocabulary.id_of(a), vocabulary.id_of(b)), w) for (a, b), w in interactions]
        generator.forced_codes = tuple(vocabulary.id_of(label) for label in forced)
    except Exception as e:
        raise ConfigError('[generator] planted_effects', str(e)) from e

    explainer_values = dict(sections.get('explainer', {}))
    n_patients = explainer_values.pop('n_patients', 50)
    explain_seed = explainer_values.pop('seed', 0)

    explicit = tuple(name for name, values in sections.items() if 'seed' in values)
    config = RunConfig(
        output_dir=output_dir,
        global_seed=int(run.get('global_seed', 0)),
        language=run.get('language', 'ru'),
        generator=generator,
        split_fractions=tuple(fractions),
        teacher=TeacherConfig(**sections.get('teacher', {})),
        student=StudentArch(vocab_size=generator.vocab_size, **sections.get('student', {})),
        bdl=TrainConfig(**{'alpha': 1.0, **sections.get('bdl', {})}),
        bdld=TrainConfig(**sections.get('bdld', {})),
        explain=ExplainStageConfig(ExplainerConfig(**explainer_values), n_patients, explain_seed),
        metrics=MetricsConfig(**sections.get('metrics', {})),
        association=AssociationConfig(**sections.get('association', {})),
        explicit_seeds=tuple('explain' if name == 'explainer' else name for name in explicit),
    )
    _derive_stage_seeds(config)
    config.validate()
    return config


def parse_config(path: str) -> RunConfig:
    """
    Читает и проверяет конфигурацию запуска.

    Относительный output_dir отсчитывается от каталога файла конфигурации.
    """
    config = build_config(read_sections(path), os.path.dirname(os.path.abspath(path)))
    logger.info(tr("Конфигурация загружена: {path} (хэш {hash})").format(path=path, hash=config.config_hash[:12]))
    return config


def config_summary(config: RunConfig) -> Dict[str, Any]:
    summary = _plain(config)
    summary['config_hash'] = config.config_hash
    return summary

