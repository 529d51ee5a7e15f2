"""
Синтетические продольные когорты с заложенными эффектами риска.

Каждый пациент генерируется из собственного потока Philox, ключ которого
(seed, 'history', patient_id), поэтому когорта не зависит ни от числа
потоков, ни от порядка обработки.
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, special, stats

from utils.errors import CohortError, ConfigError
from utils.process_utils import ProcessUtils
from utils.utils import rng_for, tr

logger = logging.getLogger(__name__)

MIN_AGE = 16
MAX_AGE = 100
N_AGES = MAX_AGE - MIN_AGE + 1

BASELINE_MEAN = 57.0
BASELINE_SD = 18.0
BASELINE_MIN = 16
BASELINE_MAX = 95
HISTORY_YEARS = 25
POPULARITY_OFFSET = 10.0
INTERCEPT_BRACKET = (-50.0, 50.0)

SPLITS = ('train', 'tune', 'validation')
DEFAULT_FRACTIONS = (0.60, 0.10, 0.30)

_CHUNK = 1000


class CodeKind(str, Enum):
    DIAGNOSIS = 'diagnosis'
    MEDICATION = 'medication'


@dataclass(frozen=True)
class EventCode:
    id: int
    label: str
    kind: CodeKind


class Vocabulary:
    """
    Словарь кодов: сначала диагнозы (A00, A01, ...), затем препараты (BNF0101, ...).
    """

    def __init__(self, codes: Sequence[EventCode]):
        self.codes: List[EventCode] = list(codes)
        self._by_label: Dict[str, int] = {}
        for position, code in enumerate(self.codes):
            if code.id != position:
                raise CohortError(tr("Идентификаторы кодов должны быть плотными: {label}").format(label=code.label))
            if code.label in self._by_label:
                raise CohortError(tr("Повторяющаяся метка кода: {label}").format(label=code.label))
            self._by_label[code.label] = code.id

    def __len__(self) -> int:
        return len(self.codes)

    def __getitem__(self, code_id: int) -> EventCode:
        return self.codes[code_id]

    def label(self, code_id: int) -> str:
        return self.codes[code_id].label

    def id_of(self, label: str) -> int:
        try:
            return self._by_label[label.strip()]
        except KeyError:
            raise CohortError(tr("Неизвестный код: {label}").format(label=label)) from None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {'code': [c.id for c in self.codes],
             'label': [c.label for c in self.codes],
             'kind': [c.kind.value for c in self.codes]}
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> 'Vocabulary':
        rows = frame.sort_values('code')
        return cls([EventCode(int(r.code), str(r.label), CodeKind(r.kind)) for r in rows.itertuples(index=False)])


def diagnosis_label(index: int) -> str:
    return f"{chr(ord('A') + index // 100)}{index % 100:02d}"


def medication_label(index: int) -> str:
    return f"BNF{1 + index // 20:02d}{1 + index % 20:02d}"


def build_vocabulary(vocab_diag: int, vocab_med: int) -> Vocabulary:
    """
    :param vocab_diag: Число диагнозов (до 2600).
    :param vocab_med: Число препаратов.
    """
    if vocab_diag + vocab_med < 1:
        raise ConfigError('vocab_diag', tr("словарь должен содержать хотя бы один код"))
    if vocab_diag > 26 * 100:
        raise ConfigError('vocab_diag', tr("не более 2600 диагнозов"))
    codes = [EventCode(i, diagnosis_label(i), CodeKind.DIAGNOSIS) for i in range(vocab_diag)]
    codes += [EventCode(vocab_diag + j, medication_label(j), CodeKind.MEDICATION) for j in range(vocab_med)]
    return Vocabulary(codes)


@dataclass(frozen=True)
class Encounter:
    code: int
    age: int


@dataclass(frozen=True)
class PatientRecord:
    patient_id: int
    encounters: Tuple[Encounter, ...]
    baseline_age: int
    label: int
    split: Optional[str] = None

    def validate(self, vocab_size: Optional[int] = None) -> None:
        """
        Проверяет инварианты записи.

        :raises CohortError: Нарушен инвариант.
        """
        if not self.encounters:
            raise CohortError(tr("Пациент {pid}: нет ни одной записи").format(pid=self.patient_id))
        if self.label not in (0, 1):
            raise CohortError(tr("Пациент {pid}: метка должна быть 0 или 1").format(pid=self.patient_id))
        if self.split is not None and self.split not in SPLITS:
            raise CohortError(tr("Пациент {pid}: неизвестная выборка {split}").format(pid=self.patient_id, split=self.split))
        previous = MIN_AGE
        for enc in self.encounters:
            if not MIN_AGE <= enc.age <= MAX_AGE:
                raise CohortError(tr("Пациент {pid}: возраст {age} вне [16, 100]").format(pid=self.patient_id, age=enc.age))
            if enc.age < previous:
                raise CohortError(tr("Пациент {pid}: записи не упорядочены по возрасту").format(pid=self.patient_id))
            if enc.age > self.baseline_age:
                raise CohortError(tr("Пациент {pid}: запись позже базовой даты").format(pid=self.patient_id))
            if vocab_size is not None and not 0 <= enc.code < vocab_size:
                raise CohortError(tr("Пациент {pid}: код {code} вне словаря").format(pid=self.patient_id, code=enc.code))
            previous = enc.age

    @property
    def codes_present(self) -> frozenset:
        return frozenset(enc.code for enc in self.encounters)

    def first_occurrence_age(self, code: int) -> Optional[int]:
        for enc in self.encounters:
            if enc.code == code:
                return enc.age
        return None


@dataclass
class GeneratorConfig:
    """
    Параметры генератора. Веса заданы в лог-шансах.
    """
    n_patients: int = 20000
    vocab_diag: int = 150
    vocab_med: int = 50
    target_prevalence: float = 0.083
    planted_effects: Dict[int, float] = field(default_factory=dict)
    planted_interactions: List[Tuple[Tuple[int, int], float]] = field(default_factory=list)
    age_slope: float = 0.15
    visits_mean: float = 30.0
    codes_per_visit_mean: float = 1.5
    seed: int = 0
    forced_codes: Tuple[int, ...] = ()

    @property
    def vocab_size(self) -> int:
        return self.vocab_diag + self.vocab_med

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigError('n_patients', tr("должно быть >= 1"))
        if self.vocab_diag < 0 or self.vocab_med < 0 or self.vocab_size < 1:
            raise ConfigError('vocab_diag', tr("размеры словаря должны быть >= 1"))
        if not 0.0 < self.target_prevalence < 1.0:
            raise ConfigError('target_prevalence', tr("должна лежать в (0, 1)"))
        if not self.visits_mean > 0:
            raise ConfigError('visits_mean', tr("должно быть > 0"))
        if not self.codes_per_visit_mean >= 1.0:
            raise ConfigError('codes_per_visit_mean', tr("должно быть >= 1"))
        for code in list(self.planted_effects) + list(self.forced_codes):
            if not 0 <= code < self.vocab_size:
                raise ConfigError('planted_effects', tr("код {code} вне словаря").format(code=code))
        for (a, b), _ in self.planted_interactions:
            if not (0 <= a < self.vocab_size and 0 <= b < self.vocab_size) or a == b:
                raise ConfigError('planted_interactions', tr("некорректная пара кодов ({a}, {b})").format(a=a, b=b))


@dataclass
class GroundTruth:
    """
    Заложенная истина: веса кодов, взаимодействия, свободный член и
    истинная вероятность исхода каждого пациента.
    """
    vocabulary: Vocabulary
    effects: Dict[int, float]
    interactions: List[Tuple[Tuple[int, int], float]]
    age_slope: float = 0.0
    intercept: Optional[float] = None
    true_probability: Dict[int, float] = field(default_factory=dict)

    def weight(self, code: int) -> float:
        return float(self.effects.get(code, 0.0))

    def sign(self, code: int) -> str:
        w = self.weight(code)
        if w > 0:
            return 'positive'
        if w < 0:
            return 'negative'
        return 'null'

    def magnitude(self, code: int) -> float:
        return abs(self.weight(code))

    def probability(self, patient_id: int) -> float:
        try:
            return self.true_probability[patient_id]
        except KeyError:
            raise CohortError(tr("Нет истинной вероятности для пациента {pid}").format(pid=patient_id)) from None

    def effects_frame(self) -> pd.DataFrame:
        frame = self.vocabulary.to_frame()
        frame['planted_weight'] = [self.weight(c) for c in frame['code']]
        return frame[['code', 'label', 'kind', 'planted_weight']]

    def interactions_frame(self) -> pd.DataFrame:
        rows = [
            {'code_a': a, 'code_b': b,
             'label_a': self.vocabulary.label(a), 'label_b': self.vocabulary.label(b),
             'weight': float(w)}
            for (a, b), w in self.interactions
        ]
        return pd.DataFrame(rows, columns=['code_a', 'code_b', 'label_a', 'label_b', 'weight'])

    def logit(self, record: PatientRecord, exclude: frozenset = frozenset()) -> float:
        """
        Логит без свободного члена.

        :param exclude: Коды, вклад которых (и их взаимодействий) не учитывается.
        """
        present = record.codes_present - exclude
        value = sum(w for c, w in self.effects.items() if c in present)
        value += sum(w for (a, b), w in self.interactions if a in present and b in present)
        value += self.age_slope * (record.baseline_age - BASELINE_MEAN) / 10.0
        return float(value)


def planted_truth(config: GeneratorConfig) -> GroundTruth:
    """
    Таблица заложенных эффектов без привязки к конкретной когорте.

    :param config: Конфигурация генератора.
    :return: GroundTruth без свободного члена и вероятностей.
    """
    config.validate()
    return GroundTruth(
        vocabulary=build_vocabulary(config.vocab_diag, config.vocab_med),
        effects={int(c): float(w) for c, w in config.planted_effects.items() if w != 0.0},
        interactions=[((int(a), int(b)), float(w)) for (a, b), w in config.planted_interactions],
        age_slope=config.age_slope,
    )


def code_popularity(config: GeneratorConfig) -> np.ndarray:
    """
    Частоты кодов, обратно пропорциональные рангу + 10.

    Ранги задаются перестановкой из потока (seed, 'vocab').
    """
    ranks = rng_for(config.seed, 'vocab').permutation(config.vocab_size)
    weights = 1.0 / (ranks + POPULARITY_OFFSET)
    return weights / weights.sum()


def _sample_history(config: GeneratorConfig, popularity: np.ndarray, patient_id: int) -> Tuple[int, Tuple[Encounter, ...]]:
    rng = rng_for(config.seed, 'history', patient_id)
    a = (BASELINE_MIN - BASELINE_MEAN) / BASELINE_SD
    b = (BASELINE_MAX - BASELINE_MEAN) / BASELINE_SD
    raw_age = stats.truncnorm.rvs(a, b, loc=BASELINE_MEAN, scale=BASELINE_SD, random_state=rng)
    baseline = int(np.clip(np.rint(raw_age), BASELINE_MIN, BASELINE_MAX))

    n_visits = max(1, int(rng.poisson(config.visits_mean)))
    span = min(HISTORY_YEARS, baseline - MIN_AGE)
    start = baseline - int(rng.integers(0, span + 1))
    visit_ages = np.sort(rng.integers(start, baseline + 1, size=n_visits))

    encounters: List[Encounter] = []
    for age in visit_ages:
        n_codes = 1 + int(rng.poisson(config.codes_per_visit_mean - 1.0))
        for code in rng.choice(config.vocab_size, size=n_codes, p=popularity):
            encounters.append(Encounter(int(code), int(age)))
    return baseline, tuple(encounters)


def _with_forced(encounters: Tuple[Encounter, ...], forced: Iterable[int]) -> Tuple[Encounter, ...]:
    present = {enc.code for enc in encounters}
    missing = [code for code in forced if code not in present]
    if not missing:
        return encounters
    first_age = encounters[0].age
    return tuple(Encounter(code, first_age) for code in missing) + encounters


def solve_intercept(logits: np.ndarray, target: float) -> float:
    """
    Свободный член b0, при котором средняя вероятность равна target.

    :raises ConfigError: Целевая распространённость недостижима на отрезке поиска.
    """
    def gap(b0: float) -> float:
        return float(np.mean(special.expit(b0 + logits))) - target

    low, high = INTERCEPT_BRACKET
    if gap(low) > 0 or gap(high) < 0:
        raise ConfigError(
            'target_prevalence',
            tr("не удаётся подобрать свободный член: распространённость {target} недостижима при заданных эффектах").format(target=target)
        )
    return float(optimize.brentq(gap, low, high, xtol=1e-12))


def generate_cohort(config: GeneratorConfig) -> Tuple[List[PatientRecord], GroundTruth]:
    """
    Генерирует когорту и заложенную истину.

    Сначала строятся истории, затем свободный член подбирается так, чтобы
    средняя истинная вероятность совпала с target_prevalence; принудительные
    коды добавляются после подбора и сдвигают распространённость.

    :param config: Конфигурация генератора.
    :return: (записи пациентов, GroundTruth).
    :raises ConfigError: Некорректная конфигурация или недостижимая распространённость.
    """
    truth = planted_truth(config)
    popularity = code_popularity(config)
    logger.info(tr("Генерация когорты: {n} пациентов, словарь {v}").format(n=config.n_patients, v=config.vocab_size))

    chunks = [range(start, min(start + _CHUNK, config.n_patients)) for start in range(0, config.n_patients, _CHUNK)]
    histories = [
        item
        for chunk in ProcessUtils.fan_out(
            lambda ids: [_sample_history(config, popularity, pid) for pid in ids], chunks, label="generate"
        )
        for item in chunk
    ]

    drafts = [PatientRecord(pid, encounters, baseline, 0) for pid, (baseline, encounters) in enumerate(histories)]
    forced = frozenset(config.forced_codes)
    logits = np.array([truth.logit(r, exclude=forced) for r in drafts])
    truth.intercept = solve_intercept(logits, config.target_prevalence)

    records: List[PatientRecord] = []
    for record in drafts:
        encounters = _with_forced(record.encounters, config.forced_codes)
        record = dataclasses.replace(record, encounters=encounters)
        p = float(special.expit(truth.intercept + truth.logit(record)))
        truth.true_probability[record.patient_id] = p
        label = int(rng_for(config.seed, 'label', record.patient_id).random() < p)
        records.append(dataclasses.replace(record, label=label))

    prevalence = float(np.mean([r.label for r in records]))
    logger.info(tr("Когорта готова: b0={b0:.4f}, распространённость {prev:.4f}").format(b0=truth.intercept, prev=prevalence))
    return records, truth


def split_cohort(
    records: Sequence[PatientRecord],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> List[PatientRecord]:
    """
    Случайное разбиение на train/tune/validation.

    Размеры: целые части n*f, остаток раздаётся по наибольшим дробным частям.

    :raises ConfigError: Доли не в сумме 1 или отрицательны.
    """
    if len(fractions) != len(SPLITS) or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError('fractions', tr("три неотрицательные доли с суммой 1, получено {f}").format(f=list(fractions)))
    n = len(records)
    exact = np.array(fractions, dtype=np.float64) * n
    sizes = np.floor(exact + 1e-9).astype(int)
    remainder = n - int(sizes.sum())
    for index in np.argsort(-(exact - sizes), kind='stable')[:remainder]:
        sizes[index] += 1

    order = rng_for(seed, 'split').permutation(n)
    assignment = np.empty(n, dtype=object)
    start = 0
    for split, size in zip(SPLITS, sizes):
        assignment[order[start:start + size]] = split
        start += size
    return [dataclasses.replace(record, split=str(assignment[i])) for i, record in enumerate(records)]


def records_in(records: Iterable[PatientRecord], split: str) -> List[PatientRecord]:
    return [r for r in records if r.split == split]


def resolve_codes(vocabulary: Vocabulary, effects: Mapping[str, float]) -> Dict[int, float]:
    """Метки кодов -> идентификаторы."""
    return {vocabulary.id_of(label): float(w) for label, w in effects.items()}
