"""
Популяционный анализ ассоциаций: стратифицированные по возрасту группы,
относительное контекстное отношение (CR), коэффициенты аддитивной головы,
квадранты карты ассоциаций и аудит коллинеарности по V Крамера.

CR = среднее контекстной переменной группы без воздействия, делённое на
среднее группы с воздействием. Контекстная переменная после канонической
ориентации отрицательна, поэтому CR > 1 означает, что воздействие повышает риск.
Сдвиг контекстной оси меняет CR; масштабирование его не меняет.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from scipy.stats import chi2_contingency

from cohort.generator import PatientRecord, Vocabulary
from utils.errors import CohortError, ConfigError, NoUsableStrataError
from utils.process_utils import ProcessUtils
from utils.utils import ensure_folder, rng_for, tr

logger = logging.getLogger(__name__)

RATIO_EPSILON = 1e-6
HISTOGRAM_BIN = 5
ASSOCIATION_COLUMNS = ['code', 'label', 'coefficient_mean', 'coefficient_sd', 'contextual_ratio', 'n_band_pairs', 'quadrant']


@dataclass(frozen=True, order=True)
class AgeBand:
    lower: int
    upper: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ConfigError('bands', tr("нижняя граница должна быть меньше верхней: {lower}-{upper}").format(
                lower=self.lower, upper=self.upper))

    def __contains__(self, age: int) -> bool:
        return self.lower <= age < self.upper

    def __str__(self) -> str:
        return f"{self.lower}-{self.upper}"


def parse_bands(text: str) -> List[AgeBand]:
    """
    Разбирает строку вида "16-45; 45-55; 55-60".

    :raises ConfigError: Неверный формат, неупорядоченные или пересекающиеся полосы.
    """
    bands = []
    for part in text.split(';'):
        part = part.strip()
        if not part:
            continue
        try:
            lower, upper = (int(x) for x in part.split('-'))
        except ValueError:
            raise ConfigError('bands', tr("ожидается формат 45-55, получено '{part}'").format(part=part)) from None
        bands.append(AgeBand(lower, upper))
    check_bands(bands)
    return bands


def check_bands(bands: Sequence[AgeBand]) -> None:
    if not bands:
        raise ConfigError('bands', tr("нужна хотя бы одна возрастная полоса"))
    for prev, cur in zip(bands, bands[1:]):
        if cur.lower < prev.upper:
            raise ConfigError('bands', tr("полосы должны быть упорядочены и не пересекаться: {a}, {b}").format(a=prev, b=cur))


PAPER_BANDS = parse_bands("45-55; 55-60; 60-65; 65-70; 70-75; 75-80; 80-85; 85-90")
DESK_BANDS = [AgeBand(16, 45)] + PAPER_BANDS


class Quadrant(str, Enum):
    ASSOCIATED = 'associated'
    DISSOCIATED = 'dissociated'
    AMBIGUOUS_HIGH_CONTEXT = 'ambiguous_high_context'
    AMBIGUOUS_HIGH_COEF = 'ambiguous_high_coef'
    UNDETERMINED = 'undetermined'


QUADRANT_ORDER = {q: i for i, q in enumerate(Quadrant)}


def classify_quadrant(contextual_ratio: Optional[float], coefficient: float) -> Quadrant:
    if contextual_ratio is None or contextual_ratio == 1.0 or coefficient == 0.0:
        return Quadrant.UNDETERMINED
    if contextual_ratio > 1.0:
        return Quadrant.ASSOCIATED if coefficient > 0 else Quadrant.AMBIGUOUS_HIGH_CONTEXT
    return Quadrant.AMBIGUOUS_HIGH_COEF if coefficient > 0 else Quadrant.DISSOCIATED


# --- Стратификация ---

@dataclass(frozen=True)
class BandPair:
    incident: AgeBand
    baseline: AgeBand
    exposure: Tuple[int, ...]
    non_exposure: Tuple[int, ...]

    @property
    def skipped(self) -> bool:
        return not self.exposure or not self.non_exposure


@dataclass(frozen=True)
class StratifiedGroups:
    code: int
    pairs: Tuple[BandPair, ...]

    @property
    def usable_pairs(self) -> List[BandPair]:
        return [p for p in self.pairs if not p.skipped]

    def exposed_patients(self) -> frozenset:
        return frozenset(pid for p in self.pairs for pid in p.exposure)


def _band_of(age: int, bands: Sequence[AgeBand]) -> Optional[AgeBand]:
    for band in bands:
        if age in band:
            return band
    return None


def age_stratified_groups(
    records: Sequence[PatientRecord],
    code: int,
    bands: Sequence[AgeBand],
    vocab_size: Optional[int] = None,
) -> StratifiedGroups:
    """
    Группы воздействия и без воздействия для каждой пары (полоса первого
    появления кода, полоса базового возраста), где базовая полоса не раньше.

    :param code: Идентификатор кода.
    :param vocab_size: Размер словаря для проверки кода.
    :raises CohortError: Код вне словаря.
    """
    if vocab_size is not None and not 0 <= code < vocab_size:
        raise CohortError(tr("Неизвестный код: {code}").format(code=code))
    check_bands(bands)
    exposure: Dict[Tuple[AgeBand, AgeBand], List[int]] = {}
    non_exposure: Dict[AgeBand, List[int]] = {}
    for record in records:
        baseline = _band_of(record.baseline_age, bands)
        if baseline is None:
            continue
        first = record.first_occurrence_age(code)
        if first is None:
            non_exposure.setdefault(baseline, []).append(record.patient_id)
            continue
        incident = _band_of(first, bands)
        if incident is not None and baseline.lower >= incident.lower:
            exposure.setdefault((incident, baseline), []).append(record.patient_id)

    pairs = []
    for i, incident in enumerate(bands):
        for baseline in bands[i:]:
            pairs.append(BandPair(
                incident=incident,
                baseline=baseline,
                exposure=tuple(exposure.get((incident, baseline), ())),
                non_exposure=tuple(non_exposure.get(baseline, ())),
            ))
    return StratifiedGroups(code=code, pairs=tuple(pairs))


# --- Контекстное отношение ---

@dataclass(frozen=True)
class PairRatio:
    incident: str
    baseline: str
    n_exposure: int
    n_non_exposure: int
    exposure_mean: Optional[float]
    non_exposure_mean: Optional[float]
    ratio: Optional[float]
    reason: Optional[str] = None


@dataclass(frozen=True)
class ContextualRatio:
    value: float
    pairs: Tuple[PairRatio, ...]

    @property
    def n_used(self) -> int:
        return sum(1 for p in self.pairs if p.ratio is not None)


def ratio_from_means(contextual: Mapping[int, float], groups: StratifiedGroups, epsilon: float = RATIO_EPSILON) -> ContextualRatio:
    """
    CR по заранее посчитанным средним контекстным значениям пациентов.

    Пары с пустой стороной, разными знаками средних или |среднее воздействия| < epsilon пропускаются.

    :raises NoUsableStrataError: Все пары пропущены.
    """
    diagnostics = []
    for pair in groups.pairs:
        exp_mean = float(np.mean([contextual[pid] for pid in pair.exposure])) if pair.exposure else None
        non_mean = float(np.mean([contextual[pid] for pid in pair.non_exposure])) if pair.non_exposure else None
        reason = None
        if exp_mean is None or non_mean is None:
            reason = 'empty_group'
        elif abs(exp_mean) < epsilon:
            reason = 'near_zero_exposure'
        elif np.sign(exp_mean) != np.sign(non_mean):
            reason = 'mixed_sign'
        diagnostics.append(PairRatio(
            incident=str(pair.incident),
            baseline=str(pair.baseline),
            n_exposure=len(pair.exposure),
            n_non_exposure=len(pair.non_exposure),
            exposure_mean=exp_mean,
            non_exposure_mean=non_mean,
            ratio=None if reason else non_mean / exp_mean,
            reason=reason,
        ))
    ratios = [d.ratio for d in diagnostics if d.ratio is not None]
    if not ratios:
        raise NoUsableStrataError(groups.code, diagnostics)
    return ContextualRatio(value=float(np.mean(ratios)), pairs=tuple(diagnostics))


def estimate_contextual_means(model, records: Sequence[PatientRecord], n_samples: int = 30, seed: int = 0) -> Dict[int, float]:
    """Среднее контекстной переменной каждого пациента по n_samples реализациям весов."""
    from models.student import latent_samples

    contextual, _ = latent_samples(model, list(records), n_samples, seed)
    return {r.patient_id: float(v) for r, v in zip(records, contextual.mean(axis=1))}


def contextual_ratio(
    model,
    groups: StratifiedGroups,
    records: Sequence[PatientRecord],
    n_samples: int = 30,
    seed: int = 0,
) -> ContextualRatio:
    """
    CR кода по обученной модели.

    :param records: Когорта, из которой построены группы.
    """
    members = groups.exposed_patients() | frozenset(pid for p in groups.pairs for pid in p.non_exposure)
    selected = [r for r in records if r.patient_id in members]
    return ratio_from_means(estimate_contextual_means(model, selected, n_samples, seed), groups)


# --- Карта ассоциаций ---

@dataclass
class AssociationEntry:
    code: int
    label: str
    coefficient_mean: float
    coefficient_sd: float
    contextual_ratio: Optional[float]
    n_band_pairs: int
    quadrant: Quadrant
    n_exposed: int = 0
    diagnostics: Tuple[PairRatio, ...] = field(default=(), repr=False, compare=False)

    @property
    def strength(self) -> float:
        if self.contextual_ratio is None or self.contextual_ratio <= 0:
            return 0.0
        return abs(self.coefficient_mean) * abs(math.log(self.contextual_ratio))


def sort_entries(entries: Iterable[AssociationEntry]) -> List[AssociationEntry]:
    return sorted(entries, key=lambda e: (QUADRANT_ORDER[e.quadrant], -e.strength, e.code))


def association_map(
    model,
    records: Sequence[PatientRecord],
    vocabulary: Vocabulary,
    bands: Sequence[AgeBand] = DESK_BANDS,
    n_samples: int = 30,
    seed: int = 0,
    coefficient_samples: int = 1000,
    contextual: Optional[Mapping[int, float]] = None,
) -> List[AssociationEntry]:
    """
    Карта ассоциаций по всем кодам словаря.

    Коды без пригодных пар остаются в списке с CR = None и квадрантом undetermined.

    :param contextual: Готовые средние контекстные значения (иначе считаются по модели).
    """
    from models.student import posterior_coefficients

    records = list(records)
    if contextual is None:
        contextual = estimate_contextual_means(model, records, n_samples, seed)
    coef_mean, coef_sd = posterior_coefficients(model, coefficient_samples, seed)

    def one_code(code: int) -> AssociationEntry:
        groups = age_stratified_groups(records, code, bands, len(vocabulary))
        try:
            ratio = ratio_from_means(contextual, groups)
            value, used, diagnostics = ratio.value, ratio.n_used, ratio.pairs
        except NoUsableStrataError as e:
            value, used, diagnostics = None, 0, tuple(e.diagnostics)
        return AssociationEntry(
            code=code,
            label=vocabulary.label(code),
            coefficient_mean=float(coef_mean[code]),
            coefficient_sd=float(coef_sd[code]),
            contextual_ratio=value,
            n_band_pairs=used,
            quadrant=classify_quadrant(value, float(coef_mean[code])),
            n_exposed=len(groups.exposed_patients()),
            diagnostics=diagnostics,
        )

    entries = ProcessUtils.fan_out(one_code, range(len(vocabulary)), label='association')
    counts = {q.value: sum(1 for e in entries if e.quadrant == q) for q in Quadrant}
    logger.info(tr("Карта ассоциаций: {counts}").format(counts=counts))
    return sort_entries(entries)


def association_frame(entries: Sequence[AssociationEntry]) -> pd.DataFrame:
    return pd.DataFrame(
        [[e.code, e.label, e.coefficient_mean, e.coefficient_sd, e.contextual_ratio, e.n_band_pairs, e.quadrant.value]
         for e in entries],
        columns=ASSOCIATION_COLUMNS,
    )


def export_association(entries: Sequence[AssociationEntry], path: str, plot_path: Optional[str] = None) -> List[str]:
    """
    CSV карты ассоциаций и, по желанию, SVG-диаграмма log CR против коэффициента.

    :return: Пути записанных файлов.
    """
    folder = os.path.dirname(path)
    if folder:
        ensure_folder(folder)
    association_frame(entries).to_csv(path, index=False, lineterminator='\n')
    written = [path]
    if plot_path is not None:
        written.append(plot_association(entries, plot_path))
    return written


def load_association(path: str) -> List[AssociationEntry]:
    frame = pd.read_csv(path, keep_default_na=False, na_values=[''])
    entries = []
    for row in frame.itertuples(index=False):
        ratio = None if pd.isna(row.contextual_ratio) else float(row.contextual_ratio)
        entries.append(AssociationEntry(
            code=int(row.code),
            label=str(row.label),
            coefficient_mean=float(row.coefficient_mean),
            coefficient_sd=float(row.coefficient_sd),
            contextual_ratio=ratio,
            n_band_pairs=int(row.n_band_pairs),
            quadrant=Quadrant(row.quadrant),
        ))
    return entries


def plot_association(entries: Sequence[AssociationEntry], path: str) -> str:
    plt.rcParams['svg.hashsalt'] = 'riskdistill'
    fig, ax = plt.subplots(figsize=(7, 5))
    for quadrant in Quadrant:
        points = [(math.log(e.contextual_ratio), e.coefficient_mean) for e in entries
                  if e.quadrant == quadrant and e.contextual_ratio is not None and e.contextual_ratio > 0]
        if points:
            xs, ys = zip(*points)
            ax.scatter(xs, ys, s=10, label=quadrant.value)
    ax.axhline(0.0, color='grey', linewidth=0.5)
    ax.axvline(0.0, color='grey', linewidth=0.5)
    ax.set_xlabel('log contextual ratio')
    ax.set_ylabel('coefficient')
    if entries:
        ax.legend(loc='best', fontsize='small')
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    return path


# --- V Крамера ---

@dataclass(frozen=True)
class CramersV:
    value: float
    degenerate: bool = False


def cramers_v_table(table) -> CramersV:
    """
    V = sqrt(chi2 / n) для таблицы 2 x 2.

    Вырожденное поле (код отсутствует или есть у всех) даёт 0 с флагом.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (2, 2):
        raise ValueError(tr("Ожидается таблица 2 x 2"))
    n = table.sum()
    if n == 0 or np.any(table.sum(axis=0) == 0) or np.any(table.sum(axis=1) == 0):
        return CramersV(0.0, degenerate=True)
    chi2 = chi2_contingency(table, correction=False)[0]
    return CramersV(float(min(1.0, math.sqrt(chi2 / n))))


def presence_table(records: Sequence[PatientRecord], code_a: int, code_b: int) -> np.ndarray:
    table = np.zeros((2, 2), dtype=np.int64)
    for record in records:
        present = record.codes_present
        table[int(code_a in present), int(code_b in present)] += 1
    return table


def cramers_v(records: Sequence[PatientRecord], code_a: int, code_b: int) -> CramersV:
    if not records:
        raise CohortError(tr("Пустая выборка для V Крамера"))
    result = cramers_v_table(presence_table(records, code_a, code_b))
    if result.degenerate:
        logger.warning(tr("Вырожденная таблица для кодов {a} и {b}: V = 0").format(a=code_a, b=code_b))
    return result


def presence_matrix(records: Sequence[PatientRecord], vocab_size: int) -> np.ndarray:
    matrix = np.zeros((len(records), vocab_size), dtype=np.float64)
    for row, record in enumerate(records):
        matrix[row, list(record.codes_present)] = 1.0
    return matrix


def pairwise_cramers_v(presence: np.ndarray) -> np.ndarray:
    """
    V для всех пар столбцов сразу: для 2 x 2 chi2 / n = (n11 n00 - n10 n01)^2 / (r1 r0 c1 c0).

    Вырожденные пары получают 0.
    """
    n = presence.shape[0]
    n11 = presence.T @ presence
    ones = presence.sum(axis=0)
    zeros = n - ones
    n10 = ones[:, None] - n11
    n01 = ones[None, :] - n11
    n00 = n - n11 - n10 - n01
    margins = np.outer(ones, ones) * np.outer(zeros, zeros)
    with np.errstate(divide='ignore', invalid='ignore'):
        phi2 = np.where(margins > 0, (n11 * n00 - n10 * n01) ** 2 / margins, 0.0)
    return np.sqrt(np.clip(phi2, 0.0, 1.0))


def collinearity_audit(
    records: Sequence[PatientRecord],
    vocabulary: Vocabulary,
    sample_size: int = 100000,
    threshold: float = 0.6,
    seed: int = 0,
) -> pd.DataFrame:
    """
    Пары кодов с V Крамера выше порога на случайной выборке пациентов.

    :return: Таблица code_a,code_b,label_a,label_b,cramers_v по убыванию V.
    """
    records = list(records)
    if len(records) > sample_size:
        index = np.sort(rng_for(seed, 'collinearity').choice(len(records), size=sample_size, replace=False))
        records = [records[i] for i in index]
    values = pairwise_cramers_v(presence_matrix(records, len(vocabulary)))
    rows = []
    for a, b in zip(*np.nonzero(np.triu(values > threshold, k=1))):
        rows.append((int(a), int(b), vocabulary.label(int(a)), vocabulary.label(int(b)), float(values[a, b])))
    frame = pd.DataFrame(rows, columns=['code_a', 'code_b', 'label_a', 'label_b', 'cramers_v'])
    frame = frame.sort_values(['cramers_v', 'code_a', 'code_b'], ascending=[False, True, True], kind='mergesort')
    logger.info(tr("Аудит коллинеарности: {n} пар выше {threshold}").format(n=len(frame), threshold=threshold))
    return frame.reset_index(drop=True)


# --- Возрастные гистограммы ---

def age_histograms(
    records: Sequence[PatientRecord],
    entries: Sequence[AssociationEntry],
    bands: Sequence[AgeBand],
) -> pd.DataFrame:
    """
    Гистограммы базового возраста групп воздействия и без воздействия
    для каждого классифицированного кода (5-летние корзины).
    """
    by_id = {r.patient_id: r for r in records}
    rows = []
    for entry in entries:
        if entry.quadrant == Quadrant.UNDETERMINED:
            continue
        groups = age_stratified_groups(records, entry.code, bands)
        members = {
            'exposure': groups.exposed_patients(),
            'non_exposure': frozenset(pid for p in groups.usable_pairs for pid in p.non_exposure),
        }
        for group, pids in members.items():
            counts: Dict[int, int] = {}
            for pid in pids:
                start = by_id[pid].baseline_age // HISTOGRAM_BIN * HISTOGRAM_BIN
                counts[start] = counts.get(start, 0) + 1
            for start in sorted(counts):
                rows.append((entry.code, group, f"{start}-{start + HISTOGRAM_BIN}", counts[start]))
    return pd.DataFrame(rows, columns=['code', 'group', 'age_bin', 'count'])
