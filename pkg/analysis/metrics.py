"""
Метрики различения и калибровки с двумя протоколами выборки.

mean30: метрики по средней вероятности каждого пациента;
ci30: метрики по r-му отсчёту каждого пациента в раунде r,
среднее и интервал 2.5/97.5 перцентилей по раундам.
"""
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, roc_auc_score

from models.teacher import PredictiveDistribution
from utils.errors import MetricError
from utils.utils import ensure_folder, tr, write_json

logger = logging.getLogger(__name__)

DEFAULT_BINS = 10
DEFAULT_ROUNDS = 30
CI_PERCENTILES = (2.5, 97.5)

Distributions = Union[np.ndarray, Sequence[PredictiveDistribution]]


class Protocol(str, Enum):
    MEAN30 = 'mean30'
    CI30 = 'ci30'


@dataclass(frozen=True)
class CalibrationBin:
    bin_low: float
    bin_high: float
    mean_predicted: Optional[float]
    observed_rate: Optional[float]
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass
class EvaluationReport:
    auroc: float
    auprc: float
    calibration_bins: List[CalibrationBin]
    protocol: Protocol
    n: int
    ci: Optional[Dict[str, Tuple[float, float]]] = None
    n_evaluations: int = 1
    rounds: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        result = {
            'auroc': self.auroc,
            'auprc': self.auprc,
            'protocol': self.protocol.value,
            'n': self.n,
            'n_evaluations': self.n_evaluations,
            'ci': {k: list(v) for k, v in self.ci.items()} if self.ci else None,
            'calibration_bins': [dict(asdict(b), empty=b.empty) for b in self.calibration_bins],
        }
        if self.rounds:
            result['rounds'] = self.rounds
        return result


def _check_inputs(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise MetricError(tr("Длины оценок и меток не совпадают: {a} != {b}").format(a=scores.size, b=labels.size))
    if scores.size == 0:
        raise MetricError(tr("Пустой набор оценок"))
    if not np.all(np.isfinite(scores)):
        raise MetricError(tr("Оценки содержат неконечные значения"))
    if not np.all(np.isin(labels, (0, 1))):
        raise MetricError(tr("Метки должны быть 0 или 1"))
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """
    Площадь под ROC-кривой (статистика Манна-Уитни, ничьи дают 0.5).

    :raises MetricError: Метки одного класса.
    """
    scores, labels = _check_inputs(scores, labels)
    if np.unique(labels).size != 2:
        raise MetricError(tr("AUROC не определён для меток одного класса"))
    return float(roc_auc_score(labels, scores))


def auprc(scores, labels) -> float:
    """
    Средняя точность (ступенчатая сумма точности на рангах положительных).

    :raises MetricError: Нет положительных меток.
    """
    scores, labels = _check_inputs(scores, labels)
    if labels.sum() == 0:
        raise MetricError(tr("AUPRC не определён без положительных меток"))
    return float(average_precision_score(labels, scores))


def calibration_curve(scores, labels, n_bins: int = DEFAULT_BINS) -> List[CalibrationBin]:
    """
    Равноширинные корзины на [0, 1]; оценка 1.0 попадает в последнюю.

    :raises MetricError: n_bins < 2.
    """
    if n_bins < 2:
        raise MetricError(tr("n_bins должно быть >= 2"))
    scores, labels = _check_inputs(scores, labels)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    index = np.clip(np.floor(scores * n_bins).astype(np.int64), 0, n_bins - 1)
    bins = []
    for k in range(n_bins):
        members = index == k
        count = int(members.sum())
        bins.append(CalibrationBin(
            bin_low=float(edges[k]),
            bin_high=float(edges[k + 1]),
            mean_predicted=float(scores[members].mean()) if count else None,
            observed_rate=float(labels[members].mean()) if count else None,
            count=count,
        ))
    return bins


def sample_matrix(distributions: Distributions) -> np.ndarray:
    """Приводит список распределений к матрице N x S."""
    if isinstance(distributions, np.ndarray):
        matrix = np.asarray(distributions, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix[:, None]
    else:
        if not distributions:
            raise MetricError(tr("Пустой список распределений"))
        sizes = {len(d) for d in distributions}
        if len(sizes) != 1:
            raise MetricError(tr("Распределения имеют разное число отсчётов: {sizes}").format(sizes=sorted(sizes)))
        matrix = np.stack([np.asarray(d.samples, dtype=np.float64) for d in distributions])
    if matrix.shape[1] < 1:
        raise MetricError(tr("Нужен хотя бы один отсчёт"))
    return matrix


def evaluate_mean_protocol(distributions: Distributions, labels, n_bins: int = DEFAULT_BINS) -> EvaluationReport:
    matrix = sample_matrix(distributions)
    mean = matrix.mean(axis=1)
    return EvaluationReport(
        auroc=auroc(mean, labels),
        auprc=auprc(mean, labels),
        calibration_bins=calibration_curve(mean, labels, n_bins),
        protocol=Protocol.MEAN30,
        n=mean.size,
    )


def evaluate_ci_protocol(
    distributions: Distributions,
    labels,
    n_rounds: int = DEFAULT_ROUNDS,
    n_bins: int = DEFAULT_BINS,
) -> EvaluationReport:
    """
    Раунд r использует r-й отсчёт каждого пациента.

    Калибровочная таблица строится по средним вероятностям пациентов.

    :raises MetricError: У распределений меньше n_rounds отсчётов.
    """
    matrix = sample_matrix(distributions)
    if n_rounds < 1:
        raise MetricError(tr("n_rounds должно быть >= 1"))
    if matrix.shape[1] < n_rounds:
        raise MetricError(tr("Отсчётов {s} меньше числа раундов {r}").format(s=matrix.shape[1], r=n_rounds))
    rounds: Dict[str, List[float]] = {'auroc': [], 'auprc': []}
    for r in range(n_rounds):
        rounds['auroc'].append(auroc(matrix[:, r], labels))
        rounds['auprc'].append(auprc(matrix[:, r], labels))
    ci = {}
    for name, values in rounds.items():
        low, high = np.percentile(values, CI_PERCENTILES)
        ci[name] = (float(low), float(high))
    logger.debug(tr("Протокол ci30: {n} раундов").format(n=n_rounds))
    return EvaluationReport(
        auroc=float(np.mean(rounds['auroc'])),
        auprc=float(np.mean(rounds['auprc'])),
        calibration_bins=calibration_curve(matrix.mean(axis=1), labels, n_bins),
        protocol=Protocol.CI30,
        n=matrix.shape[0],
        ci=ci,
        n_evaluations=n_rounds,
        rounds=rounds,
    )


def calibration_frame(bins: Sequence[CalibrationBin]) -> pd.DataFrame:
    return pd.DataFrame(
        [dict(asdict(b), empty=b.empty) for b in bins],
        columns=['bin_low', 'bin_high', 'mean_predicted', 'observed_rate', 'count', 'empty'],
    )


def export_report(report: EvaluationReport, folder: str, name: str) -> List[str]:
    """
    Пишет <name>.json и <name>_calibration.csv.

    :return: Пути записанных файлов.
    """
    ensure_folder(folder)
    json_path = os.path.join(folder, f"{name}.json")
    csv_path = os.path.join(folder, f"{name}_calibration.csv")
    write_json(json_path, report.to_dict())
    calibration_frame(report.calibration_bins).to_csv(csv_path, index=False, lineterminator='\n')
    return [json_path, csv_path]
