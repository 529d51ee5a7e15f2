"""
Пациентный отбор записей: обучаемые оценки важности каждой записи
(релаксация Бернулли через бинарное конкретное распределение) против
замороженного студента.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import special

from cohort.encoding import sorted_encounters
from cohort.generator import MIN_AGE, PatientRecord, Vocabulary
from engine.diffcore import Tape, TapeBuilder, value_and_gradient
from engine.optim import Adam
from models.layers import GP_PARAMS, build_bilstm_readout, build_gp_marginal, build_gp_sample
from models.student import ADDITIVE_HEAD, AGE_EMBEDDING, CODE_EMBEDDING, StudentModel, gp_noise, predict_matrix, weight_draw
from models.teacher import PredictiveDistribution
from utils.errors import ConfigError, ExplainerError, TapeOverflowError
from utils.process_utils import ProcessUtils
from utils.utils import ensure_folder, rng_for, tr, write_json

logger = logging.getLogger(__name__)

UNIFORM_CLIP = 1e-12
SCORE_CLIP = 1e-12


@dataclass
class ExplainerConfig:
    gamma: float = 0.1
    learning_rate: float = 9e-2
    iterations: int = 500
    temperature: float = 0.5
    samples_per_step: int = 10
    selection_threshold: float = 0.5
    init_logit: float = 0.0
    n_pool: int = 30

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigError('gamma', tr("должно быть >= 0"))
        if not self.temperature > 0:
            raise ConfigError('temperature', tr("должно быть > 0"))
        if not self.learning_rate > 0:
            raise ConfigError('learning_rate', tr("должно быть > 0"))
        if self.iterations < 0:
            raise ConfigError('iterations', tr("должно быть >= 0"))
        if self.samples_per_step < 1 or self.n_pool < 1:
            raise ConfigError('samples_per_step', tr("должно быть >= 1"))
        if not 0.0 <= self.selection_threshold <= 1.0:
            raise ConfigError('selection_threshold', tr("должно лежать в [0, 1]"))


@dataclass(frozen=True)
class ImportanceScores:
    """
    Оценки важности записей пациента в порядке возраста.

    :param logits: Обученные логиты, по одному на запись.
    :param scores: sigmoid(logits), без шума.
    """
    patient_id: int
    codes: Tuple[int, ...]
    ages: Tuple[int, ...]
    logits: np.ndarray
    scores: np.ndarray
    temperature: float

    def __len__(self) -> int:
        return len(self.codes)


@dataclass
class ExplainerResult:
    importance: ImportanceScores
    p_baseline: float
    trace: List[float] = field(default_factory=list)


@dataclass
class FidelityReport:
    patient_id: int
    p_full: PredictiveDistribution
    p_selected: PredictiveDistribution
    n_selected: int
    fraction_selected: float
    threshold: float

    def to_dict(self) -> Dict:
        return {
            'patient_id': self.patient_id,
            'p_full': [float(x) for x in self.p_full.samples],
            'p_selected': [float(x) for x in self.p_selected.samples],
            'p_full_mean': self.p_full.mean,
            'p_selected_mean': self.p_selected.mean,
            'n_selected': self.n_selected,
            'fraction_selected': self.fraction_selected,
            'threshold': self.threshold,
        }


# --- Релаксация Бернулли ---

def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Логистический шум log U - log(1 - U)."""
    u = np.clip(rng.uniform(size=shape), UNIFORM_CLIP, 1.0 - UNIFORM_CLIP)
    return np.log(u) - np.log1p(-u)


def gumbel_relax(logit, temperature: float, seed: int = 0) -> np.ndarray:
    """
    Отсчёт бинарного конкретного распределения sigmoid((logit + G) / temperature).

    Результат строго внутри (0, 1).
    """
    if not temperature > 0:
        raise ConfigError('temperature', tr("должно быть > 0"))
    logit = np.asarray(logit, dtype=np.float64)
    noise = gumbel_noise(rng_for(seed, 'gumbel-relax'), logit.shape)
    return np.clip(special.expit((logit + noise) / temperature), SCORE_CLIP, 1.0 - SCORE_CLIP)


def explainer_loss(p_baseline: float, p_predictor: float, scores, gamma: float) -> float:
    """(p_baseline - p_predictor)^2 + gamma * сумма оценок."""
    for p in (p_baseline, p_predictor):
        if not 0.0 <= p <= 1.0:
            raise ValueError(tr("Вероятность вне [0, 1]: {p}").format(p=p))
    return float((p_baseline - p_predictor) ** 2 + gamma * np.sum(scores))


# --- Маскированное предсказание ---

def ordered_encounters(record: PatientRecord) -> list:
    """Все записи пациента по возрасту; по одной оценке важности на каждую."""
    return sorted_encounters(record, max(1, len(record.encounters)))


def window_offset(model: StudentModel, record: PatientRecord) -> int:
    """Номер первой записи, которую видит рекуррентный путь (последние max_len)."""
    return max(0, len(record.encounters) - model.arch.max_len)


def soft_presence(model: StudentModel, record: PatientRecord, scores: np.ndarray) -> np.ndarray:
    """
    Multi-hot, где бит кода заменён максимумом оценок всех его записей.
    """
    bits = np.zeros(model.arch.vocab_size)
    codes = np.array([enc.code for enc in ordered_encounters(record)], dtype=np.int64)
    np.maximum.at(bits, codes, _check_scores(record, scores))
    return bits


def _check_scores(record: PatientRecord, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    expected = len(record.encounters)
    if scores.size != expected:
        raise ExplainerError(tr("Оценок {n}, а записей {m}").format(n=scores.size, m=expected))
    return scores


def masked_predict(model: StudentModel, record: PatientRecord, scores, n_samples: int = 30, seed: int = 0) -> PredictiveDistribution:
    """
    Предсказание по записи, отфильтрованной оценками важности.

    Эмбеддинг каждого шага окна умножается на оценку его записи; бит multi-hot
    заменяется максимумом оценок всех записей кода.

    :raises ExplainerError: Число оценок не совпадает с числом записей.
    """
    scores = _check_scores(record, scores)
    presence = soft_presence(model, record, scores)[None, :]
    window_scores = scores[window_offset(model, record):]
    matrix = predict_matrix(model, [record], n_samples, seed, step_scales=[window_scores], multihot_override=presence)
    return PredictiveDistribution(matrix[0])


# --- Обучение оценок ---

class ExplainerContext:
    """
    Замороженные величины для одного пациента: пул реализаций весов,
    входы шагов окна и коэффициенты кодов по каждой реализации, шум ГП.
    """

    def __init__(self, model: StudentModel, record: PatientRecord, n_pool: int, seed: int):
        self.model = model
        self.record = record
        self.seed = seed
        ordered = ordered_encounters(record)
        self.codes = np.array([enc.code for enc in ordered], dtype=np.int64)
        self.ages = np.array([enc.age for enc in ordered], dtype=np.int64)
        self.offset = window_offset(model, record)
        self.unique_codes = sorted(set(self.codes.tolist()))
        self.occurrences = [np.flatnonzero(self.codes == code) for code in self.unique_codes]

        draws = [weight_draw(model, seed, s) for s in range(n_pool)]
        window_codes = self.codes[self.offset:]
        age_ids = self.ages[self.offset:] - MIN_AGE
        self.steps = np.stack([d[CODE_EMBEDDING.name][window_codes] + d[AGE_EMBEDDING.name][age_ids] for d in draws])
        self.coefficients = np.stack([d[ADDITIVE_HEAD.name][:, 0] for d in draws])[:, self.unique_codes]
        self.gp_eps = gp_noise(seed, record.patient_id, n_pool)
        self.p_baseline = float(predict_matrix(model, [record], n_pool, seed)[0].mean())

    @property
    def n_steps(self) -> int:
        """Число оценок: по одной на запись."""
        return self.codes.size

    @property
    def n_window(self) -> int:
        return self.codes.size - self.offset



def build_explainer_tape(
    context: ExplainerContext,
    noise: np.ndarray,
    draw_index: Sequence[int],
    gamma: float,
    temperature: float,
) -> Tape:
    """
    Потери шага: (P_b - среднее sigmoid(f))^2 + gamma * среднее по строкам суммы оценок.

    :param noise: T x K логистический шум.
    :param draw_index: Номера реализаций из пула для K строк.
    """
    model = context.model
    arch = model.arch
    k = len(draw_index)
    t_steps = context.n_window
    idx = np.asarray(draw_index, dtype=np.int64)
    b = TapeBuilder()
    logits = b.input('logits')
    spread = b.matmul(logits, b.constant(np.ones((1, k))))
    scores = b.sigmoid(b.scale(b.add(spread, b.constant(noise)), 1.0 / temperature))

    ones_d = b.constant(np.ones((1, arch.d)))
    steps = []
    for t in range(t_steps):
        column = b.transpose(b.gather_rows(scores, [context.offset + t]))
        steps.append(b.multiply(b.matmul(column, ones_d), b.constant(context.steps[idx, t, :])))
    nodes = {name: b.constant(model.params[name]) for name in model.params if name.startswith(('lstm.', 'readout.'))}
    contextual = build_bilstm_readout(b, steps, [None] * t_steps, nodes, k, arch.h)

    presence_rows = []
    for positions in context.occurrences:
        row = b.gather_rows(scores, [int(positions[0])])
        for p in positions[1:]:
            row = b.maximum(row, b.gather_rows(scores, [int(p)]))
        presence_rows.append(row)
    presence = b.concatenate(presence_rows, axis=0)
    weighted = b.multiply(presence, b.constant(context.coefficients[idx].T))
    additive = b.reshape(b.reduce_sum(weighted, axis=0), (k, 1))

    gp_nodes = {name: b.constant(model.params[name]) for name in GP_PARAMS}
    latent = b.concatenate([contextual, additive], axis=1)
    mean, var = build_gp_marginal(b, latent, k, gp_nodes, arch.m)
    f = build_gp_sample(b, mean, var, context.gp_eps[idx].reshape(k, 1))
    p_predictor = b.reduce_mean(b.sigmoid(f))
    fit = b.square(b.subtract(p_predictor, b.constant(np.float64(context.p_baseline))))
    anchor = b.scale(b.reduce_sum(scores), gamma / k)
    b.output('loss', b.add(fit, anchor))
    b.output('p_predictor', p_predictor)
    return b.build()


def fit_explainer(model: StudentModel, record: PatientRecord, config: Optional[ExplainerConfig] = None, seed: int = 0) -> ExplainerResult:
    """
    Adam по логитам важности на config.iterations шагов.

    На шаге i используются строки пула (i * K + j) mod n_pool и свежий
    логистический шум; итоговые оценки равны sigmoid(logits) без шума.

    :raises ExplainerError: Неконечные потери (прикладывается трасса).
    """
    config = config or ExplainerConfig()
    config.validate()
    context = ExplainerContext(model, record, config.n_pool, seed)
    logits = np.full((context.n_steps, 1), float(config.init_logit))
    params = {'logits': logits}
    optimizer = Adam(params, lr=config.learning_rate)
    k = config.samples_per_step
    trace: List[float] = []

    for step in range(config.iterations):
        noise = gumbel_noise(rng_for(seed, 'gumbel', record.patient_id, step), (context.n_steps, k))
        draw_index = [(step * k + j) % config.n_pool for j in range(k)]
        tape = build_explainer_tape(context, noise, draw_index, config.gamma, config.temperature)
        try:
            out, grads = value_and_gradient(tape, params, 'loss')
        except TapeOverflowError as e:
            raise ExplainerError(tr("Неконечные потери объяснителя на шаге {step}: {error}").format(step=step, error=e), trace) from e
        loss = float(out['loss'])
        if not np.isfinite(loss):
            raise ExplainerError(tr("Неконечные потери объяснителя на шаге {step}").format(step=step), trace)
        trace.append(loss)
        optimizer.step(grads)

    final_logits = params['logits'][:, 0].copy()
    importance = ImportanceScores(
        patient_id=record.patient_id,
        codes=tuple(int(c) for c in context.codes),
        ages=tuple(int(a) for a in context.ages),
        logits=final_logits,
        scores=special.expit(final_logits),
        temperature=config.temperature,
    )
    logger.debug(tr("Пациент {pid}: объяснение за {n} шагов, потери {loss}").format(
        pid=record.patient_id, n=config.iterations, loss=trace[-1] if trace else None))
    return ExplainerResult(importance=importance, p_baseline=context.p_baseline, trace=trace)


def fidelity_report(
    model: StudentModel,
    record: PatientRecord,
    scores,
    threshold: float = 0.5,
    n_samples: int = 30,
    seed: int = 0,
) -> FidelityReport:
    """Жёсткий отбор записей с оценкой > threshold и повторное предсказание."""
    scores = _check_scores(record, scores)
    selected = (scores > threshold).astype(np.float64)
    p_full = masked_predict(model, record, np.ones_like(scores), n_samples, seed)
    p_selected = masked_predict(model, record, selected, n_samples, seed)
    return FidelityReport(
        patient_id=record.patient_id,
        p_full=p_full,
        p_selected=p_selected,
        n_selected=int(selected.sum()),
        fraction_selected=float(selected.mean()),
        threshold=threshold,
    )


def explain_patients(
    model: StudentModel,
    records: Sequence[PatientRecord],
    config: Optional[ExplainerConfig] = None,
    seed: int = 0,
) -> List[Tuple[ExplainerResult, FidelityReport]]:
    config = config or ExplainerConfig()
    config.validate()

    def one(record: PatientRecord) -> Tuple[ExplainerResult, FidelityReport]:
        result = fit_explainer(model, record, config, seed)
        report = fidelity_report(model, record, result.importance.scores, config.selection_threshold, config.n_pool, seed)
        return result, report

    return ProcessUtils.fan_out(one, list(records), label='explain')


def importance_frame(importance: ImportanceScores, vocabulary: Vocabulary) -> pd.DataFrame:
    return pd.DataFrame({
        'code': [vocabulary.label(c) for c in importance.codes],
        'age': list(importance.ages),
        'score': importance.scores,
        'description': [f"{vocabulary[c].kind.value} {vocabulary.label(c)}" for c in importance.codes],
    })


def export_explanation(folder: str, result: ExplainerResult, report: FidelityReport, vocabulary: Vocabulary) -> List[str]:
    """
    Пишет patient_<id>.csv (code,age,score,description) и patient_<id>.json.
    """
    ensure_folder(folder)
    pid = result.importance.patient_id
    csv_path = os.path.join(folder, f"patient_{pid}.csv")
    json_path = os.path.join(folder, f"patient_{pid}.json")
    importance_frame(result.importance, vocabulary).to_csv(csv_path, index=False, lineterminator='\n')
    summary = report.to_dict()
    summary['p_baseline'] = result.p_baseline
    summary['final_loss'] = result.trace[-1] if result.trace else None
    write_json(json_path, summary)
    return [csv_path, json_path]
