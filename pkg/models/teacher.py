"""
Вероятностный учитель: источник мягких меток для дистилляции.

Два варианта:
- oracle: истинная вероятность генератора с гауссовым шумом в пространстве логитов;
- trained: небольшая сеть прямого распространения со стохастическими весами,
  обученная по ELBO теми же средствами, что и студент.
"""
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import special

from cohort.encoding import encode_multihot
from cohort.generator import BASELINE_MEAN, GroundTruth, PatientRecord
from engine.diffcore import TapeBuilder, evaluate, value_and_gradient
from engine.optim import Adam, clip_by_global_norm
from models.checkpoint import load_checkpoint, save_checkpoint
from models.layers import (
    PRIOR_SD,
    VariationalParameter,
    build_log_probs,
    build_mean_field_kl,
    build_sample,
    build_soft_cross_entropy,
)
from utils.errors import ConfigError, TapeOverflowError, TeacherError, TrainingError
from utils.utils import rng_for, tr

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 30
P_CLIP = 1e-12


@dataclass(frozen=True)
class PredictiveDistribution:
    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if arr.size < 1:
            raise ValueError(tr("Распределение должно содержать хотя бы один отсчёт"))
        if not np.all((arr >= 0.0) & (arr <= 1.0)):
            raise ValueError(tr("Отсчёты вероятности вне [0, 1]"))
        arr.setflags(write=False)
        object.__setattr__(self, 'samples', arr)

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples))

    def __len__(self) -> int:
        return int(self.samples.size)


class TeacherVariant(str, Enum):
    ORACLE = 'oracle'
    TRAINED = 'trained'


@dataclass
class TeacherConfig:
    variant: str = 'oracle'
    noise_sd: float = 0.3
    n_samples: int = DEFAULT_SAMPLES
    hidden: int = 16
    learning_rate: float = 1e-2
    batch_size: int = 256
    max_epochs: int = 30
    patience: int = 3
    prior_sd: float = PRIOR_SD
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in [v.value for v in TeacherVariant]:
            raise ConfigError('variant', tr("ожидается oracle или trained"))
        if self.noise_sd < 0:
            raise ConfigError('noise_sd', tr("должно быть >= 0"))
        if self.n_samples < 1:
            raise ConfigError('n_samples', tr("должно быть >= 1"))
        if self.hidden < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError('hidden', tr("размеры и число эпох должны быть >= 1"))
        if not self.learning_rate > 0:
            raise ConfigError('learning_rate', tr("должно быть > 0"))


@dataclass
class Teacher:
    """
    :param variant: oracle или trained.
    :param noise_sd: Шум логита для oracle.
    :param truth: Заложенная истина (только oracle).
    :param params: Параметры сети (только trained).
    """
    variant: TeacherVariant
    noise_sd: float = 0.0
    truth: Optional[GroundTruth] = None
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    vocab_size: int = 0
    hidden: int = 0

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ConfigError('noise_sd', tr("должно быть >= 0"))


def oracle_teacher(truth: GroundTruth, noise_sd: float = 0.0) -> Teacher:
    return Teacher(TeacherVariant.ORACLE, noise_sd=noise_sd, truth=truth, vocab_size=len(truth.vocabulary))


W1 = VariationalParameter('teacher.W1')
W2 = VariationalParameter('teacher.W2')


def teacher_features(records: Sequence[PatientRecord], vocab_size: int) -> np.ndarray:
    """[multi-hot, (возраст - 57) / 10, 1]."""
    rows = [
        np.concatenate([encode_multihot(r, vocab_size), [(r.baseline_age - BASELINE_MEAN) / 10.0, 1.0]])
        for r in records
    ]
    return np.stack(rows)


def _build_logit(b: TapeBuilder, features: int, w1: int, w2: int, n: int) -> int:
    hidden = b.tanh(b.matmul(features, w1))
    hidden = b.concatenate([hidden, b.constant(np.ones((n, 1)))], axis=1)
    return b.matmul(hidden, w2)


def _draw(teacher: Teacher, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return {
        'w1': W1.sample(teacher.params, rng.standard_normal(teacher.params[W1.mean].shape)),
        'w2': W2.sample(teacher.params, rng.standard_normal(teacher.params[W2.mean].shape)),
    }


def _trained_probabilities(teacher: Teacher, records: Sequence[PatientRecord], n_samples: int, seed: int) -> np.ndarray:
    features = teacher_features(records, teacher.vocab_size)
    n = len(records)
    out = np.empty((n, n_samples))
    for s in range(n_samples):
        weights = _draw(teacher, rng_for(seed, 'teacher-weights', s))
        b = TapeBuilder()
        logit = _build_logit(b, b.constant(features), b.constant(weights['w1']), b.constant(weights['w2']), n)
        b.output('p', b.sigmoid(logit))
        out[:, s] = evaluate(b.build(), {})['p'][:, 0]
    return out


def _oracle_probabilities(teacher: Teacher, records: Sequence[PatientRecord], n_samples: int, seed: int) -> np.ndarray:
    if teacher.truth is None:
        raise TeacherError(tr("Оракул-учитель создан без заложенной истины"))
    out = np.empty((len(records), n_samples))
    for row, record in enumerate(records):
        if record.patient_id not in teacher.truth.true_probability:
            raise TeacherError(
                tr("Пациент {pid} не принадлежит когорте с заложенной истиной").format(pid=record.patient_id)
            )
        p = teacher.truth.true_probability[record.patient_id]
        if teacher.noise_sd == 0.0:
            out[row] = p
            continue
        logit = special.logit(np.clip(p, P_CLIP, 1.0 - P_CLIP))
        jitter = rng_for(seed, 'teacher', record.patient_id).standard_normal(n_samples)
        out[row] = special.expit(logit + teacher.noise_sd * jitter)
    return out


def teacher_predict_batch(teacher: Teacher, records: Sequence[PatientRecord], n_samples: int, seed: int) -> np.ndarray:
    """
    Отсчёты предсказательного распределения для списка пациентов.

    Отсчёты пациента не зависят от состава списка.

    :return: Матрица N x n_samples.
    """
    if n_samples < 1:
        raise ValueError(tr("n_samples должно быть >= 1"))
    if teacher.variant == TeacherVariant.ORACLE:
        return _oracle_probabilities(teacher, records, n_samples, seed)
    return _trained_probabilities(teacher, records, n_samples, seed)


def teacher_predict(teacher: Teacher, record: PatientRecord, n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> PredictiveDistribution:
    """
    Предсказательное распределение учителя для одного пациента.

    :raises TeacherError: Оракул без истины для этого пациента.
    """
    return PredictiveDistribution(teacher_predict_batch(teacher, [record], n_samples, seed)[0])


def _objective(teacher: Teacher, features: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
               kl_scale: float, prior_sd: float):
    n = features.shape[0]
    b = TapeBuilder()
    nodes = {name: b.input(name) for name in teacher.params}
    w1 = build_sample(b, nodes[W1.mean], nodes[W1.log_sd], rng.standard_normal(teacher.params[W1.mean].shape))
    w2 = build_sample(b, nodes[W2.mean], nodes[W2.log_sd], rng.standard_normal(teacher.params[W2.mean].shape))
    logit = _build_logit(b, b.constant(features), w1, w2, n)
    log_p, log_q = build_log_probs(b, logit, n)
    nll = build_soft_cross_entropy(b, log_p, log_q, labels)
    kl = b.add(
        build_mean_field_kl(b, nodes[W1.mean], nodes[W1.log_sd], teacher.params[W1.mean].size, prior_sd),
        build_mean_field_kl(b, nodes[W2.mean], nodes[W2.log_sd], teacher.params[W2.mean].size, prior_sd),
    )
    b.output('loss', b.add(nll, b.scale(kl, kl_scale)))
    return b.build()


def train_reference_teacher(
    train: Sequence[PatientRecord],
    config: TeacherConfig,
    vocab_size: int,
    tune: Optional[Sequence[PatientRecord]] = None,
) -> Teacher:
    """
    Обучает стохастическую сеть на multi-hot и базовом возрасте.

    :param train: Обучающая выборка (непустая).
    :param config: Параметры учителя.
    :param vocab_size: Размер словаря.
    :param tune: Выборка для ранней остановки; по умолчанию train.
    :return: Teacher(trained).
    :raises TrainingError: Пустая выборка или неконечная функция потерь.
    """
    config.validate()
    if not train:
        raise TrainingError(tr("Пустая обучающая выборка учителя"))
    tune = list(tune) if tune else list(train)

    init_rng = rng_for(config.seed, 'teacher-init')
    teacher = Teacher(TeacherVariant.TRAINED, vocab_size=vocab_size, hidden=config.hidden)
    W1.init(teacher.params, init_rng.normal(0.0, 0.1, size=(vocab_size + 2, config.hidden)))
    W2.init(teacher.params, init_rng.normal(0.0, 0.1, size=(config.hidden + 1, 1)))

    features = teacher_features(train, vocab_size)
    labels = np.array([r.label for r in train], dtype=np.float64)
    tune_features = teacher_features(tune, vocab_size)
    tune_labels = np.array([r.label for r in tune], dtype=np.float64)
    kl_scale = 1.0 / len(train)
    optimizer = Adam(teacher.params, lr=config.learning_rate)

    best_loss = np.inf
    best_params = {k: v.copy() for k, v in teacher.params.items()}
    last_finite_epoch = -1
    wait = 0
    for epoch in range(config.max_epochs):
        order = rng_for(config.seed, 'teacher-shuffle', epoch).permutation(len(train))
        for step, start in enumerate(range(0, len(train), config.batch_size)):
            idx = order[start:start + config.batch_size]
            tape = _objective(teacher, features[idx], labels[idx], rng_for(config.seed, 'teacher-noise', epoch, step),
                              kl_scale, config.prior_sd)
            try:
                _, grads = value_and_gradient(tape, teacher.params, 'loss')
            except TapeOverflowError as e:
                raise TrainingError(
                    tr("Потери учителя стали неконечными; последняя конечная эпоха {epoch}").format(epoch=last_finite_epoch),
                    history={'last_finite_epoch': last_finite_epoch},
                ) from e
            optimizer.step(clip_by_global_norm(grads, 5.0))

        tape = _objective(teacher, tune_features, tune_labels, rng_for(config.seed, 'teacher-tune'), kl_scale, config.prior_sd)
        try:
            tune_loss = float(evaluate(tape, teacher.params)['loss'])
        except TapeOverflowError as e:
            raise TrainingError(
                tr("Потери учителя стали неконечными; последняя конечная эпоха {epoch}").format(epoch=last_finite_epoch),
                history={'last_finite_epoch': last_finite_epoch},
            ) from e
        last_finite_epoch = epoch
        logger.info(tr("Учитель, эпоха {epoch}: потери на tune {loss:.5f}").format(epoch=epoch, loss=tune_loss))
        if tune_loss < best_loss:
            best_loss = tune_loss
            best_params = {k: v.copy() for k, v in teacher.params.items()}
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                break

    teacher.params = best_params
    return teacher


def teacher_soft_labels(teacher: Teacher, records: Sequence[PatientRecord], mode: str, n_samples: int, *seed_keys) -> np.ndarray:
    """
    Мягкие метки для шага дистилляции.

    :param mode: 'sample': один отсчёт учителя, 'mean': среднее по n_samples.
    """
    seed = int(rng_for(*seed_keys).integers(0, 2 ** 31 - 1))
    if mode == 'mean':
        return teacher_predict_batch(teacher, records, n_samples, seed).mean(axis=1)
    return teacher_predict_batch(teacher, records, 1, seed)[:, 0]


def save_teacher(path: str, teacher: Teacher, config: TeacherConfig, config_hash: str) -> str:
    arch = {'variant': teacher.variant.value, 'noise_sd': teacher.noise_sd,
            'vocab_size': teacher.vocab_size, 'hidden': teacher.hidden, 'config': asdict(config)}
    return save_checkpoint(path, 'teacher', teacher.params, arch, config_hash)


def load_teacher(path: str, config_hash: Optional[str] = None, truth: Optional[GroundTruth] = None) -> Teacher:
    """
    :param truth: Истина для оракула (в контрольной точке не хранится).
    """
    payload = load_checkpoint(path, 'teacher', config_hash)
    arch = payload['arch']
    variant = TeacherVariant(arch['variant'])
    if variant == TeacherVariant.ORACLE and truth is None:
        raise TeacherError(tr("Для оракула нужна заложенная истина"))
    return Teacher(
        variant=variant,
        noise_sd=float(arch['noise_sd']),
        truth=truth if variant == TeacherVariant.ORACLE else None,
        params=payload['params'],
        vocab_size=int(arch['vocab_size']),
        hidden=int(arch['hidden']),
    )
