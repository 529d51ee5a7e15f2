"""
Байесовский студент: стохастические эмбеддинги -> BiLSTM -> контекстная
переменная; стохастическая линейная голова над multi-hot -> аддитивная
переменная; разреженный вариационный ГП-классификатор над парой.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from cohort.encoding import DEFAULT_MAX_LEN, EncodedBatch, SequenceEncoding, encode_batch
from cohort.generator import N_AGES, PatientRecord, records_in
from engine.diffcore import TapeBuilder, Tape, evaluate, value_and_gradient
from engine.optim import Adam, clip_by_global_norm
from models.checkpoint import load_checkpoint, save_checkpoint
from models.layers import (
    DEGENERATE_LOG_SD,
    GP_PARAMS,
    PRIOR_SD,
    PROB_FLOOR,
    VariationalParameter,
    build_bilstm_readout,
    build_gp_kl,
    build_gp_marginal,
    build_gp_sample,
    build_log_probs,
    build_mean_field_kl,
    build_sample,
    build_soft_cross_entropy,
    gp_kl_value,
    init_gp,
    init_lstm,
    step_masks,
)
from models.teacher import PredictiveDistribution, Teacher, teacher_soft_labels
from utils.errors import CohortError, ConfigError, MetricError, TapeOverflowError, TrainingError
from utils.utils import rng_for, tr

logger = logging.getLogger(__name__)

CODE_EMBEDDING = VariationalParameter('code_emb')
AGE_EMBEDDING = VariationalParameter('age_emb')
ADDITIVE_HEAD = VariationalParameter('additive')
STOCHASTIC = (CODE_EMBEDDING, AGE_EMBEDDING, ADDITIVE_HEAD)

PREDICT_ROWS = 512
SOFT_LABEL_MODES = ('sample', 'mean')


@dataclass
class StudentArch:
    vocab_size: int
    d: int = 32
    h: int = 32
    m: int = 20
    max_len: int = DEFAULT_MAX_LEN
    prior_sd: float = PRIOR_SD

    def validate(self) -> None:
        for key in ('vocab_size', 'd', 'h', 'm', 'max_len'):
            if getattr(self, key) < 1:
                raise ConfigError(key, tr("должно быть >= 1"))
        if not self.prior_sd > 0:
            raise ConfigError('prior_sd', tr("должно быть > 0"))


@dataclass
class TrainConfig:
    alpha: float = 0.5
    learning_rate: float = 7e-4
    batch_size: int = 256
    patience: int = 5
    kl_scale: Optional[float] = None
    n_train_samples: int = 1
    seed: int = 0
    max_epochs: int = 20
    clip_norm: float = 5.0
    soft_label: str = 'sample'
    teacher_samples: int = 30
    canonicalize: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError('alpha', tr("должно лежать в [0, 1], получено {value}").format(value=self.alpha))
        if not self.learning_rate > 0:
            raise ConfigError('learning_rate', tr("должно быть > 0"))
        if self.batch_size < 1:
            raise ConfigError('batch_size', tr("должно быть >= 1"))
        if self.patience < 1:
            raise ConfigError('patience', tr("должно быть >= 1"))
        if self.kl_scale is not None and self.kl_scale < 0:
            raise ConfigError('kl_scale', tr("должно быть >= 0"))
        if self.n_train_samples < 1 or self.max_epochs < 1 or self.teacher_samples < 1:
            raise ConfigError('n_train_samples', tr("должно быть >= 1"))
        if self.soft_label not in SOFT_LABEL_MODES:
            raise ConfigError('soft_label', tr("ожидается sample или mean"))


@dataclass(frozen=True)
class LatentPair:
    contextual: float
    additive: float

    def __post_init__(self):
        if not (math.isfinite(self.contextual) and math.isfinite(self.additive)):
            raise ValueError(tr("Латентные переменные должны быть конечными"))


@dataclass
class TrainingHistory:
    elbo_loss: List[float] = field(default_factory=list)
    distill_loss: List[float] = field(default_factory=list)
    total_loss: List[float] = field(default_factory=list)
    tune_loss: List[float] = field(default_factory=list)
    tune_auroc: List[Optional[float]] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.total_loss)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class StudentModel:
    """
    Параметры студента в плоском словаре имя -> массив.

    Стохастические тензоры хранятся парами <имя>.mean / <имя>.log_sd.
    """

    code_embedding = CODE_EMBEDDING
    age_embedding = AGE_EMBEDDING
    additive_head = ADDITIVE_HEAD

    def __init__(self, arch: StudentArch, params: Dict[str, np.ndarray], orientation: Optional[Dict[str, Any]] = None):
        self.arch = arch
        self.params = params
        self.orientation = dict(orientation or {})

    def copy(self) -> 'StudentModel':
        return StudentModel(self.arch, {k: v.copy() for k, v in self.params.items()}, self.orientation)

    @property
    def parameter_names(self) -> List[str]:
        return sorted(self.params)

    def set_posterior_sd(self, sd: float) -> None:
        """Задаёт одинаковое стандартное отклонение всем стохастическим тензорам; sd = 0 даёт вырожденное распределение."""
        log_sd = DEGENERATE_LOG_SD if sd == 0 else np.log(sd)
        for vp in STOCHASTIC:
            self.params[vp.log_sd] = np.full_like(self.params[vp.log_sd], log_sd)


def init_student(arch: StudentArch, seed: int = 0) -> StudentModel:
    """
    Начальные параметры студента.

    Средние эмбеддингов ~ N(0, 0.1^2), средние коэффициентов ~ N(0, 0.01^2),
    log_sd = log(0.05), индуцирующие точки на сетке в [-3, 3]^2.
    """
    arch.validate()
    rng = rng_for(seed, 'student-init')
    params: Dict[str, np.ndarray] = {}
    CODE_EMBEDDING.init(params, rng.normal(0.0, 0.1, size=(arch.vocab_size, arch.d)))
    AGE_EMBEDDING.init(params, rng.normal(0.0, 0.1, size=(N_AGES, arch.d)))
    init_lstm(params, rng, arch.d, arch.h)
    bound = 1.0 / np.sqrt(2 * arch.h)
    params['readout.W'] = rng.uniform(-bound, bound, size=(2 * arch.h + 1, 1))
    params['readout.W'][-1, 0] = 0.0
    ADDITIVE_HEAD.init(params, rng.normal(0.0, 0.01, size=(arch.vocab_size, 1)))
    init_gp(params, arch.m)
    return StudentModel(arch, params)


# --- Отсчёты весов ---

def draw_noise(model: StudentModel, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Стандартный нормальный шум для всех стохастических тензоров (в фиксированном порядке)."""
    return {vp.name: rng.standard_normal(model.params[vp.mean].shape) for vp in STOCHASTIC}


def sample_weights(model: StudentModel, noise: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {vp.name: vp.sample(model.params, noise[vp.name]) for vp in STOCHASTIC}


def weight_draw(model: StudentModel, seed: int, index: int) -> Dict[str, np.ndarray]:
    """Реализация весов номер index из потока (seed, 'weights', index)."""
    return sample_weights(model, draw_noise(model, rng_for(seed, 'weights', index)))


def gp_noise(seed: int, patient_id: int, n_samples: int) -> np.ndarray:
    return rng_for(seed, 'gp', patient_id).standard_normal(n_samples)


def chunk_size(n_samples: int) -> int:
    """Число пациентов в одном вычислении, чтобы строк (пациенты x отсчёты) было не больше PREDICT_ROWS."""
    return max(1, PREDICT_ROWS // max(1, n_samples))


# --- Латентные переменные ---

def _latent_tape(model: StudentModel, steps_x: List[np.ndarray], mask: np.ndarray) -> Tape:
    arch = model.arch
    b = TapeBuilder()
    nodes = {name: b.constant(model.params[name]) for name in model.params if name.startswith(('lstm.', 'readout.'))}
    steps = [b.constant(x) for x in steps_x]
    rows = mask.shape[0]
    contextual = build_bilstm_readout(b, steps, step_masks(mask, arch.h), nodes, rows, arch.h)
    b.output('contextual', contextual)
    return b.build()


def latent_rows(
    model: StudentModel,
    codes: np.ndarray,
    ages: np.ndarray,
    mask: np.ndarray,
    multihot: np.ndarray,
    draws: Sequence[Mapping[str, np.ndarray]],
    step_scale: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Латентные пары для пакета пациентов при нескольких реализациях весов.

    :param codes: B x T коды, ages: B x T, mask: B x T.
    :param multihot: B x V (может быть «мягким»).
    :param draws: Реализации весов.
    :param step_scale: B x T множители эмбеддингов шагов (маска важности).
    :return: (контекстная, аддитивная), обе S x B.
    """
    n_draws = len(draws)
    batch, width = codes.shape
    steps_x = []
    for t in range(width):
        rows = []
        for draw in draws:
            x = draw[CODE_EMBEDDING.name][codes[:, t]] + draw[AGE_EMBEDDING.name][ages[:, t]]
            if step_scale is not None:
                x = x * step_scale[:, t:t + 1]
            rows.append(x)
        steps_x.append(np.concatenate(rows, axis=0))
    tiled_mask = np.tile(mask, (n_draws, 1))
    contextual = evaluate(_latent_tape(model, steps_x, tiled_mask), {})['contextual'].reshape(n_draws, batch)
    additive = np.stack([(multihot @ draw[ADDITIVE_HEAD.name])[:, 0] for draw in draws])
    return contextual, additive


def forward_latent(model: StudentModel, sequence: SequenceEncoding, multihot: np.ndarray, sample_seed: int) -> LatentPair:
    """
    Одна реализация весов -> (контекстная, аддитивная) для одного пациента.

    :raises CohortError: Пустая последовательность.
    """
    if len(sequence) == 0:
        raise CohortError(tr("Пустая последовательность"))
    codes = np.array([sequence.code_ids], dtype=np.int64)
    ages = np.array([sequence.age_ids], dtype=np.int64)
    mask = np.ones_like(codes, dtype=np.float64)
    draw = weight_draw(model, sample_seed, 0)
    contextual, additive = latent_rows(model, codes, ages, mask, np.asarray(multihot, dtype=np.float64)[None, :], [draw])
    return LatentPair(float(contextual[0, 0]), float(additive[0, 0]))


def latent_samples(
    model: StudentModel,
    records: Sequence[PatientRecord],
    n_samples: int,
    seed: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Латентные пары всех пациентов при n_samples реализациях весов.

    :return: (контекстная, аддитивная), обе N x S.
    """
    draws = [weight_draw(model, seed, s) for s in range(n_samples)]
    ctx_parts, add_parts = [], []
    step = chunk_size(n_samples)
    for start in range(0, len(records), step):
        batch = encode_batch(records[start:start + step], model.arch.vocab_size, model.arch.max_len)
        contextual, additive = latent_rows(model, batch.codes, batch.ages, batch.mask, batch.multihot, draws)
        ctx_parts.append(contextual.T)
        add_parts.append(additive.T)
    if not ctx_parts:
        return np.zeros((0, n_samples)), np.zeros((0, n_samples))
    return np.concatenate(ctx_parts), np.concatenate(add_parts)


# --- ГП ---

def gp_marginal(model: StudentModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Среднее и дисперсия q(f) в точках N x 2."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    b = TapeBuilder()
    nodes = {name: b.constant(model.params[name]) for name in GP_PARAMS}
    mean, var = build_gp_marginal(b, b.constant(points), points.shape[0], nodes, model.arch.m)
    b.output('mean', mean)
    b.output('var', var)
    out = evaluate(b.build(), {})
    return out['mean'][:, 0], out['var'][:, 0]


def gp_predict(model: StudentModel, latent: LatentPair, n_samples: int = 30, seed: int = 0) -> PredictiveDistribution:
    """
    Отсчёты sigmoid(f) для f ~ q(f(x)) в точке x = (контекстная, аддитивная).
    """
    if n_samples < 1:
        raise ValueError(tr("n_samples должно быть >= 1"))
    if not (math.isfinite(latent.contextual) and math.isfinite(latent.additive)):
        raise ValueError(tr("Латентные переменные должны быть конечными"))
    mean, var = gp_marginal(model, np.array([[latent.contextual, latent.additive]]))
    eps = rng_for(seed, 'gp-predict').standard_normal(n_samples)
    return PredictiveDistribution(special.expit(mean[0] + np.sqrt(var[0]) * eps))


def predict_matrix(
    model: StudentModel,
    records: Sequence[PatientRecord],
    n_samples: int,
    seed: int,
    step_scales: Optional[Sequence[np.ndarray]] = None,
    multihot_override: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Матрица вероятностей N x S.

    Отсчёт s использует реализацию весов (seed, 'weights', s), общую для всех
    пациентов, и шум ГП из потока (seed, 'gp', patient_id).

    :param step_scales: Для каждого пациента вектор множителей шагов (после сортировки и усечения).
    :param multihot_override: N x V заменитель multi-hot.
    """
    draws = [weight_draw(model, seed, s) for s in range(n_samples)]
    out = np.empty((len(records), n_samples))
    step = chunk_size(n_samples)
    for start in range(0, len(records), step):
        chunk = list(records[start:start + step])
        batch = encode_batch(chunk, model.arch.vocab_size, model.arch.max_len)
        scale = None
        if step_scales is not None:
            scale = np.zeros(batch.codes.shape)
            for row, values in enumerate(step_scales[start:start + len(chunk)]):
                values = np.asarray(values, dtype=np.float64)
                if values.size != batch.lengths[row]:
                    raise ValueError(tr("Число множителей не совпадает с числом записей"))
                scale[row, :values.size] = values
        multihot = batch.multihot if multihot_override is None else np.asarray(multihot_override[start:start + len(chunk)])
        contextual, additive = latent_rows(model, batch.codes, batch.ages, batch.mask, multihot, draws, scale)
        mean, var = gp_marginal(model, np.stack([contextual.reshape(-1), additive.reshape(-1)], axis=1))
        mean = mean.reshape(n_samples, len(chunk))
        sd = np.sqrt(var).reshape(n_samples, len(chunk))
        eps = np.stack([gp_noise(seed, r.patient_id, n_samples) for r in chunk], axis=1)
        out[start:start + len(chunk)] = special.expit(mean + sd * eps).T
    return out


def predict_distributions(model: StudentModel, records: Sequence[PatientRecord], n_samples: int = 30, seed: int = 0) -> List[PredictiveDistribution]:
    return [PredictiveDistribution(row) for row in predict_matrix(model, records, n_samples, seed)]


# --- Функции потерь ---

def distill_loss(teacher_prob: float, student_prob: float) -> float:
    """
    Перекрёстная энтропия с мягкой меткой: -[p log s + (1 - p) log(1 - s)].

    Обе вероятности ограничиваются отрезком [1e-7, 1 - 1e-7].
    """
    p = float(np.clip(teacher_prob, PROB_FLOOR, 1.0 - PROB_FLOOR))
    s = float(np.clip(student_prob, PROB_FLOOR, 1.0 - PROB_FLOOR))
    return -(p * math.log(s) + (1.0 - p) * math.log(1.0 - s))


def total_loss(elbo: float, distill: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError('alpha', tr("должно лежать в [0, 1], получено {value}").format(value=alpha))
    return alpha * elbo + (1.0 - alpha) * distill


def build_objective(
    model: StudentModel,
    batch: EncodedBatch,
    noises: Sequence[Mapping[str, np.ndarray]],
    gp_eps: Sequence[np.ndarray],
    kl_scale: float,
    soft_labels: Optional[np.ndarray] = None,
    alpha: float = 1.0,
) -> Tape:
    """
    Лента целевой функции на пакете.

    Входы: все параметры модели по именам. Выходы: total, elbo, nll,
    distill (если заданы мягкие метки), kl_weights, kl_gp, prob_mean.

    :param noises: Шум весов для каждой из реализаций в шаге.
    :param gp_eps: B x 1 шум ГП для каждой реализации.
    """
    arch = model.arch
    n = batch.size
    b = TapeBuilder()
    nodes = {name: b.input(name) for name in model.params}
    masks = step_masks(batch.mask, arch.h)
    multihot = b.constant(batch.multihot)

    nll_terms, distill_terms, prob_means = [], [], []
    for noise, eps in zip(noises, gp_eps):
        tables = {vp.name: build_sample(b, nodes[vp.mean], nodes[vp.log_sd], noise[vp.name]) for vp in STOCHASTIC}
        steps = [
            b.add(
                b.gather_rows(tables[CODE_EMBEDDING.name], batch.codes[:, t]),
                b.gather_rows(tables[AGE_EMBEDDING.name], batch.ages[:, t]),
            )
            for t in range(batch.max_len)
        ]
        contextual = build_bilstm_readout(b, steps, masks, nodes, n, arch.h)
        additive = b.matmul(multihot, tables[ADDITIVE_HEAD.name])
        latent = b.concatenate([contextual, additive], axis=1)
        mean, var = build_gp_marginal(b, latent, n, nodes, arch.m)
        f = build_gp_sample(b, mean, var, eps)
        log_p, log_q = build_log_probs(b, f, n)
        nll_terms.append(build_soft_cross_entropy(b, log_p, log_q, batch.labels))
        if soft_labels is not None:
            distill_terms.append(build_soft_cross_entropy(b, log_p, log_q, soft_labels))
        prob_means.append(b.sigmoid(mean))

    def average(terms: List[int]) -> int:
        acc = terms[0]
        for term in terms[1:]:
            acc = b.add(acc, term)
        return acc if len(terms) == 1 else b.scale(acc, 1.0 / len(terms))

    nll = average(nll_terms)
    kl_weights = None
    for vp in STOCHASTIC:
        term = build_mean_field_kl(b, nodes[vp.mean], nodes[vp.log_sd], model.params[vp.mean].size, arch.prior_sd)
        kl_weights = term if kl_weights is None else b.add(kl_weights, term)
    kl_gp = build_gp_kl(b, nodes, arch.m)
    elbo = b.add(nll, b.scale(b.add(kl_weights, kl_gp), kl_scale))

    b.output('nll', nll)
    b.output('kl_weights', kl_weights)
    b.output('kl_gp', kl_gp)
    b.output('elbo', elbo)
    b.output('prob_mean', average(prob_means))
    if soft_labels is not None:
        distill = average(distill_terms)
        b.output('distill', distill)
        b.output('total', b.add(b.scale(elbo, alpha), b.scale(distill, 1.0 - alpha)))
    else:
        b.output('total', elbo)
    return b.build()


def elbo_loss(
    model: StudentModel,
    batch: EncodedBatch,
    labels: Optional[np.ndarray] = None,
    kl_scale: float = 1.0,
    seed: int = 0,
) -> Tuple[float, Dict[str, float]]:
    """
    ELBO на пакете при одной реализации весов.

    :return: (потери, компоненты nll / kl_weights / kl_gp).
    :raises TrainingError: Неконечное значение.
    """
    if batch.size == 0:
        raise TrainingError(tr("Пустой пакет"))
    if labels is not None:
        batch = replace(batch, labels=np.asarray(labels, dtype=np.float64).reshape(-1))
    rng = rng_for(seed, 'elbo')
    noise = draw_noise(model, rng)
    eps = rng.standard_normal((batch.size, 1))
    try:
        out = evaluate(build_objective(model, batch, [noise], [eps], kl_scale), model.params)
    except TapeOverflowError as e:
        raise TrainingError(tr("Неконечное значение ELBO: {error}").format(error=e)) from e
    components = {key: float(out[key]) for key in ('nll', 'kl_weights', 'kl_gp')}
    return float(out['elbo']), components


def weight_kl(model: StudentModel) -> float:
    return sum(vp.kl(model.params, model.arch.prior_sd) for vp in STOCHASTIC)


def gp_kl(model: StudentModel) -> float:
    return gp_kl_value(model.params)


# --- Обучение ---

def _batches(records: Sequence[PatientRecord], size: int) -> List[List[PatientRecord]]:
    return [list(records[i:i + size]) for i in range(0, len(records), size)]


def _safe_auroc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    from analysis.metrics import auroc
    try:
        return auroc(scores, labels)
    except MetricError:
        return None


def train_student(
    model: StudentModel,
    records: Sequence[PatientRecord],
    teacher: Optional[Teacher] = None,
    config: Optional[TrainConfig] = None,
) -> Tuple[StudentModel, TrainingHistory]:
    """
    Обучение Adam с ранней остановкой по потерям на tune.

    Без учителя обучается BDL (alpha = 1). При alpha = 1 путь дистилляции
    не вычисляется вовсе, поэтому история совпадает с BDL при равных зёрнах.

    :param model: Начальная модель (не изменяется).
    :param records: Когорта с разметкой выборок.
    :param teacher: Учитель для BDLD.
    :param config: Параметры обучения.
    :return: (модель лучшей эпохи, история).
    :raises TrainingError: Пустая выборка или неконечные потери (история прикладывается).
    """
    config = config or TrainConfig()
    config.validate()
    train = records_in(records, 'train')
    tune = records_in(records, 'tune')
    if not train or not tune:
        raise TrainingError(tr("Пустая выборка train или tune"))

    arch = model.arch
    model = model.copy()
    alpha = config.alpha if teacher is not None else 1.0
    use_distill = teacher is not None and alpha < 1.0
    kl_scale = config.kl_scale if config.kl_scale is not None else 1.0 / len(train)
    optimizer = Adam(model.params, lr=config.learning_rate)
    history = TrainingHistory()
    seed = config.seed

    tune_batches = [encode_batch(chunk, arch.vocab_size, arch.max_len) for chunk in _batches(tune, config.batch_size)]
    tune_soft = None
    if use_distill:
        tune_soft = [
            teacher_soft_labels(teacher, chunk, config.soft_label, config.teacher_samples, seed, 'tune-soft', k)
            for k, chunk in enumerate(_batches(tune, config.batch_size))
        ]
    tune_labels = np.concatenate([tb.labels for tb in tune_batches])

    best_loss = np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    wait = 0
    logger.info(tr("Обучение студента: {mode}, alpha={alpha}, train={n}").format(
        mode='BDLD' if use_distill else 'BDL', alpha=alpha, n=len(train)))

    for epoch in range(config.max_epochs):
        order = rng_for(seed, 'shuffle', epoch).permutation(len(train))
        sums = {'elbo': 0.0, 'distill': 0.0, 'total': 0.0}
        seen = 0
        for step, start in enumerate(range(0, len(train), config.batch_size)):
            chunk = [train[i] for i in order[start:start + config.batch_size]]
            batch = encode_batch(chunk, arch.vocab_size, arch.max_len)
            noises = [draw_noise(model, rng_for(seed, 'noise', epoch, step, k)) for k in range(config.n_train_samples)]
            eps = [rng_for(seed, 'gp-noise', epoch, step, k).standard_normal((batch.size, 1)) for k in range(config.n_train_samples)]
            soft = None
            if use_distill:
                soft = teacher_soft_labels(teacher, chunk, config.soft_label, config.teacher_samples, seed, 'soft', epoch, step)
            tape = build_objective(model, batch, noises, eps, kl_scale, soft, alpha)
            try:
                out, grads = value_and_gradient(tape, model.params, 'total')
            except TapeOverflowError as e:
                raise TrainingError(
                    tr("Неконечные потери на эпохе {epoch}, шаг {step}: {error}").format(epoch=epoch, step=step, error=e),
                    history,
                ) from e
            optimizer.step(clip_by_global_norm(grads, config.clip_norm))
            sums['elbo'] += float(out['elbo']) * batch.size
            sums['distill'] += float(out['distill']) * batch.size if use_distill else 0.0
            sums['total'] += float(out['total']) * batch.size
            seen += batch.size

        tune_total = 0.0
        tune_probs = []
        for k, tb in enumerate(tune_batches):
            rng = rng_for(seed, 'tune', k)
            noise = draw_noise(model, rng)
            tape = build_objective(model, tb, [noise], [rng.standard_normal((tb.size, 1))], kl_scale,
                                   tune_soft[k] if use_distill else None, alpha)
            try:
                out = evaluate(tape, model.params)
            except TapeOverflowError as e:
                raise TrainingError(tr("Неконечные потери на tune: {error}").format(error=e), history) from e
            tune_total += float(out['total']) * tb.size
            tune_probs.append(out['prob_mean'][:, 0])
        tune_total /= len(tune)

        history.elbo_loss.append(sums['elbo'] / seen)
        history.distill_loss.append(sums['distill'] / seen)
        history.total_loss.append(sums['total'] / seen)
        history.tune_loss.append(tune_total)
        history.tune_auroc.append(_safe_auroc(np.concatenate(tune_probs), tune_labels))
        logger.info(tr("Эпоха {epoch}: total={total:.5f} elbo={elbo:.5f} distill={distill:.5f} tune={tune:.5f} auroc={auroc}").format(
            epoch=epoch, total=history.total_loss[-1], elbo=history.elbo_loss[-1],
            distill=history.distill_loss[-1], tune=tune_total, auroc=history.tune_auroc[-1]))

        if tune_total < best_loss:
            best_loss = tune_total
            best_params = {k: v.copy() for k, v in model.params.items()}
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                logger.info(tr("Ранняя остановка на эпохе {epoch}").format(epoch=epoch))
                break

    model.params = best_params
    if config.canonicalize:
        model = canonicalize_orientation(model, train, seed)
    return model, history


# --- Ориентация латентных осей ---

def _axis_slope(model: StudentModel, points: np.ndarray, axis: int, delta: float) -> float:
    shift = np.zeros(2)
    shift[axis] = delta
    upper, _ = gp_marginal(model, points + shift)
    lower, _ = gp_marginal(model, points - shift)
    return float(np.mean(upper - lower))


def canonicalize_orientation(
    model: StudentModel,
    records: Sequence[PatientRecord],
    seed: int = 0,
    n_draws: int = 3,
    max_points: int = 512,
    margin: float = 1.0,
) -> StudentModel:
    """
    Приводит латентные оси к единой ориентации без изменения распределения предсказаний.

    После преобразования средний риск ГП растёт вдоль обеих осей на
    популяции records, а контекстная переменная на ней отрицательна.
    Отражение оси сопровождается отражением координаты индуцирующих точек,
    сдвиг контекстной оси компенсируется сдвигом точек (ядро RBF стационарно).

    :return: Новая модель; orientation описывает применённые преобразования.
    """
    result = model.copy()
    if not records:
        return result
    stride = max(1, len(records) // max_points)
    sample = list(records[::stride][:max_points])
    contextual, additive = latent_samples(result, sample, n_draws, rng_for(seed, 'orientation').integers(0, 2 ** 31 - 1))
    points = np.stack([contextual.mean(axis=1), additive.mean(axis=1)], axis=1)
    orientation = {'contextual_flipped': False, 'additive_flipped': False, 'contextual_shift': 0.0}

    for axis, key in ((0, 'contextual_flipped'), (1, 'additive_flipped')):
        spread = float(np.std(points[:, axis]))
        delta = 0.1 * spread if spread > 0 else 0.1
        if _axis_slope(result, points, axis, delta) < 0:
            if axis == 0:
                result.params['readout.W'] = -result.params['readout.W']
            else:
                result.params[ADDITIVE_HEAD.mean] = -result.params[ADDITIVE_HEAD.mean]
            result.params['gp.Z'][:, axis] = -result.params['gp.Z'][:, axis]
            points[:, axis] = -points[:, axis]
            orientation[key] = True

    top = float(np.max(points[:, 0]))
    if top >= 0:
        shift = top + margin
        result.params['readout.W'][-1, 0] -= shift
        result.params['gp.Z'][:, 0] -= shift
        orientation['contextual_shift'] = shift

    result.orientation = orientation
    logger.info(tr("Ориентация латентных осей: {orientation}").format(orientation=orientation))
    return result


# --- Коэффициенты ---

def posterior_coefficients(model: StudentModel, n_samples: int = 1000, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Монте-Карло среднее и стандартное отклонение коэффициентов аддитивной головы.

    :return: (средние, отклонения), обе длины V.
    """
    if n_samples < 1:
        raise ValueError(tr("n_samples должно быть >= 1"))
    rng = rng_for(seed, 'coefficients')
    mean = model.params[ADDITIVE_HEAD.mean][:, 0]
    sd = np.exp(model.params[ADDITIVE_HEAD.log_sd][:, 0])
    draws = mean[None, :] + sd[None, :] * rng.standard_normal((n_samples, mean.size))
    spread = draws.std(axis=0, ddof=1) if n_samples > 1 else np.zeros_like(mean)
    return draws.mean(axis=0), spread


# --- Контрольные точки ---

def save_student(
    path: str,
    model: StudentModel,
    config_hash: str,
    optimizer_state: Optional[Mapping[str, Any]] = None,
    history: Optional[TrainingHistory] = None,
) -> str:
    extra = {'orientation': model.orientation}
    if history is not None:
        extra['history'] = history.to_dict()
    return save_checkpoint(path, 'student', model.params, asdict(model.arch), config_hash, optimizer_state, extra)


def load_student(path: str, config_hash: Optional[str] = None) -> StudentModel:
    payload = load_checkpoint(path, 'student', config_hash)
    arch = StudentArch(**payload['arch'])
    return StudentModel(arch, payload['params'], payload.get('extra', {}).get('orientation'))
