"""
Строительные блоки студента поверх ленты diffcore.

Все функции build_* принимают номера узлов параметров, поэтому одна и та
же реализация используется и при обучении (параметры как входы ленты), и при
предсказании (параметры как константы).
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from engine.diffcore import TapeBuilder

logger = logging.getLogger(__name__)

PRIOR_SD = 0.374
INIT_SD = 0.05
DEGENERATE_LOG_SD = -1000.0
PROB_FLOOR = 1e-7
GP_JITTER = 1e-6
VARIANCE_FLOOR = 1e-10
GATES = ('i', 'f', 'g', 'o')


@dataclass(frozen=True)
class VariationalParameter:
    """
    Имена пары (mean, log_sd) в словаре параметров модели.
    """
    name: str

    @property
    def mean(self) -> str:
        return f"{self.name}.mean"

    @property
    def log_sd(self) -> str:
        return f"{self.name}.log_sd"

    def init(self, params: Dict[str, np.ndarray], mean: np.ndarray, init_sd: float = INIT_SD) -> None:
        params[self.mean] = np.asarray(mean, dtype=np.float64)
        params[self.log_sd] = np.full_like(params[self.mean], np.log(init_sd))

    def sample(self, params: Mapping[str, np.ndarray], eps: np.ndarray) -> np.ndarray:
        return params[self.mean] + np.exp(params[self.log_sd]) * eps

    def sd(self, params: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.exp(params[self.log_sd])

    def kl(self, params: Mapping[str, np.ndarray], prior_sd: float = PRIOR_SD) -> float:
        """KL(q || N(0, prior_sd^2)) в замкнутой форме."""
        mean = params[self.mean]
        log_sd = params[self.log_sd]
        value = (np.log(prior_sd) - log_sd + (np.exp(2.0 * log_sd) + mean ** 2) / (2.0 * prior_sd ** 2) - 0.5)
        return float(np.sum(value))


def build_sample(b: TapeBuilder, mean: int, log_sd: int, eps: np.ndarray) -> int:
    """Репараметризация: mean + exp(log_sd) * eps."""
    return b.add(mean, b.multiply(b.exp(log_sd), b.constant(eps)))


def build_mean_field_kl(b: TapeBuilder, mean: int, log_sd: int, size: int, prior_sd: float = PRIOR_SD) -> int:
    """
    Сумма KL(N(mean, sd^2) || N(0, prior_sd^2)) по всем элементам.
    """
    quad = b.reduce_sum(b.add(b.exp(b.scale(log_sd, 2.0)), b.square(mean)))
    value = b.add(b.scale(quad, 1.0 / (2.0 * prior_sd ** 2)), b.negate(b.reduce_sum(log_sd)))
    return b.add(value, b.constant(size * (np.log(prior_sd) - 0.5)))


def lstm_param_names(direction: str) -> List[str]:
    return [f"lstm.{direction}.W_{gate}" for gate in GATES]


def init_lstm(params: Dict[str, np.ndarray], rng: np.random.Generator, d: int, h: int) -> None:
    bound = 1.0 / np.sqrt(h)
    for direction in ('fwd', 'bwd'):
        for name in lstm_param_names(direction):
            params[name] = rng.uniform(-bound, bound, size=(d + h + 1, h))
        # смещение забывания = 1
        params[f"lstm.{direction}.W_f"][-1, :] = 1.0


def build_lstm_pass(
    b: TapeBuilder,
    steps: Sequence[int],
    masks: Sequence[Optional[np.ndarray]],
    weights: Mapping[str, int],
    batch: int,
    hidden: int,
    reverse: bool = False,
) -> int:
    """
    Один проход LSTM по шагам.

    :param steps: Узлы входов B x d по шагам.
    :param masks: Для каждого шага матрица B x h из 0/1 или None, если шаг реален для всех.
    :param weights: Узлы W_i, W_f, W_g, W_o формы (d+h+1) x h.
    :return: Узел последнего скрытого состояния B x h.
    """
    h_state = b.constant(np.zeros((batch, hidden)))
    c_state = b.constant(np.zeros((batch, hidden)))
    ones = b.constant(np.ones((batch, 1)))
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    for t in order:
        z = b.concatenate([steps[t], h_state, ones], axis=1)
        i = b.sigmoid(b.matmul(z, weights['i']))
        f = b.sigmoid(b.matmul(z, weights['f']))
        g = b.tanh(b.matmul(z, weights['g']))
        o = b.sigmoid(b.matmul(z, weights['o']))
        c_new = b.add(b.multiply(f, c_state), b.multiply(i, g))
        h_new = b.multiply(o, b.tanh(c_new))
        mask = masks[t]
        if mask is None:
            c_state, h_state = c_new, h_new
        else:
            keep = b.constant(mask)
            hold = b.constant(1.0 - mask)
            c_state = b.add(b.multiply(keep, c_new), b.multiply(hold, c_state))
            h_state = b.add(b.multiply(keep, h_new), b.multiply(hold, h_state))
    return h_state


def step_masks(mask: np.ndarray, hidden: int) -> List[Optional[np.ndarray]]:
    """B x T маска -> список B x h масок (None для полностью реальных шагов)."""
    result: List[Optional[np.ndarray]] = []
    for t in range(mask.shape[1]):
        column = mask[:, t:t + 1]
        result.append(None if np.all(column == 1.0) else np.repeat(column, hidden, axis=1))
    return result


def build_bilstm_readout(
    b: TapeBuilder,
    steps: Sequence[int],
    masks: Sequence[Optional[np.ndarray]],
    nodes: Mapping[str, int],
    batch: int,
    hidden: int,
) -> int:
    """
    Контекстная переменная: линейное отображение [h_fwd, h_bwd, 1] -> скаляр.

    :return: Узел B x 1.
    """
    fwd = {gate: nodes[f"lstm.fwd.W_{gate}"] for gate in GATES}
    bwd = {gate: nodes[f"lstm.bwd.W_{gate}"] for gate in GATES}
    h_fwd = build_lstm_pass(b, steps, masks, fwd, batch, hidden)
    h_bwd = build_lstm_pass(b, steps, masks, bwd, batch, hidden, reverse=True)
    features = b.concatenate([h_fwd, h_bwd, b.constant(np.ones((batch, 1)))], axis=1)
    return b.matmul(features, nodes['readout.W'])


# --- Разреженный вариационный ГП (отбелённая параметризация) ---

GP_PARAMS = ('gp.Z', 'gp.q_mu', 'gp.q_sqrt', 'gp.log_lengthscale', 'gp.log_variance')


def inducing_grid(m: int, low: float = -3.0, high: float = 3.0) -> np.ndarray:
    """m точек на равномерной сетке в квадрате [low, high]^2."""
    n_x = int(np.ceil(np.sqrt(m)))
    n_y = int(np.ceil(m / n_x))

    def axis(n: int) -> np.ndarray:
        return np.array([0.5 * (low + high)]) if n == 1 else np.linspace(low, high, n)

    grid = np.array([(x, y) for x in axis(n_x) for y in axis(n_y)], dtype=np.float64)
    return grid[:m]


def init_gp(params: Dict[str, np.ndarray], m: int) -> None:
    params['gp.Z'] = inducing_grid(m)
    params['gp.q_mu'] = np.zeros((m, 1))
    params['gp.q_sqrt'] = np.zeros((m, m))
    params['gp.log_lengthscale'] = np.zeros((1, 1))
    params['gp.log_variance'] = np.zeros((1, 1))


def q_sqrt_matrix(raw: np.ndarray) -> np.ndarray:
    """Нижнетреугольный множитель S: строго нижняя часть raw + exp(diag raw)."""
    return np.tril(raw, -1) + np.diag(np.exp(np.diag(raw)))


def _build_sq_dist(b: TapeBuilder, x: int, z: int, n_x: int, n_z: int) -> int:
    xx = b.reduce_sum(b.square(x), axis=1, keepdims=True)
    zz = b.transpose(b.reduce_sum(b.square(z), axis=1, keepdims=True))
    cross = b.scale(b.matmul(x, b.transpose(z)), -2.0)
    rows = b.matmul(xx, b.constant(np.ones((1, n_z))))
    cols = b.matmul(b.constant(np.ones((n_x, 1))), zz)
    return b.add(b.add(rows, cols), cross)


def build_rbf(b: TapeBuilder, x: int, z: int, n_x: int, n_z: int, log_ls: int, log_var: int) -> int:
    """k(x, z) = sigma^2 exp(-|x - z|^2 / (2 l^2)); узел n_x x n_z."""
    dist = _build_sq_dist(b, x, z, n_x, n_z)
    inv_two_l2 = b.scale(b.exp(b.scale(log_ls, -2.0)), 0.5)
    return b.multiply(b.exp(b.negate(b.multiply(dist, inv_two_l2))), b.exp(log_var))


def build_gp_marginal(b: TapeBuilder, x: int, n_x: int, nodes: Mapping[str, int], m: int) -> Tuple[int, int]:
    """
    Маргинальное апостериорное q(f(x)) отбелённого ГП.

    :param x: Узел входов n_x x 2.
    :return: Узлы (среднее, дисперсия), оба n_x x 1.
    """
    z = nodes['gp.Z']
    log_ls = nodes['gp.log_lengthscale']
    log_var = nodes['gp.log_variance']
    k_zz = b.add(build_rbf(b, z, z, m, m, log_ls, log_var), b.constant(GP_JITTER * np.eye(m)))
    k_xz = build_rbf(b, x, z, n_x, m, log_ls, log_var)
    chol = b.cholesky(k_zz)
    a = b.solve_triangular(chol, b.transpose(k_xz))

    mean = b.matmul(b.transpose(a), nodes['gp.q_mu'])

    raw = nodes['gp.q_sqrt']
    s = b.add(
        b.multiply(raw, b.constant(np.tril(np.ones((m, m)), -1))),
        b.multiply(b.exp(raw), b.constant(np.eye(m))),
    )
    explained = b.reshape(b.reduce_sum(b.square(a), axis=0), (n_x, 1))
    retained = b.reshape(b.reduce_sum(b.square(b.matmul(b.transpose(s), a)), axis=0), (n_x, 1))
    prior_var = b.matmul(b.constant(np.ones((n_x, 1))), b.exp(log_var))
    var = b.add(b.subtract(prior_var, explained), retained)
    var = b.maximum(var, b.constant(np.full((n_x, 1), VARIANCE_FLOOR)))
    return mean, var


def build_gp_sample(b: TapeBuilder, mean: int, var: int, eps: np.ndarray) -> int:
    """f = mean + sqrt(var) * eps."""
    sd = b.exp(b.scale(b.log(var), 0.5))
    return b.add(mean, b.multiply(sd, b.constant(eps)))


def build_gp_kl(b: TapeBuilder, nodes: Mapping[str, int], m: int) -> int:
    """KL(N(q_mu, S S^T) || N(0, I)) = 0.5 (tr(S S^T) + q_mu^T q_mu - m - log|S S^T|)."""
    raw = nodes['gp.q_sqrt']
    strict = b.multiply(raw, b.constant(np.tril(np.ones((m, m)), -1)))
    diag_raw = b.multiply(raw, b.constant(np.eye(m)))
    trace = b.add(b.reduce_sum(b.square(strict)), b.reduce_sum(b.exp(b.scale(diag_raw, 2.0))))
    # exp(0) вне диагонали даёт m*(m-1) лишних единиц
    trace = b.add(trace, b.constant(-float(m * (m - 1))))
    total = b.add(trace, b.reduce_sum(b.square(nodes['gp.q_mu'])))
    total = b.add(total, b.scale(b.reduce_sum(diag_raw), -2.0))
    return b.scale(b.add(total, b.constant(-float(m))), 0.5)


def gp_kl_value(params: Mapping[str, np.ndarray]) -> float:
    raw = params['gp.q_sqrt']
    s = q_sqrt_matrix(raw)
    m = raw.shape[0]
    return float(0.5 * (np.sum(s ** 2) + np.sum(params['gp.q_mu'] ** 2) - m - 2.0 * np.sum(np.diag(raw))))


# --- Правдоподобие ---

def build_log_probs(b: TapeBuilder, f: int, n: int) -> Tuple[int, int]:
    """(log p, log(1 - p)) для p = sigmoid(f) с нижней границей 1e-7."""
    floor = b.constant(np.full((n, 1), PROB_FLOOR))
    log_p = b.log(b.maximum(b.sigmoid(f), floor))
    log_q = b.log(b.maximum(b.sigmoid(b.negate(f)), floor))
    return log_p, log_q


def build_soft_cross_entropy(b: TapeBuilder, log_p: int, log_q: int, targets: np.ndarray) -> int:
    """
    Средняя -[t log p + (1 - t) log(1 - p)] по пакету; t может быть мягкой меткой.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    value = b.add(b.multiply(b.constant(t), log_p), b.multiply(b.constant(1.0 - t), log_q))
    return b.negate(b.reduce_mean(value))
