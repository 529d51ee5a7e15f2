import logging
from typing import Any, Dict, Mapping, Optional

import numpy as np

from utils.utils import tr

logger = logging.getLogger(__name__)


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: Optional[float]) -> Dict[str, np.ndarray]:
    """
    Масштабирует градиенты так, чтобы их общая норма не превышала max_norm.

    :param grads: Градиенты по именам.
    :param max_norm: Предел нормы; None или <= 0 отключает обрезку.
    :return: Новые (или те же) градиенты.
    """
    if not max_norm or max_norm <= 0:
        return dict(grads)
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total <= max_norm:
        return dict(grads)
    factor = max_norm / total
    return {name: g * factor for name, g in grads.items()}


class Adam:
    """
    Оптимизатор Adam над словарём именованных параметров.

    Параметры обновляются на месте; моменты хранятся по тем же именам.
    """

    def __init__(
        self,
        params: Dict[str, np.ndarray],
        lr: float = 7e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError(tr("Скорость обучения должна быть положительной: {lr}").format(lr=lr))
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        """Один шаг Adam; параметры без градиента пропускаются."""
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, param in self.params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def state_dict(self) -> Dict[str, Any]:
        return {
            't': self.t,
            'lr': self.lr,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'eps': self.eps,
            'm': {name: arr.copy() for name, arr in self.m.items()},
            'v': {name: arr.copy() for name, arr in self.v.items()},
        }

    def load_state_dict(self, state: Mapping[str, Any]) -> None:
        self.t = int(state['t'])
        self.lr = float(state['lr'])
        self.beta1 = float(state['beta1'])
        self.beta2 = float(state['beta2'])
        self.eps = float(state['eps'])
        for name in self.params:
            if name in state['m']:
                self.m[name] = np.array(state['m'][name], dtype=np.float64)
                self.v[name] = np.array(state['v'][name], dtype=np.float64)
