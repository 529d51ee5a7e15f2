import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

import psutil

from utils.utils import tr

THREADS_ENV = "RISKDISTILL_THREADS"

T = TypeVar('T')
R = TypeVar('R')


class ProcessUtils:
    logger = logging.getLogger('ProcessUtils')

    @staticmethod
    def thread_limit() -> int:
        """
        Число рабочих потоков: min(RISKDISTILL_THREADS, число ядер).
        """
        cpus = psutil.cpu_count(logical=True) or 1
        raw = os.environ.get(THREADS_ENV)
        if raw is None or not raw.strip():
            return cpus
        try:
            requested = int(raw)
        except ValueError:
            ProcessUtils.logger.warning(
                tr("Некорректное значение {env}={value}, используется {cpus}").format(env=THREADS_ENV, value=raw, cpus=cpus)
            )
            return cpus
        return max(1, min(requested, cpus))

    @staticmethod
    def fan_out(func: Callable[[T], R], items: Iterable[T], label: str = "", max_workers: Optional[int] = None) -> List[R]:
        """
        Применяет func к каждому элементу в пуле потоков.

        Результаты возвращаются в порядке входа независимо от расписания.
        Первая ошибка пробрасывается вызывающему.

        :param func: Функция одного элемента.
        :param items: Элементы.
        :param label: Имя задачи для лога.
        :param max_workers: Явный предел потоков.
        :return: Список результатов.
        """
        work = list(items)
        workers = max_workers or ProcessUtils.thread_limit()
        if workers <= 1 or len(work) <= 1:
            return [func(item) for item in work]

        ProcessUtils.logger.debug(
            tr("Запуск {label}: {n} задач, {workers} потоков").format(label=label or "fan_out", n=len(work), workers=workers)
        )
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, work))
