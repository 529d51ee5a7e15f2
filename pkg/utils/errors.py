from typing import Any, List, Optional, Sequence


class RiskDistillError(Exception):
    """Базовое исключение проекта."""


class TapeShapeError(RiskDistillError, ValueError):
    """
    Несовместимые формы тензоров в узле ленты.

    :param node_id: Номер узла.
    :param op: Имя примитива.
    :param detail: Описание несовпадения.
    """

    def __init__(self, node_id: int, op: str, detail: str):
        self.node_id = node_id
        self.op = op
        self.detail = detail
        super().__init__(f"node {node_id} ({op}): {detail}")


class TapeOverflowError(RiskDistillError, ArithmeticError):
    """Неконечное значение (NaN/Inf) в узле ленты."""

    def __init__(self, node_id: int, op: str):
        self.node_id = node_id
        self.op = op
        super().__init__(f"non-finite value at node {node_id} ({op})")


class GradientContractError(RiskDistillError, ValueError):
    pass


class ConfigError(RiskDistillError, ValueError):
    """
    Ошибка конфигурации с указанием ключа.

    :param key: Ключ в формате "[section] key" или имя поля.
    :param reason: Причина отказа.
    """

    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason
        super().__init__(f"{key}: {reason}")


class CohortError(RiskDistillError, ValueError):
    pass


class TeacherError(RiskDistillError, RuntimeError):
    pass


class TrainingError(RiskDistillError, RuntimeError):
    """Обучение прервано; history содержит эпохи, завершённые до сбоя."""

    def __init__(self, message: str, history: Optional[Any] = None):
        self.history = history
        super().__init__(message)


class MetricError(RiskDistillError, ValueError):
    pass


class NoUsableStrataError(RiskDistillError, ValueError):
    """Все пары возрастных страт пропущены."""

    def __init__(self, code: Optional[int], diagnostics: Sequence[Any]):
        self.code = code
        self.diagnostics = list(diagnostics)
        super().__init__(f"no usable strata for code {code} ({len(self.diagnostics)} pairs skipped)")


class ExplainerError(RiskDistillError, RuntimeError):
    def __init__(self, message: str, trace: Optional[List[float]] = None):
        self.trace = list(trace or [])
        super().__init__(message)


class CheckpointError(RiskDistillError, RuntimeError):
    pass


class StageDependencyError(RiskDistillError, RuntimeError):
    """Этап запущен раньше этапов, от которых он зависит."""

    def __init__(self, stage: str, missing: Sequence[str]):
        self.stage = stage
        self.missing = list(missing)
        super().__init__(f"stage '{stage}' requires: {', '.join(self.missing)}")
