"""
Лента обратного режима дифференцирования.

Лента строится один раз через TapeBuilder и дальше неизменяема: узлы
хранятся в порядке вставки, который одновременно является топологическим.
Формы проверяются при вычислении, ошибка называет номер узла.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg as sla
from scipy import special

from utils.errors import GradientContractError, TapeOverflowError, TapeShapeError
from utils.utils import tr

logger = logging.getLogger(__name__)

Tensor = np.ndarray

PRIMITIVES = (
    'input', 'constant', 'add', 'multiply', 'matmul', 'sigmoid', 'tanh', 'exp', 'log',
    'softmax', 'concatenate', 'gather_rows', 'reduce_sum', 'reduce_mean', 'maximum',
    'transpose', 'reshape', 'cholesky', 'solve_triangular',
)


def as_tensor(value: Any) -> Tensor:
    return np.array(value, dtype=np.float64)


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    parents: Tuple[int, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Tape:
    """
    Неизменяемая лента.

    :param nodes: Узлы в топологическом порядке.
    :param inputs: Имя входа -> номер узла.
    :param outputs: Имя выхода -> номер узла.
    """
    nodes: Tuple[Node, ...]
    inputs: Mapping[str, int]
    outputs: Mapping[str, int]

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def input_names(self) -> List[str]:
        return list(self.inputs)

    @property
    def output_names(self) -> List[str]:
        return list(self.outputs)


class TapeBuilder:
    """
    Построитель ленты. Каждый метод добавляет узел и возвращает его номер.
    """

    def __init__(self):
        self._nodes: List[Node] = []
        self._inputs: Dict[str, int] = {}
        self._outputs: Dict[str, int] = {}

    def _add(self, op: str, parents: Sequence[int] = (), **attrs: Any) -> int:
        node_id = len(self._nodes)
        for parent in parents:
            if not 0 <= parent < node_id:
                raise GradientContractError(
                    tr("Узел {node} ссылается на несуществующий узел {parent}").format(node=node_id, parent=parent)
                )
        self._nodes.append(Node(node_id, op, tuple(int(p) for p in parents), dict(attrs)))
        return node_id

    def input(self, name: str) -> int:
        if name in self._inputs:
            raise GradientContractError(tr("Вход '{name}' уже объявлен").format(name=name))
        node_id = self._add('input', name=name)
        self._inputs[name] = node_id
        return node_id

    def constant(self, value: Any) -> int:
        arr = as_tensor(value)
        arr.setflags(write=False)
        return self._add('constant', value=arr)

    def add(self, a: int, b: int) -> int:
        return self._add('add', (a, b))

    def multiply(self, a: int, b: int) -> int:
        return self._add('multiply', (a, b))

    def matmul(self, a: int, b: int) -> int:
        return self._add('matmul', (a, b))

    def sigmoid(self, x: int) -> int:
        return self._add('sigmoid', (x,))

    def tanh(self, x: int) -> int:
        return self._add('tanh', (x,))

    def exp(self, x: int) -> int:
        return self._add('exp', (x,))

    def log(self, x: int) -> int:
        return self._add('log', (x,))

    def softmax(self, x: int, axis: int = -1) -> int:
        return self._add('softmax', (x,), axis=axis)

    def concatenate(self, xs: Sequence[int], axis: int = 0) -> int:
        return self._add('concatenate', tuple(xs), axis=axis)

    def gather_rows(self, table: int, indices: Sequence[int]) -> int:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        idx.setflags(write=False)
        return self._add('gather_rows', (table,), indices=idx)

    def reduce_sum(self, x: int, axis: Optional[int] = None, keepdims: bool = False) -> int:
        return self._add('reduce_sum', (x,), axis=axis, keepdims=keepdims)

    def reduce_mean(self, x: int, axis: Optional[int] = None, keepdims: bool = False) -> int:
        return self._add('reduce_mean', (x,), axis=axis, keepdims=keepdims)

    def maximum(self, a: int, b: int) -> int:
        return self._add('maximum', (a, b))

    def transpose(self, x: int) -> int:
        return self._add('transpose', (x,))

    def reshape(self, x: int, shape: Sequence[int]) -> int:
        return self._add('reshape', (x,), shape=tuple(int(s) for s in shape))

    def cholesky(self, x: int) -> int:
        return self._add('cholesky', (x,))

    def solve_triangular(self, lower: int, rhs: int) -> int:
        return self._add('solve_triangular', (lower, rhs))

    # Составные операции из примитивов

    def scale(self, x: int, factor: float) -> int:
        return self.multiply(x, self.constant(factor))

    def negate(self, x: int) -> int:
        return self.scale(x, -1.0)

    def subtract(self, a: int, b: int) -> int:
        return self.add(a, self.negate(b))

    def square(self, x: int) -> int:
        return self.multiply(x, x)

    def output(self, name: str, node_id: int) -> int:
        if not 0 <= node_id < len(self._nodes):
            raise GradientContractError(tr("Неизвестный узел выхода {node}").format(node=node_id))
        self._outputs[name] = node_id
        return node_id

    def build(self) -> Tape:
        return Tape(tuple(self._nodes), dict(self._inputs), dict(self._outputs))


def _shape_error(node: Node, detail: str) -> TapeShapeError:
    return TapeShapeError(node.id, node.op, detail)


def _forward_node(node: Node, args: List[Tensor]) -> Tensor:
    op = node.op
    if op == 'add':
        a, b = args
        if a.shape != b.shape:
            raise _shape_error(node, f"{a.shape} vs {b.shape}")
        return a + b
    if op == 'multiply':
        a, b = args
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise _shape_error(node, f"{a.shape} vs {b.shape}")
        return a * b
    if op == 'matmul':
        a, b = args
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _shape_error(node, f"{a.shape} @ {b.shape}")
        return a @ b
    if op == 'sigmoid':
        return special.expit(args[0])
    if op == 'tanh':
        return np.tanh(args[0])
    if op == 'exp':
        return np.exp(args[0])
    if op == 'log':
        return np.log(args[0])
    if op == 'softmax':
        x = args[0]
        shifted = x - np.max(x, axis=node.attrs['axis'], keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=node.attrs['axis'], keepdims=True)
    if op == 'concatenate':
        axis = node.attrs['axis']
        try:
            return np.concatenate(args, axis=axis)
        except ValueError as e:
            raise _shape_error(node, str(e)) from e
    if op == 'gather_rows':
        table = args[0]
        idx = node.attrs['indices']
        if table.ndim != 2:
            raise _shape_error(node, f"table must be 2-D, got {table.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise _shape_error(node, f"row index out of range [0, {table.shape[0]})")
        return table[idx]
    if op in ('reduce_sum', 'reduce_mean'):
        x = args[0]
        axis = node.attrs['axis']
        if axis is not None and not -x.ndim <= axis < x.ndim:
            raise _shape_error(node, f"axis {axis} for shape {x.shape}")
        reducer = np.sum if op == 'reduce_sum' else np.mean
        return np.asarray(reducer(x, axis=axis, keepdims=node.attrs['keepdims']), dtype=np.float64)
    if op == 'maximum':
        a, b = args
        if a.shape != b.shape:
            raise _shape_error(node, f"{a.shape} vs {b.shape}")
        return np.maximum(a, b)
    if op == 'transpose':
        if args[0].ndim != 2:
            raise _shape_error(node, f"transpose needs 2-D, got {args[0].shape}")
        return np.ascontiguousarray(args[0].T)
    if op == 'reshape':
        shape = node.attrs['shape']
        if int(np.prod(shape)) != args[0].size:
            raise _shape_error(node, f"{args[0].shape} -> {shape}")
        return args[0].reshape(shape)
    if op == 'cholesky':
        a = args[0]
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise _shape_error(node, f"square matrix expected, got {a.shape}")
        try:
            return np.linalg.cholesky(a)
        except np.linalg.LinAlgError as e:
            raise TapeOverflowError(node.id, node.op) from e
    if op == 'solve_triangular':
        lower, rhs = args
        if lower.ndim != 2 or rhs.ndim != 2 or lower.shape[0] != lower.shape[1] or lower.shape[1] != rhs.shape[0]:
            raise _shape_error(node, f"{lower.shape} \\ {rhs.shape}")
        return sla.solve_triangular(lower, rhs, lower=True, check_finite=False)
    raise _shape_error(node, f"unknown primitive '{op}'")


def _forward(tape: Tape, inputs: Mapping[str, Any]) -> List[Tensor]:
    missing = [name for name in tape.inputs if name not in inputs]
    if missing:
        raise GradientContractError(tr("Не заданы входы ленты: {names}").format(names=", ".join(missing)))
    values: List[Tensor] = []
    with np.errstate(all='ignore'):
        for node in tape.nodes:
            if node.op == 'input':
                value = as_tensor(inputs[node.attrs['name']])
            elif node.op == 'constant':
                value = node.attrs['value']
            else:
                value = _forward_node(node, [values[p] for p in node.parents])
            if not np.all(np.isfinite(value)):
                raise TapeOverflowError(node.id, node.op)
            values.append(value)
    return values


def evaluate(tape: Tape, inputs: Mapping[str, Any]) -> Dict[str, Tensor]:
    """
    Прямой проход.

    :param tape: Лента.
    :param inputs: Значения всех входов по именам.
    :return: Значения выходов по именам.
    :raises TapeShapeError: Несовместимые формы в узле.
    :raises TapeOverflowError: NaN/Inf в узле.
    """
    values = _forward(tape, inputs)
    return {name: values[node_id].copy() for name, node_id in tape.outputs.items()}


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if grad.shape == shape:
        return grad
    return np.asarray(np.sum(grad), dtype=np.float64).reshape(shape)


def _expand_reduced(g: Tensor, x_shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> Tensor:
    if axis is None:
        return np.broadcast_to(np.asarray(g).reshape(()), x_shape).copy()
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x_shape).copy()


def _backward_node(node: Node, args: List[Tensor], out: Tensor, g: Tensor) -> List[Tensor]:
    op = node.op
    if op == 'add':
        return [g, g]
    if op == 'multiply':
        a, b = args
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    if op == 'matmul':
        a, b = args
        return [g @ b.T, a.T @ g]
    if op == 'sigmoid':
        return [g * out * (1.0 - out)]
    if op == 'tanh':
        return [g * (1.0 - out * out)]
    if op == 'exp':
        return [g * out]
    if op == 'log':
        return [g / args[0]]
    if op == 'softmax':
        axis = node.attrs['axis']
        return [out * (g - np.sum(g * out, axis=axis, keepdims=True))]
    if op == 'concatenate':
        axis = node.attrs['axis']
        sizes = np.cumsum([a.shape[axis] for a in args])[:-1]
        return list(np.split(g, sizes, axis=axis))
    if op == 'gather_rows':
        grad = np.zeros_like(args[0])
        np.add.at(grad, node.attrs['indices'], g)
        return [grad]
    if op == 'reduce_sum':
        return [_expand_reduced(g, args[0].shape, node.attrs['axis'], node.attrs['keepdims'])]
    if op == 'reduce_mean':
        x = args[0]
        axis = node.attrs['axis']
        count = x.size if axis is None else x.shape[axis]
        return [_expand_reduced(g, x.shape, axis, node.attrs['keepdims']) / max(count, 1)]
    if op == 'maximum':
        a, b = args
        mask = a >= b
        return [np.where(mask, g, 0.0), np.where(mask, 0.0, g)]
    if op == 'transpose':
        return [np.ascontiguousarray(g.T)]
    if op == 'reshape':
        return [g.reshape(args[0].shape)]
    if op == 'cholesky':
        # входная матрица читается только по нижнему треугольнику
        lower = out
        phi = lower.T @ np.tril(g)
        phi = np.tril(phi)
        phi[np.diag_indices_from(phi)] *= 0.5
        tmp = sla.solve_triangular(lower, phi, lower=True, trans='T', check_finite=False)
        p = sla.solve_triangular(lower, tmp.T, lower=True, trans='T', check_finite=False).T
        sym = p + p.T
        grad = np.tril(sym)
        grad[np.diag_indices_from(grad)] *= 0.5
        return [grad]
    if op == 'solve_triangular':
        lower, _ = args
        g_rhs = sla.solve_triangular(lower, g, lower=True, trans='T', check_finite=False)
        return [-np.tril(g_rhs @ out.T), g_rhs]
    raise _shape_error(node, f"no backward rule for '{op}'")


def value_and_gradient(tape: Tape, inputs: Mapping[str, Any], output: str) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """
    Прямой и обратный проход за один вызов.

    :param tape: Лента.
    :param inputs: Значения входов.
    :param output: Имя скалярного выхода.
    :return: (значения всех выходов, частные производные по каждому входу).
    :raises GradientContractError: Выход не скалярный или не объявлен.
    """
    if output not in tape.outputs:
        raise GradientContractError(tr("Неизвестный выход ленты: {name}").format(name=output))
    values = _forward(tape, inputs)
    out_id = tape.outputs[output]
    if values[out_id].size != 1:
        raise GradientContractError(
            tr("Градиент определён только для скалярного выхода, форма {shape}").format(shape=values[out_id].shape)
        )

    grads: List[Optional[Tensor]] = [None] * len(tape.nodes)
    grads[out_id] = np.ones_like(values[out_id])
    for node in reversed(tape.nodes[:out_id + 1]):
        g = grads[node.id]
        if g is None or not node.parents:
            continue
        parent_grads = _backward_node(node, [values[p] for p in node.parents], values[node.id], g)
        for parent, pg in zip(node.parents, parent_grads):
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg

    partials = {}
    for name, node_id in tape.inputs.items():
        g = grads[node_id]
        partials[name] = np.zeros_like(values[node_id]) if g is None else np.asarray(g, dtype=np.float64).reshape(values[node_id].shape)
    outputs = {name: values[node_id].copy() for name, node_id in tape.outputs.items()}
    return outputs, partials


def gradient(tape: Tape, inputs: Mapping[str, Any], output: str) -> Dict[str, Tensor]:
    """
    Частные производные скалярного выхода по всем входам.

    :param tape: Лента.
    :param inputs: Значения входов.
    :param output: Имя выхода.
    :return: Имя входа -> градиент той же формы.
    """
    return value_and_gradient(tape, inputs, output)[1]


def finite_difference_check(tape: Tape, inputs: Mapping[str, Any], output: str, step: float = 1e-5) -> float:
    """
    Сравнение аналитического градиента с центральными разностями.

    :param step: Шаг разности, > 0.
    :return: max |a - n| / max(1, |a|) по всем элементам всех входов.
    """
    if not step > 0:
        raise GradientContractError(tr("Шаг конечной разности должен быть положительным: {step}").format(step=step))
    base = {name: as_tensor(value) for name, value in inputs.items()}
    analytic = gradient(tape, base, output)
    worst = 0.0
    for name in tape.inputs:
        x = base[name]
        flat = x.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = float(evaluate(tape, base)[output].reshape(-1)[0])
            flat[i] = original - step
            minus = float(evaluate(tape, base)[output].reshape(-1)[0])
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    logger.debug(tr("Проверка конечными разностями: макс. ошибка {err:.3e}").format(err=worst))
    return worst
