"""
Версионированные контрольные точки в JSON.

Массивы хранятся как base64 от little-endian float64 вместе с формой.
"""
import base64
import logging
import os
from typing import Any, Dict, Mapping, Optional

import numpy as np
from packaging import version

from utils.errors import CheckpointError
from utils.utils import CHECKPOINT_VERSION, CURRENT_VERSION, ensure_folder, read_json, tr, write_json

logger = logging.getLogger(__name__)


def encode_array(arr: np.ndarray) -> Dict[str, Any]:
    arr = np.asarray(arr, dtype='<f8')
    return {'shape': list(arr.shape), 'data': base64.b64encode(arr.tobytes()).decode('ascii')}


def decode_array(blob: Mapping[str, Any]) -> np.ndarray:
    raw = base64.b64decode(blob['data'])
    return np.frombuffer(raw, dtype='<f8').reshape(blob['shape']).astype(np.float64)


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> Dict[str, Any]:
    return {name: encode_array(arr) for name, arr in sorted(arrays.items())}


def decode_arrays(blobs: Mapping[str, Any]) -> Dict[str, np.ndarray]:
    return {name: decode_array(blob) for name, blob in blobs.items()}


def save_checkpoint(
    path: str,
    kind: str,
    params: Mapping[str, np.ndarray],
    arch: Mapping[str, Any],
    config_hash: str,
    optimizer: Optional[Mapping[str, Any]] = None,
    extra: Optional[Mapping[str, Any]] = None,
) -> str:
    """
    Сохраняет контрольную точку.

    :param kind: 'student' или 'teacher'.
    :param params: Тензоры параметров.
    :param arch: Описание архитектуры (JSON-совместимое).
    :param config_hash: Хэш конфигурации, с которой обучена модель.
    :param optimizer: Состояние Adam (моменты сериализуются как массивы).
    :return: Путь к файлу.
    """
    folder = os.path.dirname(path)
    if folder:
        ensure_folder(folder)
    optimizer_blob = None
    if optimizer is not None:
        optimizer_blob = {key: value for key, value in optimizer.items() if key not in ('m', 'v')}
        optimizer_blob['m'] = encode_arrays(optimizer['m'])
        optimizer_blob['v'] = encode_arrays(optimizer['v'])
    payload = {
        'format_version': CHECKPOINT_VERSION,
        'program_version': CURRENT_VERSION,
        'kind': kind,
        'config_hash': config_hash,
        'arch': dict(arch),
        'params': encode_arrays(params),
        'optimizer': optimizer_blob,
        'extra': dict(extra or {}),
    }
    write_json(path, payload)
    logger.info(tr("Контрольная точка сохранена: {path}").format(path=path))
    return path


def load_checkpoint(path: str, kind: str, config_hash: Optional[str] = None) -> Dict[str, Any]:
    """
    Загружает контрольную точку и проверяет её совместимость.

    :param kind: Ожидаемый вид модели.
    :param config_hash: Ожидаемый хэш конфигурации; None отключает проверку.
    :raises CheckpointError: Другой вид, хэш конфигурации или несовместимая версия формата.
    """
    try:
        payload = read_json(path)
    except (OSError, ValueError) as e:
        raise CheckpointError(tr("Не удалось прочитать контрольную точку {path}: {error}").format(path=path, error=e)) from e

    stored = version.parse(str(payload.get('format_version', '0')))
    current = version.parse(CHECKPOINT_VERSION)
    if stored.major != current.major or stored > current:
        raise CheckpointError(
            tr("Несовместимая версия формата {stored} (поддерживается {current})").format(stored=stored, current=current)
        )
    if payload.get('kind') != kind:
        raise CheckpointError(tr("Ожидалась модель '{kind}', в файле '{found}'").format(kind=kind, found=payload.get('kind')))
    if config_hash is not None and payload.get('config_hash') != config_hash:
        raise CheckpointError(
            tr("Хэш конфигурации не совпадает: {found} != {expected}").format(found=payload.get('config_hash'), expected=config_hash)
        )

    payload['params'] = decode_arrays(payload['params'])
    if payload.get('optimizer'):
        payload['optimizer']['m'] = decode_arrays(payload['optimizer']['m'])
        payload['optimizer']['v'] = decode_arrays(payload['optimizer']['v'])
    return payload
