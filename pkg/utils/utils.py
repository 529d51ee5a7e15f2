import configparser
import hashlib
import json
import logging
import os
from typing import Any, Union

import numpy as np

from utils.translation_utils import TranslationManager

# Создаем логгер
logger = logging.getLogger(__name__)

# Константы и глобальные настройки
BASE_FOLDER = os.path.abspath(os.path.join(os.path.dirname(__file__), '..'))
TRANSLATIONS_FOLDER = os.path.join(BASE_FOLDER, 'translations')
CONFIG_PATH = os.path.join(BASE_FOLDER, "config", 'default.ini')
PAPER_CONFIG_PATH = os.path.join(BASE_FOLDER, "config", 'paper.ini')
SETTING_VER = os.path.join(BASE_FOLDER, "setting_version", "version_config.ini")

LANG_ENV = "RISKDISTILL_LANG"

# Инициализация менеджера переводов
translation_manager = TranslationManager(TRANSLATIONS_FOLDER)
try:
    translation_manager.set_language(os.environ.get(LANG_ENV, 'ru'))
except ValueError:
    translation_manager.set_language('ru')


def tr(text: str) -> str:
    """
    Функция для перевода текста.
    """
    return translation_manager.translate(text)


def set_language(lang_code: str) -> None:
    """
    Устанавливает язык сообщений.
    """
    translation_manager.set_language(lang_code)


# Загрузка версий
_version_config = configparser.ConfigParser()
_version_config.read(SETTING_VER, encoding='utf-8')

CURRENT_VERSION = _version_config.get('VERSION', 'ver_programm', fallback='0.0.0')
CHECKPOINT_VERSION = _version_config.get('VERSION', 'checkpoint', fallback='1.0')
COHORT_VERSION = _version_config.get('VERSION', 'cohort', fallback='1.0')


def ensure_folder(path: str) -> str:
    """
    Создаёт папку, если её нет.

    :param path: Путь к папке.
    :return: Тот же путь.
    """
    os.makedirs(path, exist_ok=True)
    return path


def canonical_json(obj: Any) -> str:
    """Детерминированная сериализация: сортированные ключи, без лишних пробелов."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(',', ':'))


def write_json(path: str, obj: Any) -> str:
    """
    Записывает JSON побайтно детерминированно.

    :param path: Путь к файлу.
    :param obj: Сериализуемый объект.
    :return: Путь к файлу.
    """
    folder = os.path.dirname(path)
    if folder:
        ensure_folder(folder)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(obj, f, sort_keys=True, ensure_ascii=False, indent=2)
        f.write('\n')
    return path


def read_json(path: str) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode('utf-8'))


def sha256_file(path: str) -> str:
    """
    SHA-256 содержимого файла.

    :param path: Путь к файлу.
    :return: Шестнадцатеричный дайджест.
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _seed_word(key: Union[int, str]) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(tr("Ключ зерна должен быть неотрицательным: {key}").format(key=key))
        return int(key)
    return int(sha256_text(str(key))[:16], 16)


def derive_seed(global_seed: int, stage: str) -> int:
    """
    Выводит зерно этапа из глобального зерна.

    :param global_seed: Глобальное зерно запуска.
    :param stage: Имя этапа.
    :return: 31-битное неотрицательное зерно.
    """
    return int(sha256_text(f"{global_seed}:{stage}")[:8], 16) & 0x7FFFFFFF


def rng_for(*keys: Union[int, str]) -> np.random.Generator:
    """
    Независимый поток случайных чисел для кортежа ключей.

    Поток зависит только от ключей (Philox поверх SeedSequence), поэтому
    результат не зависит от порядка вычислений и числа потоков.

    :param keys: Зерно и индексы (например, seed, 'teacher', patient_id).
    :return: numpy Generator.
    """
    sequence = np.random.SeedSequence([_seed_word(k) for k in keys])
    return np.random.Generator(np.random.Philox(sequence))
