import json
import logging
import os
import string
from typing import Dict, FrozenSet, List, Set

SOURCE_LANGUAGE = 'ru'


class TranslationManager:
    """
    Каталог сообщений журнала и ошибок.

    Исходные строки написаны на русском и служат ключами; перевод берётся из
    translations/<код>.json. Строки форматируются через .format() уже после
    перевода, поэтому запись каталога с иным набором полей {...} отбрасывается
    при загрузке.
    """

    def __init__(self, translations_folder: str):
        """
        :param translations_folder: Папка с файлами <код>.json.
        """
        self.translations_folder = translations_folder
        self.available_languages: List[str] = [SOURCE_LANGUAGE, 'en']
        self.current_language: str = SOURCE_LANGUAGE
        self.translations: Dict[str, Dict[str, str]] = {}
        self.rejected: Dict[str, List[str]] = {}
        self._missing: Set[str] = set()
        self.logger = logging.getLogger(self.__class__.__name__)
        self.load_translations()

    @staticmethod
    def placeholders(text: str) -> FrozenSet[str]:
        """Имена полей подстановки в строке формата."""
        try:
            return frozenset(name for _, name, _, _ in string.Formatter().parse(text) if name)
        except ValueError:
            return frozenset({'<malformed>'})

    def _read_catalogue(self, lang_code: str) -> None:
        file_path = os.path.join(self.translations_folder, f"{lang_code}.json")
        if not os.path.exists(file_path):
            return
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            self.logger.error(f"Ошибка декодирования JSON в файле {file_path}: {e}")
            return
        except OSError as e:
            self.logger.error(f"Ошибка при чтении файла {file_path}: {e}")
            return

        catalogue, rejected = {}, []
        for source, target in raw.items():
            if self.placeholders(source) != self.placeholders(target):
                rejected.append(source)
                continue
            catalogue[source] = target
        if rejected:
            self.logger.error(f"{file_path}: {len(rejected)} записей с несовпадающими полями отброшены")
        self.translations[lang_code] = catalogue
        self.rejected[lang_code] = rejected
        self.logger.debug(f"Каталог {file_path}: {len(catalogue)} строк")

    def load_translations(self) -> None:
        """Загружает каталоги всех языков, кроме исходного; ошибки только логируются."""
        for lang_code in self.available_languages:
            if lang_code != SOURCE_LANGUAGE:
                self._read_catalogue(lang_code)

    def set_language(self, lang_code: str) -> None:
        """
        :raises ValueError: Язык не поддерживается.
        """
        if lang_code not in self.available_languages:
            self.logger.warning(f"Язык '{lang_code}' не поддерживается")
            raise ValueError(f"Язык '{lang_code}' не поддерживается")
        self.current_language = lang_code

    def translate(self, text: str) -> str:
        """
        Перевод на текущий язык; без перевода возвращается исходная строка.
        """
        if self.current_language == SOURCE_LANGUAGE:
            return text
        translated = self.translations.get(self.current_language, {}).get(text)
        if translated:
            return translated
        # одно предупреждение на строку
        if text not in self._missing:
            self._missing.add(text)
            self.logger.warning(f"Перевод для '{text}' не найден на языке '{self.current_language}'")
        return text
