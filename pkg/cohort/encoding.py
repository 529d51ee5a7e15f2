from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from cohort.generator import MAX_AGE, MIN_AGE, PatientRecord
from utils.errors import CohortError
from utils.utils import tr

DEFAULT_MAX_LEN = 256


@dataclass(frozen=True)
class SequenceEncoding:
    code_ids: Tuple[int, ...]
    age_ids: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.code_ids)


@dataclass(frozen=True)
class EncodedBatch:
    """
    Пакет пациентов, выровненный вправо нулями.

    :param codes: B x T идентификаторы кодов.
    :param ages: B x T идентификаторы возраста.
    :param mask: B x T, 1.0 для реальных шагов.
    :param multihot: B x V.
    """
    patient_ids: Tuple[int, ...]
    codes: np.ndarray
    ages: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    multihot: np.ndarray
    labels: np.ndarray
    baseline_ages: np.ndarray

    @property
    def size(self) -> int:
        return len(self.patient_ids)

    @property
    def max_len(self) -> int:
        return int(self.codes.shape[1])


def age_id(age: int) -> int:
    if not MIN_AGE <= age <= MAX_AGE:
        raise CohortError(tr("Возраст {age} вне [16, 100]").format(age=age))
    return int(age) - MIN_AGE


def encode_multihot(record: PatientRecord, vocab_size: int) -> np.ndarray:
    """
    Вектор присутствия кодов: повторы схлопываются, порядок не важен.

    :raises CohortError: Код вне словаря.
    """
    bits = np.zeros(vocab_size, dtype=np.float64)
    for enc in record.encounters:
        if not 0 <= enc.code < vocab_size:
            raise CohortError(
                tr("Код {code} вне словаря размера {size}").format(code=enc.code, size=vocab_size)
            )
        bits[enc.code] = 1.0
    return bits


def sorted_encounters(record: PatientRecord, max_len: int = DEFAULT_MAX_LEN) -> List:
    """Устойчивая сортировка по возрасту и усечение до последних max_len записей."""
    ordered = sorted(record.encounters, key=lambda enc: enc.age)
    return ordered[-max_len:] if len(ordered) > max_len else ordered


def encode_sequence(record: PatientRecord, max_len: int = DEFAULT_MAX_LEN) -> SequenceEncoding:
    """
    Последовательность (код, возраст) для рекуррентного пути.

    Если записей больше max_len, остаются самые поздние.

    :raises CohortError: Пустая запись или max_len < 1.
    """
    if max_len < 1:
        raise CohortError(tr("max_len должен быть >= 1"))
    if not record.encounters:
        raise CohortError(tr("Пациент {pid}: пустая последовательность").format(pid=record.patient_id))
    kept = sorted_encounters(record, max_len)
    return SequenceEncoding(
        code_ids=tuple(enc.code for enc in kept),
        age_ids=tuple(age_id(enc.age) for enc in kept),
    )


def encode_batch(records: Sequence[PatientRecord], vocab_size: int, max_len: int = DEFAULT_MAX_LEN) -> EncodedBatch:
    """
    Кодирует пакет для обоих путей модели.

    :param records: Непустой список пациентов.
    """
    if not records:
        raise CohortError(tr("Пустой пакет"))
    sequences = [encode_sequence(r, max_len) for r in records]
    width = max(len(s) for s in sequences)
    size = len(records)
    codes = np.zeros((size, width), dtype=np.int64)
    ages = np.zeros((size, width), dtype=np.int64)
    mask = np.zeros((size, width), dtype=np.float64)
    for row, seq in enumerate(sequences):
        n = len(seq)
        codes[row, :n] = seq.code_ids
        ages[row, :n] = seq.age_ids
        mask[row, :n] = 1.0
    return EncodedBatch(
        patient_ids=tuple(r.patient_id for r in records),
        codes=codes,
        ages=ages,
        mask=mask,
        lengths=np.array([len(s) for s in sequences], dtype=np.int64),
        multihot=np.stack([encode_multihot(r, vocab_size) for r in records]),
        labels=np.array([r.label for r in records], dtype=np.float64),
        baseline_ages=np.array([r.baseline_age for r in records], dtype=np.float64),
    )
