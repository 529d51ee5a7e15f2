"""
Файловый формат когорты.

cohort.jsonl: одна строка на пациента:
    {"patient_id": 0, "split": "train", "baseline_age": 57, "label": 0,
     "encounters": [[12, 44], [3, 45], ...]}
где encounters содержит пары [код, возраст] в порядке возраста.

vocabulary.csv: code,label,kind
planted_effects.csv: code,label,kind,planted_weight
interactions.csv: code_a,code_b,label_a,label_b,weight
truth_probabilities.csv: patient_id,probability
truth_meta.json: intercept, age_slope
"""
import json
import logging
import os
from typing import List, Sequence

import pandas as pd

from cohort.generator import Encounter, GroundTruth, PatientRecord, Vocabulary
from utils.errors import CohortError
from utils.utils import ensure_folder, read_json, tr, write_json

logger = logging.getLogger(__name__)

COHORT_FILE = 'cohort.jsonl'
VOCABULARY_FILE = 'vocabulary.csv'
EFFECTS_FILE = 'planted_effects.csv'
INTERACTIONS_FILE = 'interactions.csv'
PROBABILITIES_FILE = 'truth_probabilities.csv'
TRUTH_META_FILE = 'truth_meta.json'


def save_cohort(path: str, records: Sequence[PatientRecord]) -> str:
    folder = os.path.dirname(path)
    if folder:
        ensure_folder(folder)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            row = {
                'patient_id': record.patient_id,
                'split': record.split,
                'baseline_age': record.baseline_age,
                'label': record.label,
                'encounters': [[enc.code, enc.age] for enc in record.encounters],
            }
            f.write(json.dumps(row, sort_keys=True, separators=(',', ':')))
            f.write('\n')
    return path


def load_cohort(path: str, vocab_size: int = None) -> List[PatientRecord]:
    """
    Читает cohort.jsonl и проверяет инварианты каждой записи.

    :raises CohortError: Повреждённая строка или нарушенный инвариант.
    """
    records: List[PatientRecord] = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                record = PatientRecord(
                    patient_id=int(row['patient_id']),
                    encounters=tuple(Encounter(int(code), int(age)) for code, age in row['encounters']),
                    baseline_age=int(row['baseline_age']),
                    label=int(row['label']),
                    split=row.get('split'),
                )
            except (ValueError, KeyError, TypeError) as e:
                raise CohortError(tr("Ошибка в строке {line} файла {path}: {error}").format(line=line_no, path=path, error=e)) from e
            record.validate(vocab_size)
            records.append(record)
    logger.debug(tr("Загружено пациентов: {n}").format(n=len(records)))
    return records


def save_vocabulary(folder: str, vocabulary: Vocabulary) -> str:
    path = os.path.join(ensure_folder(folder), VOCABULARY_FILE)
    vocabulary.to_frame().to_csv(path, index=False, lineterminator='\n')
    return path


def load_vocabulary(folder: str) -> Vocabulary:
    return Vocabulary.from_frame(pd.read_csv(os.path.join(folder, VOCABULARY_FILE), keep_default_na=False))


def save_truth(folder: str, truth: GroundTruth) -> List[str]:
    """
    Сохраняет GroundTruth в CSV/JSON.

    :return: Список записанных файлов.
    """
    ensure_folder(folder)
    paths = [
        os.path.join(folder, EFFECTS_FILE),
        os.path.join(folder, INTERACTIONS_FILE),
        os.path.join(folder, PROBABILITIES_FILE),
        os.path.join(folder, TRUTH_META_FILE),
    ]
    truth.effects_frame().to_csv(paths[0], index=False, lineterminator='\n')
    truth.interactions_frame().to_csv(paths[1], index=False, lineterminator='\n')
    pd.DataFrame(
        sorted(truth.true_probability.items()), columns=['patient_id', 'probability']
    ).to_csv(paths[2], index=False, lineterminator='\n')
    write_json(paths[3], {'intercept': truth.intercept, 'age_slope': truth.age_slope})
    return paths


def load_truth(folder: str) -> GroundTruth:
    effects = pd.read_csv(os.path.join(folder, EFFECTS_FILE), keep_default_na=False)
    vocabulary = Vocabulary.from_frame(effects[['code', 'label', 'kind']])
    interactions = pd.read_csv(os.path.join(folder, INTERACTIONS_FILE), keep_default_na=False)
    probabilities = pd.read_csv(os.path.join(folder, PROBABILITIES_FILE))
    meta_path = os.path.join(folder, TRUTH_META_FILE)
    meta = read_json(meta_path) if os.path.exists(meta_path) else {}
    return GroundTruth(
        vocabulary=vocabulary,
        effects={int(r.code): float(r.planted_weight) for r in effects.itertuples(index=False) if float(r.planted_weight) != 0.0},
        interactions=[((int(r.code_a), int(r.code_b)), float(r.weight)) for r in interactions.itertuples(index=False)],
        age_slope=float(meta.get('age_slope', 0.0)),
        intercept=meta.get('intercept'),
        true_probability={int(r.patient_id): float(r.probability) for r in probabilities.itertuples(index=False)},
    )
