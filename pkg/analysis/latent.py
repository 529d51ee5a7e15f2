"""Анализ латентных переменных на валидационной выборке."""
import logging
import os
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from cohort.generator import PatientRecord
from models.student import StudentModel, latent_samples, predict_matrix
from utils.utils import ensure_folder, tr, write_json

logger = logging.getLogger(__name__)

LATENTS_FILE = 'latents.csv'
LATENT_SUMMARY_FILE = 'latent_summary.json'
SUMMARY_PERCENTILES = (5, 50, 95)


def latent_frame(model: StudentModel, records: Sequence[PatientRecord], n_samples: int = 30, seed: int = 0) -> pd.DataFrame:
    """
    Средние латентные переменные и средний риск каждого пациента.

    :return: patient_id,label,contextual,additive,risk
    """
    records = list(records)
    contextual, additive = latent_samples(model, records, n_samples, seed)
    risk = predict_matrix(model, records, n_samples, seed).mean(axis=1)
    return pd.DataFrame({
        'patient_id': [r.patient_id for r in records],
        'label': [r.label for r in records],
        'contextual': contextual.mean(axis=1),
        'additive': additive.mean(axis=1),
        'risk': risk,
    })


def summarize_latents(frame: pd.DataFrame) -> Dict[str, Dict[str, Dict[str, float]]]:
    """
    Диапазоны латентных переменных по меткам: min, p5, p50, p95, max.
    """
    summary: Dict[str, Dict[str, Dict[str, float]]] = {}
    for label, group in frame.groupby('label', sort=True):
        per_label = {}
        for column in ('contextual', 'additive'):
            values = group[column].to_numpy()
            stats = {'min': float(values.min()), 'max': float(values.max()), 'n': int(values.size)}
            for q, value in zip(SUMMARY_PERCENTILES, np.percentile(values, SUMMARY_PERCENTILES)):
                stats[f"p{q}"] = float(value)
            per_label[column] = stats
        summary[str(int(label))] = per_label
    return summary


def export_latents(folder: str, frame: pd.DataFrame) -> List[str]:
    ensure_folder(folder)
    csv_path = os.path.join(folder, LATENTS_FILE)
    json_path = os.path.join(folder, LATENT_SUMMARY_FILE)
    frame.to_csv(csv_path, index=False, lineterminator='\n')
    write_json(json_path, summarize_latents(frame))
    logger.info(tr("Латентные переменные сохранены: {path}").format(path=csv_path))
    return [csv_path, json_path]
