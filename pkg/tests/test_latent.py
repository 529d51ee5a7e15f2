import json

import numpy as np
import pandas as pd
import pytest

from analysis.latent import export_latents, latent_frame, summarize_latents
from models.student import latent_samples, predict_matrix


def test_frame_matches_model(micro_student, records):
    frame = latent_frame(micro_student, records, n_samples=3, seed=1)
    assert list(frame.columns) == ['patient_id', 'label', 'contextual', 'additive', 'risk']
    contextual, _ = latent_samples(micro_student, records, 3, 1)
    np.testing.assert_allclose(frame['contextual'], contextual.mean(axis=1))
    np.testing.assert_allclose(frame['risk'], predict_matrix(micro_student, records, 3, 1).mean(axis=1))


def test_summary_per_label():
    frame = pd.DataFrame({
        'patient_id': range(6),
        'label': [0, 0, 0, 1, 1, 1],
        'contextual': [-3.0, -2.0, -1.0, -6.0, -5.0, -4.0],
        'additive': [0.0, 0.5, 1.0, 1.0, 2.0, 3.0],
        'risk': [0.1] * 6,
    })
    summary = summarize_latents(frame)
    assert set(summary) == {'0', '1'}
    assert summary['0']['contextual']['p50'] == pytest.approx(-2.0)
    assert summary['1']['additive']['max'] == pytest.approx(3.0)
    assert summary['1']['contextual']['n'] == 3


def test_export(micro_student, records, tmp_path):
    csv_path, json_path = export_latents(str(tmp_path), latent_frame(micro_student, records, n_samples=2))
    assert len(pd.read_csv(csv_path)) == 6
    with open(json_path, encoding='utf-8') as f:
        assert set(json.load(f)) == {'0', '1'}
