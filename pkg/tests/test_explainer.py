import json
import os

import numpy as np
import pandas as pd
import pytest

from analysis.explainer import (
    ExplainerConfig,
    ExplainerContext,
    build_explainer_tape,
    explain_patients,
    explainer_loss,
    export_explanation,
    fidelity_report,
    fit_explainer,
    gumbel_relax,
    importance_frame,
    masked_predict,
    soft_presence,
)
from engine.diffcore import evaluate, finite_difference_check
from models.student import predict_matrix
from utils.errors import ConfigError, ExplainerError
from tests.conftest import make_record

FAST = ExplainerConfig(iterations=5, samples_per_step=3, n_pool=6)
LONG_HISTORY = [(11, 20), (11, 21)] + [(c, 30 + c) for c in range(8)]


def test_loss_value():
    assert explainer_loss(0.8, 0.6, [1.0, 1.0, 1.0], 0.1) == pytest.approx(0.34)


def test_loss_rejects_bad_probability():
    with pytest.raises(ValueError):
        explainer_loss(1.2, 0.5, [0.5], 0.1)


def test_relaxation_stays_inside_unit_interval():
    samples = gumbel_relax(np.array([-50.0, 0.0, 50.0] * 100), temperature=0.5, seed=3)
    assert np.all((samples > 0) & (samples < 1))
    with pytest.raises(ConfigError):
        gumbel_relax([0.0], temperature=0.0)


class TestMasking:

    def test_soft_presence_takes_max(self, micro_student, records):
        bits = soft_presence(micro_student, records[0], np.array([0.2, 0.9, 0.6]))
        assert bits[0] == pytest.approx(0.6)
        assert bits[1] == pytest.approx(0.9)
        assert bits[2:].sum() == 0

    def test_zero_mask_clears_every_code(self, micro_student):
        record = make_record(0, LONG_HISTORY)
        assert len(record.encounters) > micro_student.arch.max_len
        assert soft_presence(micro_student, record, np.zeros(10)).sum() == 0
        bits = soft_presence(micro_student, record, np.r_[0.7, 0.2, np.zeros(8)])
        assert bits[11] == pytest.approx(0.7)

    def test_long_history_scores_every_encounter(self, micro_student):
        record = make_record(0, LONG_HISTORY)
        masked = masked_predict(micro_student, record, np.ones(10), n_samples=4, seed=1)
        np.testing.assert_allclose(masked.samples, predict_matrix(micro_student, [record], 4, 1)[0], rtol=1e-12)
        with pytest.raises(ExplainerError):
            masked_predict(micro_student, record, np.ones(micro_student.arch.max_len))

    def test_all_ones_reproduces_prediction(self, micro_student, records):
        record = records[2]
        masked = masked_predict(micro_student, record, np.ones(4), n_samples=5, seed=1)
        np.testing.assert_allclose(masked.samples, predict_matrix(micro_student, [record], 5, 1)[0], rtol=1e-12)

    def test_score_count_checked(self, micro_student, records):
        with pytest.raises(ExplainerError):
            masked_predict(micro_student, records[2], np.ones(3))


class TestFit:

    def test_tape_uses_prediction_pool(self, micro_student, records):
        record = records[2]
        context = ExplainerContext(micro_student, record, n_pool=6, seed=4)
        tape = build_explainer_tape(context, np.zeros((4, 6)), list(range(6)), gamma=0.0, temperature=0.5)
        out = evaluate(tape, {'logits': np.full((4, 1), 100.0)})
        assert float(out['p_predictor']) == pytest.approx(context.p_baseline, rel=1e-9)
        assert float(out['loss']) == pytest.approx(0.0, abs=1e-12)

    def test_tape_gradient_over_long_history(self, micro_student, rng):
        context = ExplainerContext(micro_student, make_record(0, LONG_HISTORY), n_pool=6, seed=4)
        assert (context.n_steps, context.n_window) == (10, micro_student.arch.max_len)
        tape = build_explainer_tape(context, rng.logistic(size=(10, 3)), [0, 1, 2], gamma=0.1, temperature=0.5)
        assert finite_difference_check(tape, {'logits': rng.normal(size=(10, 1))}, 'loss') < 1e-4

    def test_fit_long_history(self, micro_student):
        record = make_record(0, LONG_HISTORY)
        result = fit_explainer(micro_student, record, FAST, seed=2)
        assert result.importance.codes == (11, 11) + tuple(range(8))
        report = fidelity_report(micro_student, record, result.importance.scores, threshold=0.0, n_samples=3)
        assert report.n_selected == 10 and report.fraction_selected == pytest.approx(1.0)

    def test_fit(self, micro_student, records):
        result = fit_explainer(micro_student, records[2], FAST, seed=4)
        assert len(result.trace) == 5
        assert len(result.importance) == 4
        assert np.all((result.importance.scores > 0) & (result.importance.scores < 1))
        assert result.importance.codes == (4, 5, 6, 7)
        assert result.p_baseline == pytest.approx(predict_matrix(micro_student, [records[2]], 6, 4)[0].mean())

    def test_deterministic(self, micro_student, records):
        a = fit_explainer(micro_student, records[0], FAST, seed=1)
        b = fit_explainer(micro_student, records[0], FAST, seed=1)
        np.testing.assert_array_equal(a.importance.logits, b.importance.logits)
        assert a.trace == b.trace

    def test_zero_iterations_keep_initial_scores(self, micro_student, records):
        result = fit_explainer(micro_student, records[1], ExplainerConfig(iterations=0, n_pool=2), seed=0)
        np.testing.assert_allclose(result.importance.scores, 0.5)
        assert result.trace == []

    def test_invalid_config(self, micro_student, records):
        with pytest.raises(ConfigError):
            fit_explainer(micro_student, records[0], ExplainerConfig(temperature=0.0))


class TestFidelity:

    def test_hard_selection(self, micro_student, records):
        report = fidelity_report(micro_student, records[2], [0.9, 0.1, 0.7, 0.2], threshold=0.5, n_samples=4, seed=2)
        assert report.n_selected == 2
        assert report.fraction_selected == pytest.approx(0.5)
        np.testing.assert_allclose(report.p_full.samples, predict_matrix(micro_student, [records[2]], 4, 2)[0], rtol=1e-12)
        assert len(report.p_selected) == 4

    def test_explain_patients_keeps_order(self, micro_student, records):
        results = explain_patients(micro_student, records[:3], FAST, seed=0)
        assert [r.importance.patient_id for r, _ in results] == [0, 1, 2]
        assert [f.patient_id for _, f in results] == [0, 1, 2]


def test_export(micro_student, records, vocabulary, tmp_path):
    result = fit_explainer(micro_student, records[0], FAST, seed=0)
    report = fidelity_report(micro_student, records[0], result.importance.scores, n_samples=6)
    frame = importance_frame(result.importance, vocabulary)
    assert list(frame.columns) == ['code', 'age', 'score', 'description']
    assert frame['code'].tolist() == ['A00', 'A01', 'A00']
    assert frame['description'][0] == 'diagnosis A00'
    csv_path, json_path = export_explanation(str(tmp_path), result, report, vocabulary)
    assert os.path.basename(csv_path) == 'patient_0.csv'
    assert len(pd.read_csv(csv_path)) == 3
    with open(json_path, encoding='utf-8') as f:
        summary = json.load(f)
    assert summary['final_loss'] == pytest.approx(result.trace[-1])
    assert len(summary['p_full']) == 6
