import dataclasses

import numpy as np
import pytest

from analysis.association import Quadrant, association_map
from analysis.explainer import explain_patients
from analysis.metrics import auroc
from cohort.generator import code_popularity, generate_cohort, records_in, split_cohort
from models.student import init_student, predict_matrix, train_student
from models.teacher import oracle_teacher
from pipeline.stages import select_patients
from utils.config_utils import parse_config
from utils.utils import CONFIG_PATH

SEEDS = range(10)
QUADRANT_SIGN = {Quadrant.ASSOCIATED: 'positive', Quadrant.DISSOCIATED: 'negative'}
DRIVER_WEIGHT = 2.0
DRIVER_RANKS = (20, 21)


def desk_config(seed):
    return parse_config(CONFIG_PATH).reseeded(seed)


def desk_cohort(config):
    records, truth = generate_cohort(config.generator)
    return split_cohort(records, config.split_fractions, config.generator.seed), truth


def train_pair(config, records, truth):
    teacher = oracle_teacher(truth, config.teacher.noise_sd)
    bdl, _ = train_student(init_student(config.student, config.bdl.seed), records, None, config.bdl)
    bdld, _ = train_student(init_student(config.student, config.bdld.seed), records, teacher, config.bdld)
    return bdl, bdld


def validation_auroc(model, records, config):
    validation = records_in(records, 'validation')
    scores = predict_matrix(model, validation, config.metrics.n_samples, config.metrics.seed).mean(axis=1)
    return auroc(scores, [r.label for r in validation])


@pytest.fixture(scope='module')
def desk_outcomes():
    outcomes = []
    for seed in SEEDS:
        config = desk_config(seed)
        records, truth = desk_cohort(config)
        assert 0.073 <= np.mean([r.label for r in records]) <= 0.093
        bdl, bdld = train_pair(config, records, truth)
        settings = config.association
        outcomes.append({
            'bdl': validation_auroc(bdl, records, config),
            'bdld': validation_auroc(bdld, records, config),
            'truth': truth,
            'entries': association_map(bdld, records, truth.vocabulary, settings.bands, settings.n_samples,
                                       settings.seed, settings.coefficient_samples),
        })
    return outcomes


def driver_config(seed):
    """Настольная когорта, где риск задают только два кода средней частоты."""
    config = desk_config(seed)
    ranked = np.argsort(-code_popularity(config.generator), kind='stable')
    drivers = tuple(int(ranked[rank]) for rank in DRIVER_RANKS)
    config.generator = dataclasses.replace(
        config.generator,
        planted_effects={code: DRIVER_WEIGHT for code in drivers},
        planted_interactions=[],
    )
    return config, drivers


@pytest.fixture(scope='module')
def driver_outcomes():
    outcomes = []
    for seed in SEEDS:
        config, drivers = driver_config(seed)
        records, truth = desk_cohort(config)
        teacher = oracle_teacher(truth, config.teacher.noise_sd)
        model, _ = train_student(init_student(config.student, config.bdld.seed), records, teacher, config.bdld)
        carriers = [r for r in records_in(records, 'validation') if set(drivers) <= r.codes_present]
        patients = select_patients(carriers, config.explain.n_patients, config.explain.seed)
        outcomes.append((drivers, explain_patients(model, patients, config.explain.explainer, config.explain.seed)))
    return outcomes


@pytest.mark.slow
class TestDistillationBenefit:

    def test_bdld_beats_bdl_in_paired_seeds(self, desk_outcomes):
        gains = [o['bdld'] - o['bdl'] for o in desk_outcomes]
        assert sum(gain >= 0.02 for gain in gains) >= 8, gains


@pytest.mark.slow
class TestAssociationRecovery:

    def test_quadrant_sign_matches_planted_sign(self, desk_outcomes):
        rates = []
        for outcome in desk_outcomes:
            truth = outcome['truth']
            qualifying = [e for e in outcome['entries'] if truth.magnitude(e.code) >= 1.0 and e.n_exposed >= 500]
            if qualifying:
                rates.append(np.mean([QUADRANT_SIGN.get(e.quadrant) == truth.sign(e.code) for e in qualifying]))
        assert rates
        assert np.mean(rates) >= 0.8

    def test_null_codes_have_smaller_contextual_shift(self, desk_outcomes):
        null, planted = [], []
        for outcome in desk_outcomes:
            truth = outcome['truth']
            paired = {code for (a, b), _ in truth.interactions for code in (a, b)}
            for entry in outcome['entries']:
                if entry.contextual_ratio is None or entry.contextual_ratio <= 0:
                    continue
                shift = abs(np.log(entry.contextual_ratio))
                if truth.sign(entry.code) != 'null':
                    planted.append(shift)
                elif entry.code not in paired:
                    null.append(shift)
        assert null and planted
        assert np.median(null) < np.median(planted)


@pytest.mark.slow
class TestExplainerRecovery:

    def test_hard_selection_keeps_prediction(self, driver_outcomes):
        reports = [report for _, runs in driver_outcomes for _, report in runs]
        assert len(reports) == len(SEEDS) * 50
        faithful = [
            abs(r.p_full.mean - r.p_selected.mean) < 0.1 and r.fraction_selected < 0.25
            for r in reports
        ]
        assert np.mean(faithful) >= 0.8

    def test_drivers_rank_in_top_five(self, driver_outcomes):
        passed = 0
        for drivers, runs in driver_outcomes:
            hits = []
            for result, _ in runs:
                importance = result.importance
                top = {importance.codes[i] for i in np.argsort(-importance.scores, kind='stable')[:5]}
                hits.append(set(drivers) <= top)
            passed += np.mean(hits) >= 0.5
        assert passed >= 8
