import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from cohort.generator import Encounter, GeneratorConfig, PatientRecord, build_vocabulary, generate_cohort, split_cohort  # noqa: E402
from models.student import StudentArch, init_student  # noqa: E402

VOCAB_DIAG = 8
VOCAB_MED = 4
VOCAB_SIZE = VOCAB_DIAG + VOCAB_MED


def make_record(pid, events, baseline=None, label=0, split=None):
    """events: список пар (код, возраст)."""
    encounters = tuple(Encounter(code, age) for code, age in sorted(events, key=lambda e: e[1]))
    if baseline is None:
        baseline = max(age for _, age in events)
    return PatientRecord(pid, encounters, baseline, label, split)


@pytest.fixture
def vocabulary():
    return build_vocabulary(VOCAB_DIAG, VOCAB_MED)


@pytest.fixture
def records():
    """Шесть пациентов вручную: две метки, все выборки, повторы кодов."""
    return [
        make_record(0, [(0, 40), (1, 41), (0, 45)], baseline=50, label=1, split='train'),
        make_record(1, [(2, 30), (3, 31)], baseline=35, label=0, split='train'),
        make_record(2, [(4, 60), (5, 61), (6, 62), (7, 63)], baseline=64, label=1, split='train'),
        make_record(3, [(8, 20)], baseline=22, label=0, split='tune'),
        make_record(4, [(9, 70), (10, 71), (11, 72)], baseline=72, label=1, split='tune'),
        make_record(5, [(1, 55), (2, 56)], baseline=58, label=0, split='validation'),
    ]


@pytest.fixture
def micro_arch():
    return StudentArch(vocab_size=VOCAB_SIZE, d=3, h=3, m=4, max_len=8)


@pytest.fixture
def micro_student(micro_arch):
    return init_student(micro_arch, seed=7)


@pytest.fixture
def small_generator_config():
    return GeneratorConfig(
        n_patients=300,
        vocab_diag=VOCAB_DIAG,
        vocab_med=VOCAB_MED,
        planted_effects={1: 1.5, 2: -1.5},
        planted_interactions=[((3, 4), 1.0)],
        visits_mean=4.0,
        seed=3,
    )


@pytest.fixture
def small_cohort(small_generator_config):
    records, truth = generate_cohort(small_generator_config)
    return split_cohort(records, seed=3), truth


@pytest.fixture
def rng():
    return np.random.default_rng(42)
