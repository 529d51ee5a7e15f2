import numpy as np
import pandas as pd
import pytest
from scipy.stats import chi2_contingency

from analysis.association import (
    DESK_BANDS,
    PAPER_BANDS,
    QUADRANT_ORDER,
    AgeBand,
    AssociationEntry,
    BandPair,
    Quadrant,
    StratifiedGroups,
    age_histograms,
    age_stratified_groups,
    association_map,
    classify_quadrant,
    collinearity_audit,
    contextual_ratio,
    cramers_v,
    cramers_v_table,
    estimate_contextual_means,
    export_association,
    load_association,
    pairwise_cramers_v,
    parse_bands,
    presence_matrix,
    ratio_from_means,
)
from utils.errors import CohortError, ConfigError, NoUsableStrataError
from tests.conftest import VOCAB_SIZE, make_record

BAND = AgeBand(45, 55)


def _groups(*pairs):
    return StratifiedGroups(code=0, pairs=tuple(BandPair(BAND, BAND, exp, non) for exp, non in pairs))


class TestBands:

    def test_half_open(self):
        assert 45 in BAND
        assert 54 in BAND
        assert 55 not in BAND
        assert str(BAND) == '45-55'

    def test_parse(self):
        assert parse_bands("16-45; 45-55") == [AgeBand(16, 45), AgeBand(45, 55)]
        assert len(PAPER_BANDS) == 8
        assert DESK_BANDS[0] == AgeBand(16, 45)

    @pytest.mark.parametrize('text', ["", "45-55; 50-60", "55-60; 45-55", "a-b", "45"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            parse_bands(text)

    def test_empty_band(self):
        with pytest.raises(ConfigError):
            AgeBand(50, 50)


class TestStratification:

    def test_same_band_exposure(self):
        record = make_record(1, [(0, 46), (1, 50)], baseline=54)
        groups = age_stratified_groups([record], 0, PAPER_BANDS)
        pair = next(p for p in groups.pairs if p.incident == BAND and p.baseline == BAND)
        assert pair.exposure == (1,)
        assert groups.exposed_patients() == frozenset({1})

    def test_pairs_cover_upper_triangle(self):
        groups = age_stratified_groups([], 0, PAPER_BANDS)
        assert len(groups.pairs) == 8 * 9 // 2
        assert all(p.baseline.lower >= p.incident.lower for p in groups.pairs)
        assert groups.usable_pairs == []

    def test_membership_matches_brute_force(self, rng):
        records = []
        for pid in range(12):
            baseline = int(rng.integers(40, 93))
            events = [(1, int(rng.integers(30, baseline + 1)))]
            if rng.random() < 0.6:
                events.append((0, int(rng.integers(30, baseline + 1))))
            records.append(make_record(pid, events, baseline=baseline))
        groups = age_stratified_groups(records, 0, PAPER_BANDS, VOCAB_SIZE)
        for pair in groups.pairs:
            exposure = {r.patient_id for r in records
                        if r.first_occurrence_age(0) is not None
                        and r.first_occurrence_age(0) in pair.incident and r.baseline_age in pair.baseline}
            non_exposure = {r.patient_id for r in records
                            if r.first_occurrence_age(0) is None and r.baseline_age in pair.baseline}
            assert set(pair.exposure) == exposure
            assert set(pair.non_exposure) == non_exposure

    def test_unknown_code(self, records):
        with pytest.raises(CohortError):
            age_stratified_groups(records, VOCAB_SIZE, PAPER_BANDS, VOCAB_SIZE)


class TestContextualRatio:

    def test_ratio(self):
        ratio = ratio_from_means({1: -4.5, 2: -9.0}, _groups(((1,), (2,))))
        assert ratio.value == pytest.approx(2.0)
        assert ratio.n_used == 1

    def test_identical_groups(self):
        assert ratio_from_means({1: -3.0, 2: -3.0}, _groups(((1,), (2,)))).value == pytest.approx(1.0)

    def test_empty_pair_skipped(self):
        contextual = {1: -2.0, 2: -4.0, 3: -1.0, 4: -3.0}
        ratio = ratio_from_means(contextual, _groups(((1,), (2,)), ((3,), (4,)), ((), (2,))))
        assert ratio.value == pytest.approx((2.0 + 3.0) / 2)
        assert ratio.n_used == 2
        assert ratio.pairs[2].reason == 'empty_group'

    def test_unusable_pairs(self):
        contextual = {1: -2.0, 2: 1.0, 3: 1e-9, 4: -1.0}
        with pytest.raises(NoUsableStrataError) as info:
            ratio_from_means(contextual, _groups(((1,), (2,)), ((3,), (4,))))
        assert [d.reason for d in info.value.diagnostics] == ['mixed_sign', 'near_zero_exposure']

    def test_scale_invariant(self):
        contextual = {1: -2.0, 2: -5.0, 3: -1.5, 4: -0.5}
        groups = _groups(((1, 3), (2, 4)))
        scaled = {k: 3.0 * v for k, v in contextual.items()}
        assert ratio_from_means(scaled, groups).value == pytest.approx(ratio_from_means(contextual, groups).value)

    def test_from_model(self, micro_student, records):
        groups = age_stratified_groups(records, 2, DESK_BANDS, VOCAB_SIZE)
        assert len(groups.usable_pairs) == 1
        means = estimate_contextual_means(micro_student, records, n_samples=3, seed=2)
        try:
            expected = ratio_from_means(means, groups).value
        except NoUsableStrataError:
            with pytest.raises(NoUsableStrataError):
                contextual_ratio(micro_student, groups, records, n_samples=3, seed=2)
            return
        assert contextual_ratio(micro_student, groups, records, n_samples=3, seed=2).value == pytest.approx(expected)


class TestQuadrants:

    @pytest.mark.parametrize('ratio, coef, expected', [
        (2.0, 0.5, Quadrant.ASSOCIATED),
        (2.0, -0.5, Quadrant.AMBIGUOUS_HIGH_CONTEXT),
        (0.5, 0.5, Quadrant.AMBIGUOUS_HIGH_COEF),
        (0.5, -0.5, Quadrant.DISSOCIATED),
        (None, 0.5, Quadrant.UNDETERMINED),
        (1.0, 0.5, Quadrant.UNDETERMINED),
        (2.0, 0.0, Quadrant.UNDETERMINED),
    ])
    def test_classify(self, ratio, coef, expected):
        assert classify_quadrant(ratio, coef) == expected

    def test_map_covers_vocabulary(self, micro_student, records, vocabulary):
        entries = association_map(micro_student, records, vocabulary, n_samples=2, coefficient_samples=50)
        assert sorted(e.code for e in entries) == list(range(VOCAB_SIZE))
        order = [QUADRANT_ORDER[e.quadrant] for e in entries]
        assert order == sorted(order)
        for entry in entries:
            if entry.contextual_ratio is None:
                assert entry.quadrant == Quadrant.UNDETERMINED
                assert entry.n_band_pairs == 0


class TestExport:

    def test_empty_map_writes_header(self, tmp_path):
        path = str(tmp_path / 'association.csv')
        export_association([], path)
        assert pd.read_csv(path).empty
        assert load_association(path) == []

    def test_round_trip_with_missing_ratio(self, tmp_path):
        entries = [
            AssociationEntry(3, 'A03', 0.8, 0.1, 1.7, 4, Quadrant.ASSOCIATED),
            AssociationEntry(5, 'A05', -0.2, 0.3, None, 0, Quadrant.UNDETERMINED),
        ]
        path = str(tmp_path / 'association.csv')
        written = export_association(entries, path, str(tmp_path / 'association.svg'))
        assert len(written) == 2
        loaded = load_association(path)
        assert loaded == entries
        assert loaded[1].contextual_ratio is None


class TestCramersV:

    def test_half(self):
        assert cramers_v_table([[30, 10], [10, 30]]).value == pytest.approx(0.5)

    def test_perfect(self):
        assert cramers_v_table([[20, 0], [0, 20]]).value == pytest.approx(1.0)

    def test_degenerate(self):
        result = cramers_v_table([[10, 5], [0, 0]])
        assert result.degenerate and result.value == 0.0

    def test_shape(self):
        with pytest.raises(ValueError):
            cramers_v_table(np.ones((2, 3)))

    def test_records(self, records):
        assert cramers_v(records, 0, 1).value == pytest.approx(cramers_v_table([[4, 1], [0, 1]]).value)
        with pytest.raises(CohortError):
            cramers_v([], 0, 1)

    def test_pairwise_matches_chi_square(self, rng):
        presence = (rng.random((40, 5)) < 0.4).astype(float)
        presence[:, 4] = presence[:, 0]
        values = pairwise_cramers_v(presence)
        for a in range(5):
            for b in range(5):
                table = np.zeros((2, 2))
                for row in presence:
                    table[int(row[a]), int(row[b])] += 1
                if np.all(table.sum(axis=0) > 0) and np.all(table.sum(axis=1) > 0):
                    expected = np.sqrt(chi2_contingency(table, correction=False)[0] / 40)
                else:
                    expected = 0.0
                assert values[a, b] == pytest.approx(expected, abs=1e-12)

    def test_audit(self, vocabulary):
        records = [make_record(pid, [(0, 30), (1, 31)]) for pid in range(5)]
        records += [make_record(pid, [(2 + pid % 3, 30)]) for pid in range(5, 11)]
        frame = collinearity_audit(records, vocabulary, threshold=0.6)
        assert list(frame.columns) == ['code_a', 'code_b', 'label_a', 'label_b', 'cramers_v']
        first = frame.iloc[0]
        assert (first.code_a, first.code_b) == (0, 1)
        assert first.cramers_v == pytest.approx(1.0)
        assert frame['cramers_v'].is_monotonic_decreasing
        assert presence_matrix(records, VOCAB_SIZE).sum() == 16


def test_age_histograms(records):
    entries = [
        AssociationEntry(1, 'A01', 0.5, 0.1, 2.0, 1, Quadrant.ASSOCIATED),
        AssociationEntry(2, 'A02', 0.5, 0.1, None, 0, Quadrant.UNDETERMINED),
    ]
    frame = age_histograms(records, entries, DESK_BANDS)
    assert list(frame.columns) == ['code', 'group', 'age_bin', 'count']
    assert set(frame['code']) <= {1}
    exposed = frame[frame['group'] == 'exposure']
    assert exposed['count'].sum() == 2
