import numpy as np
import pytest

from cohort.encoding import age_id, encode_batch, encode_multihot, encode_sequence
from cohort.generator import PatientRecord
from utils.errors import CohortError
from tests.conftest import VOCAB_SIZE, make_record


class TestMultihot:

    def test_repetitions_collapse(self):
        bits = encode_multihot(make_record(0, [(2, 30), (2, 31), (5, 32)]), 6)
        np.testing.assert_array_equal(bits, [0, 0, 1, 0, 0, 1])

    def test_order_free(self):
        a = make_record(0, [(1, 30), (3, 31), (4, 32)])
        b = PatientRecord(0, tuple(reversed(a.encounters)), 32, 0)
        np.testing.assert_array_equal(encode_multihot(a, 6), encode_multihot(b, 6))

    def test_empty_record_gives_zeros(self):
        np.testing.assert_array_equal(encode_multihot(PatientRecord(0, (), 40, 0), 4), np.zeros(4))

    def test_out_of_range(self):
        with pytest.raises(CohortError):
            encode_multihot(make_record(0, [(7, 30)]), 6)


class TestSequence:

    def test_order_preserved(self):
        seq = encode_sequence(make_record(0, [(3, 20), (1, 25), (2, 30)]), max_len=256)
        assert seq.code_ids == (3, 1, 2)
        assert seq.age_ids == (4, 9, 14)

    def test_truncation_keeps_most_recent(self):
        events = [(i % 7, 16 + i // 4) for i in range(300)]
        record = make_record(0, events)
        seq = encode_sequence(record, max_len=256)
        assert len(seq) == 256
        expected = sorted(record.encounters, key=lambda e: e.age)[-256:]
        assert seq.code_ids == tuple(e.code for e in expected)

    def test_ties_keep_record_order(self):
        record = make_record(0, [(5, 30), (2, 30), (4, 30)])
        assert encode_sequence(record).code_ids == (5, 2, 4)

    def test_empty_rejected(self):
        with pytest.raises(CohortError):
            encode_sequence(PatientRecord(0, (), 40, 0))

    def test_age_range(self):
        assert age_id(16) == 0
        assert age_id(100) == 84
        with pytest.raises(CohortError):
            age_id(101)


class TestBatch:

    def test_padding_and_mask(self, records):
        batch = encode_batch(records[:2], VOCAB_SIZE)
        assert batch.size == 2
        assert batch.max_len == 3
        np.testing.assert_array_equal(batch.lengths, [3, 2])
        np.testing.assert_array_equal(batch.mask, [[1, 1, 1], [1, 1, 0]])
        np.testing.assert_array_equal(batch.labels, [1, 0])
        assert batch.multihot.shape == (2, VOCAB_SIZE)

    def test_empty_batch(self):
        with pytest.raises(CohortError):
            encode_batch([], VOCAB_SIZE)
