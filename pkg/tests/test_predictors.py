import copy
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from src.predictors import (MAX_UNTESTED_SCORE, POSITIVE_TEST_SCORE, HeuristicPredictor, NullPredictor,
                            Predictor, entry_infection_probability, exposure_kernel, get_predictor, list_predictors,
                            symptom_kernel, symptom_strength)
from src.errors import DomainError
from src.risk import ContactLogEntry, PhoneData, estimate_contagiousness
from src.world import DistanceBand

TODAY = 20


def empty_data():
    data = PhoneData(age_band=40, sex="female", conditions=frozenset(), is_healthcare_worker=False)
    data.day_cursor = TODAY
    return data


def contact(day, level=15, duration=45.0, band=DistanceBand.CLOSE):
    return ContactLogEntry(day=day, duration=duration, distance_band=band, received_level=level,
                           level_history=[level])


class TestRegistry(unittest.TestCase):
    def test_lookup(self):
        self.assertIn("heuristic", list_predictors())
        self.assertIn("null", list_predictors())
        self.assertIsInstance(get_predictor("heuristic", cluster=False), HeuristicPredictor)
        self.assertIsInstance(get_predictor("null"), Predictor)

    def test_unknown(self):
        with self.assertRaises(ValueError) as ctx:
            get_predictor("oracle")
        self.assertIn("Unknown predictor", str(ctx.exception))


class TestKernels(unittest.TestCase):
    def test_symptom_kernel_support(self):
        self.assertEqual(symptom_kernel(-4), 0.0)
        self.assertEqual(symptom_kernel(-3), 0.5)
        self.assertEqual(symptom_kernel(0), 1.0)
        self.assertEqual(symptom_kernel(8), 0.0)

    def test_exposure_kernel_support(self):
        self.assertEqual(exposure_kernel(-1), 0.0)
        self.assertEqual(exposure_kernel(0), 0.25)
        self.assertEqual(exposure_kernel(5), 1.0)
        self.assertEqual(exposure_kernel(12), 0.5)
        self.assertEqual(exposure_kernel(13), 0.0)

    def test_symptom_strength(self):
        self.assertEqual(symptom_strength(frozenset()), 0.0)
        self.assertGreater(symptom_strength({"fever", "anosmia"}), symptom_strength({"runny_nose", "sneezing"}))
        # cold-like symptoms count half unless both fever and anosmia are present
        self.assertAlmostEqual(symptom_strength({"cough"}), 1.0 - np.exp(-0.25))
        self.assertAlmostEqual(symptom_strength({"cough", "fever", "anosmia"}), 1.0 - np.exp(-2.8))

    def test_far_contacts_carry_no_evidence(self):
        self.assertEqual(entry_infection_probability(contact(5, band=DistanceBand.FAR)), 0.0)
        self.assertEqual(entry_infection_probability(contact(5, level=0)), 0.0)
        self.assertAlmostEqual(entry_infection_probability(contact(5)), 0.5)


class TestNullPredictor(unittest.TestCase):
    def test_constant_baseline(self):
        scores = NullPredictor(cluster=False).predict(empty_data())
        self.assertEqual(len(scores), 15)
        np.testing.assert_allclose(scores, expit(-4.6))


class FixedPredictor:
    def __init__(self, scores):
        self.scores = scores

    def predict(self, data):
        return self.scores


class TestEstimateContagiousness(unittest.TestCase):
    def test_passes_valid_scores_through(self):
        scores = estimate_contagiousness(empty_data(), HeuristicPredictor())
        self.assertEqual(scores.shape, (15,))

    def test_rejects_wrong_length(self):
        with self.assertRaises(DomainError):
            estimate_contagiousness(empty_data(), FixedPredictor([0.1] * 14))

    def test_rejects_out_of_range(self):
        with self.assertRaises(DomainError):
            estimate_contagiousness(empty_data(), FixedPredictor([0.1] * 14 + [1.2]))


class TestHeuristicPredictor(unittest.TestCase):
    def test_no_evidence_is_baseline(self):
        scores = HeuristicPredictor().predict(empty_data())
        np.testing.assert_allclose(scores, NullPredictor().predict(empty_data()))

    def test_contact_raises_following_days(self):
        data = empty_data()
        data.contact_log.append(contact(10))
        scores = HeuristicPredictor().predict(data)
        days = np.arange(TODAY - 14, TODAY + 1)
        baseline = expit(-4.6)
        self.assertTrue(np.all(scores[days < 10] == baseline))
        self.assertTrue(np.all(scores[days >= 11] > scores[days == 10]))

    def test_symptoms_raise_scores(self):
        data = empty_data()
        data.symptoms_by_day[15] = frozenset({"fever", "anosmia"})
        scores = HeuristicPredictor().predict(data)
        days = np.arange(TODAY - 14, TODAY + 1)
        self.assertTrue(np.all(scores[(days >= 13) & (days <= 20)] > expit(-4.6)))
        self.assertTrue(np.all(scores[days < 12] == expit(-4.6)))

    def test_positive_test_pins_scores(self):
        data = empty_data()
        data.test_results.append((15, True))
        scores = HeuristicPredictor().predict(data)
        days = np.arange(TODAY - 14, TODAY + 1)
        self.assertTrue(np.all(scores[days >= 8] >= POSITIVE_TEST_SCORE))
        self.assertTrue(np.all(scores[days < 8] < 0.5))

    def test_negative_test_halves_earlier_evidence(self):
        data = empty_data()
        data.contact_log.append(contact(10))
        before = HeuristicPredictor().predict(data)
        data.test_results.append((16, False))
        after = HeuristicPredictor().predict(data)
        days = np.arange(TODAY - 14, TODAY + 1)
        self.assertTrue(np.all(after[(days > 10) & (days <= 16)] < before[(days > 10) & (days <= 16)]))
        np.testing.assert_allclose(after[days > 16], before[days > 16])

    def test_clustering_counts_one_person_once(self):
        data = empty_data()
        data.contact_log.extend([contact(10), contact(10)])
        clustered = HeuristicPredictor(cluster=True).predict(copy.deepcopy(data))
        unclustered = HeuristicPredictor(cluster=False).predict(copy.deepcopy(data))
        single = empty_data()
        single.contact_log.append(contact(10))
        np.testing.assert_allclose(clustered, HeuristicPredictor().predict(single))
        self.assertTrue(np.all(unclustered[5:] > clustered[5:]))

    def test_scores_in_unit_interval(self):
        data = empty_data()
        for d in range(6, 21):
            data.contact_log.append(contact(d, duration=300.0))
            data.symptoms_by_day[d] = frozenset({"fever", "anosmia", "cough", "difficulty_breathing"})
        scores = HeuristicPredictor().predict(data)
        self.assertTrue(np.all((scores >= 0) & (scores <= 1)))
        self.assertLessEqual(scores.max(), MAX_UNTESTED_SCORE)
        self.assertLess(MAX_UNTESTED_SCORE, POSITIVE_TEST_SCORE)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(6, 20), st.integers(0, 15), st.floats(5, 120),
                              st.sampled_from(list(DistanceBand))), max_size=12),
           st.integers(6, 20))
    def test_extra_high_risk_contact_never_lowers_scores(self, entries, extra_day):
        data = empty_data()
        for day, level, duration, band in entries:
            data.contact_log.append(contact(day, level=level, duration=duration, band=band))
        before = HeuristicPredictor().predict(copy.deepcopy(data))
        data.contact_log.append(contact(extra_day, level=15))
        after = HeuristicPredictor().predict(copy.deepcopy(data))
        self.assertTrue(np.all(after >= before - 1e-12))


if __name__ == "__main__":
    unittest.main()
