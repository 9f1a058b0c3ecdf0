import os
import shutil
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from src.errors import ConfigError, DomainError
from src.predictors import BASELINE_LOGIT, NullPredictor
from src.risk import (RECOMMENDATION_BEHAVIOUR, ContactLogEntry, Phone, PhoneData, QuantizerThresholds,
                      ReferenceSample, RiskLevel, apply_recommendation, cluster_contacts, contact_distance,
                      keyed_tie_breaks, quantize, quantize_many, recommendation_level, reference_sample_path,
                      should_send_update)
from src.world import NO_BEHAVIOUR_CHANGE, Agent, DistanceBand


def make_agent(has_app=True):
    return Agent(id=1, age=34, sex="male", preexisting_conditions=frozenset({"obesity"}), carefulness=0.4,
                 is_healthcare_worker=False, has_app=has_app, mask_propensity=0.5, household_id=0,
                 workplace_id=3, home_zone_id=1)


class TestRiskLevel(unittest.TestCase):
    def test_range(self):
        self.assertEqual(int(RiskLevel(15)), 15)
        with self.assertRaises(DomainError):
            RiskLevel(16)
        with self.assertRaises(DomainError):
            RiskLevel(-1)


class TestQuantizer(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_validation(self):
        with self.assertRaises(ConfigError):
            QuantizerThresholds((0.1, 0.2))
        cuts = list(QuantizerThresholds.uniform().cuts)
        cuts[3], cuts[4] = cuts[4], cuts[3]
        with self.assertRaises(ConfigError):
            QuantizerThresholds(tuple(cuts))
        with self.assertRaises(ConfigError) as ctx:
            QuantizerThresholds((0.0,) + QuantizerThresholds.uniform().cuts[1:])
        self.assertEqual(ctx.exception.field, "risk.thresholds")

    def test_equal_mass_from_reference(self):
        scores = np.random.default_rng(0).random(1_000_000)
        thresholds = QuantizerThresholds.from_reference(scores)
        for k, cut in enumerate(thresholds.cuts, start=1):
            self.assertAlmostEqual(cut, k / 16, delta=0.02)
        masses = thresholds.bin_masses(scores)
        self.assertTrue(np.all(masses >= 0.8 / 16))
        self.assertTrue(np.all(masses <= 1.2 / 16))

    def test_skewed_reference_stays_increasing(self):
        scores = np.concatenate([np.full(10_000, 0.01), np.random.default_rng(1).random(500)])
        thresholds = QuantizerThresholds.from_reference(scores)
        self.assertTrue(all(b > a for a, b in zip(thresholds.cuts, thresholds.cuts[1:])))

    def test_atom_heavy_reference_needs_tie_breaks(self):
        rng = np.random.default_rng(4)
        scores = np.concatenate([np.full(40_000, expit(BASELINE_LOGIT)), np.full(30_000, 0.995), rng.random(30_000)])
        ties = rng.random(scores.size)
        plain = QuantizerThresholds.from_reference(scores)
        self.assertGreater(plain.bin_masses(scores).max(), 0.3)
        thresholds = QuantizerThresholds.from_reference(scores, ties)
        masses = thresholds.bin_masses(scores, ties)
        self.assertTrue(np.all(masses >= 0.05), masses)
        self.assertTrue(np.all(masses <= 0.075), masses)

    def test_single_valued_reference_spreads_over_levels(self):
        rng = np.random.default_rng(5)
        scores = np.full(16_000, 0.2)
        ties = rng.random(scores.size)
        thresholds = QuantizerThresholds.from_reference(scores, ties)
        masses = thresholds.bin_masses(scores, ties)
        self.assertTrue(np.all(np.abs(masses - 1 / 16) < 0.005), masses)
        self.assertEqual(quantize_many([0.1, 0.3], thresholds, [0.5, 0.5]).tolist(), [0, 15])

    def test_tie_break_shape_checked(self):
        with self.assertRaises(DomainError):
            QuantizerThresholds.from_reference([0.1, 0.2], [0.5])

    def test_empty_reference(self):
        with self.assertRaises(DomainError):
            QuantizerThresholds.from_reference([])

    def test_load_skips_comments(self):
        path = os.path.join(self.tmp, "cuts.txt")
        with open(path, "w") as f:
            f.write("# equal-mass cuts\n")
            for k in range(1, 16):
                f.write(f"{k / 16}  # level {k}\n")
        self.assertEqual(QuantizerThresholds.load(path), QuantizerThresholds.uniform())

    def test_save_then_load(self):
        path = os.path.join(self.tmp, "saved.txt")
        thresholds = QuantizerThresholds.from_reference(np.random.default_rng(2).beta(0.5, 8.0, 20_000))
        thresholds.save(path)
        self.assertEqual(QuantizerThresholds.load(path), thresholds)

    def test_save_keeps_tied_cuts_apart(self):
        path = os.path.join(self.tmp, "tied.txt")
        thresholds = QuantizerThresholds.from_reference(np.full(1000, 0.01))
        thresholds.save(path)
        self.assertEqual(QuantizerThresholds.load(path), thresholds)

    def test_reference_sample_save_then_load(self):
        rng = np.random.default_rng(6)
        sample = ReferenceSample(rng.beta(0.5, 8.0, 3000), rng.random(3000))
        path = reference_sample_path(os.path.join(self.tmp, "quantizer_thresholds.txt"))
        self.assertEqual(path, os.path.join(self.tmp, "quantizer_thresholds.reference.npz"))
        sample.save(path)
        loaded = ReferenceSample.load(path)
        self.assertEqual(len(loaded), 3000)
        np.testing.assert_array_equal(loaded.scores, sample.scores)
        np.testing.assert_array_equal(loaded.tie_breaks, sample.tie_breaks)
        self.assertEqual(loaded.fit(), sample.fit())
        with self.assertRaises(DomainError):
            ReferenceSample(np.zeros(3), np.zeros(2))

    def test_keyed_tie_breaks(self):
        ties = keyed_tie_breaks(7, range(-14, 1))
        np.testing.assert_array_equal(ties, keyed_tie_breaks(7, range(-14, 1)))
        self.assertTrue(np.all((ties >= 0.0) & (ties < 1.0)))
        self.assertEqual(len(set(ties.tolist())), 15)
        self.assertFalse(np.array_equal(ties, keyed_tie_breaks(8, range(-14, 1))))

    def test_quantize_edges(self):
        thresholds = QuantizerThresholds.uniform()
        self.assertEqual(quantize(0.0, thresholds), 0)
        self.assertEqual(quantize(1.0, thresholds), 15)
        self.assertEqual(quantize(1 / 16, thresholds), 1)
        for bad in (-0.01, 1.01, float("nan")):
            with self.assertRaises(DomainError):
                quantize(bad, thresholds)
        with self.assertRaises(DomainError):
            quantize_many([0.2, 1.5], thresholds)

    def test_representatives_map_to_their_bin(self):
        thresholds = QuantizerThresholds.from_reference(np.random.default_rng(3).beta(0.5, 5.0, 50_000))
        for level, value in enumerate(thresholds.representatives()):
            self.assertEqual(quantize(value, thresholds), level)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_quantize_is_monotone(self, a, b):
        thresholds = QuantizerThresholds.uniform()
        lo, hi = sorted((a, b))
        self.assertLessEqual(quantize(lo, thresholds), quantize(hi, thresholds))


class TestUpdatesAndRecommendations(unittest.TestCase):
    def test_should_send_update(self):
        old = {1: 0, 2: 3, 3: 5}
        new = {1: 0, 2: 4, 3: 5, 4: 1}
        self.assertEqual(should_send_update(old, new), {2, 4})
        self.assertEqual(should_send_update(new, new), set())

    def test_recommendation_tiers(self):
        expected = {0: 1, 1: 1, 2: 2, 3: 2, 4: 3, 5: 3}
        for level in range(16):
            self.assertEqual(recommendation_level(level), expected.get(level, 4))
        with self.assertRaises(DomainError):
            recommendation_level(16)

    def test_apply_recommendation(self):
        self.assertIs(apply_recommendation(make_agent(), 4), RECOMMENDATION_BEHAVIOUR[4])
        self.assertTrue(apply_recommendation(make_agent(), 4).work_from_home)
        self.assertIs(apply_recommendation(make_agent(has_app=False), 4), NO_BEHAVIOUR_CHANGE)
        with self.assertRaises(DomainError):
            apply_recommendation(make_agent(), 5)

    def test_tiers_only_add_restrictions(self):
        for rec in (1, 2, 3):
            weaker, stronger = RECOMMENDATION_BEHAVIOUR[rec], RECOMMENDATION_BEHAVIOUR[rec + 1]
            self.assertGreaterEqual(stronger.mask_outside_household, weaker.mask_outside_household)
            self.assertLessEqual(stronger.duration_factor, weaker.duration_factor)
            self.assertLessEqual(stronger.outing_factor, weaker.outing_factor)


class TestContactClustering(unittest.TestCase):
    def _entry(self, day, duration=30.0, history=(), arrival=None):
        return ContactLogEntry(day=day, duration=duration, distance_band=DistanceBand.CLOSE,
                               level_history=list(history), arrival_day_of_last_update=arrival)

    def test_identical_entries_share_a_cluster(self):
        log = [self._entry(3, history=(4, 9)), self._entry(3, history=(4, 9))]
        self.assertEqual(contact_distance(log[0], log[1]), 0.0)
        self.assertEqual(cluster_contacts(log), [0, 0])
        self.assertEqual([e.cluster_id for e in log], [0, 0])

    def test_diverging_histories_split(self):
        log = [self._entry(3, history=(15,)), self._entry(3, history=(0,)), self._entry(3, history=(15,))]
        self.assertEqual(cluster_contacts(log), [0, 1, 0])

    def test_earlier_assignments_are_stable(self):
        log = [self._entry(d, history=(d % 3,)) for d in range(6)]
        first = cluster_contacts(log[:4])
        self.assertEqual(cluster_contacts(log)[:4], first)


class TestPhone(unittest.TestCase):
    def setUp(self):
        self.phone = Phone(1, PhoneData.for_agent(make_agent()), NullPredictor(), QuantizerThresholds.uniform())

    def test_for_agent(self):
        data = self.phone.data
        self.assertEqual(data.age_band, 30)
        self.assertEqual(data.conditions, frozenset({"obesity"}))

    def test_first_update_sends_every_day(self):
        update = self.phone.update(20)
        self.assertEqual(sorted(update.levels), list(range(6, 21)))
        self.assertEqual(update.changed, frozenset(range(6, 21)))
        self.assertEqual(update.today_level, 0)
        self.assertEqual(update.recommendation, 1)
        self.assertEqual(len(self.phone.last_scores), 15)

    def test_unchanged_levels_send_nothing(self):
        self.phone.update(20)
        self.assertEqual(self.phone.update(20).changed, frozenset())
        self.assertEqual(self.phone.update(21).changed, frozenset({21}))

    def test_receive_update(self):
        entry = self.phone.log_contact(5, 30, "medium", zone_id=2)
        self.assertIs(entry.distance_band, DistanceBand.MEDIUM)
        self.phone.receive_update(entry, 9, 0, arrival_day=7)
        self.phone.receive_update(entry, 12, 9, arrival_day=8)
        self.assertEqual(entry.level_history, [9, 12])
        self.assertEqual((entry.received_level, entry.prior_level, entry.arrival_day_of_last_update), (12, 9, 8))
        with self.assertRaises(DomainError):
            self.phone.receive_update(entry, 16, 12, arrival_day=9)

    def test_tied_scores_keep_their_level_across_days(self):
        ties = np.random.default_rng(7).random(16_000)
        thresholds = QuantizerThresholds.from_reference(np.full(ties.size, expit(BASELINE_LOGIT)), ties)
        phone = Phone(1, PhoneData.for_agent(make_agent()), NullPredictor(), thresholds)
        first = phone.update(20)
        self.assertGreater(len(set(first.levels.values())), 1)
        second = phone.update(21)
        self.assertEqual(second.changed, frozenset({21}))
        for day in range(7, 21):
            self.assertEqual(second.levels[day], first.levels[day])

    def test_purge_drops_old_contacts(self):
        for day in (1, 5, 10, 20):
            self.phone.log_contact(day, 15, "close")
        self.phone.observe_symptoms(2, {"cough"})
        self.phone.observe_symptoms(3, set())
        self.assertNotIn(3, self.phone.data.symptoms_by_day)
        dropped = self.phone.data.purge(today=20)
        self.assertEqual(dropped, 2)
        self.assertEqual([e.day for e in self.phone.data.contact_log], [10, 20])
        self.assertEqual(self.phone.data.symptoms_by_day, {})


if __name__ == "__main__":
    unittest.main()
