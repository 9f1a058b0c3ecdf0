"""Pilot-scale checks. Slow; run with COVISIM_SLOW=1."""
import math
import os
import unittest
import warnings

import numpy as np

from src.case_utils import get_case_config_path
from src.policies import SCENARIO_LABELS, Scenario
from src.risk import QuantizerThresholds, ReferenceSample, reference_sample_path
from src.scenarios import compare, mean_post_intervention_rt, run_many
from src.util import build_run_definition

SLOW = os.environ.get("COVISIM_SLOW") == "1"
SEEDS = [0, 1, 2, 3, 4]


@unittest.skipUnless(SLOW, "set COVISIM_SLOW=1 to run pilot-scale checks")
class TestPilotAcceptance(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.definition = build_run_definition(get_case_config_path("pilot1000"), verbose=False)

    def test_shipped_thresholds_have_equal_masses(self):
        path = os.path.join(os.path.dirname(self.definition.config_path), self.definition.risk.thresholds_file)
        self.assertEqual(QuantizerThresholds.load(path), self.definition.thresholds)
        masses = ReferenceSample.load(reference_sample_path(path)).bin_masses(self.definition.thresholds)
        self.assertTrue(np.all(masses >= 0.8 / 16), masses)
        self.assertTrue(np.all(masses <= 1.2 / 16), masses)

    def test_unmitigated_rt(self):
        runs = run_many(self.definition, Scenario.unmitigated(), SEEDS, threads=4)
        rt = mean_post_intervention_rt(runs)
        self.assertFalse(math.isnan(rt))
        self.assertGreaterEqual(rt, 2.0)
        self.assertLessEqual(rt, 2.6)

    def test_scenario_ordering(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            result = compare(self.definition, SEEDS, threads=4)
        for label, eq in result.equalization.items():
            self.assertLessEqual(eq.gap, self.definition.scenario.equalization_tolerance, label)
        self.assertEqual(result.verdict, "holds")
        summary = result.summary()["scenarios"]
        self.assertEqual(list(summary), SCENARIO_LABELS)
        self.assertLess(summary["risk_app"]["mean_rt_post_intervention"],
                        summary["binary_tracing_2"]["mean_rt_post_intervention"])
        finals = [summary[label]["final_cases_mean"] for label in SCENARIO_LABELS]
        self.assertTrue(np.all(np.diff(finals) < 0))


if __name__ == "__main__":
    unittest.main()
