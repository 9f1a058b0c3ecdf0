import math
import unittest

import numpy as np

from src.errors import DomainError
from src.metrics import (METRIC_COLUMNS, DailyMetrics, InfectionTree, RunRecord, cluster_purity, estimate_rt,
                         is_unimodal, metrics_frame, report_frame, validation_report)


def daily(day, infectious=0, rt=float("nan"), contacts=1.0, tests=0, **overrides):
    values = dict(day=day, new_infections=0, cumulative_cases=0, rt_estimate=rt, rt_carried_forward=False,
                  mean_contacts_per_agent=contacts, hospitalized=0, icu=0, tests_performed=tests,
                  quarantined_agent_days=0, susceptible=10, exposed=0, infectious=infectious, recovered=0)
    values.update(overrides)
    return DailyMetrics(**values)


def branching_tree(mean_offspring, n_seeds, min_nodes, seed):
    """Poisson branching process; generation g stops transmitting at day g + 0.5."""
    rng = np.random.default_rng(seed)
    tree = InfectionTree()
    generation = list(range(n_seeds))
    for agent in generation:
        tree.add_seed(agent, day=0, infectious_end=0.5)
    next_id, g = n_seeds, 0
    while len(tree) < min_nodes:
        children = []
        for parent in generation:
            for _ in range(rng.poisson(mean_offspring)):
                tree.add_infection(parent, next_id, g + 1, "household", infectious_end=g + 1.5)
                children.append(next_id)
                next_id += 1
        generation, g = children, g + 1
    return tree, g


class TestDailyMetrics(unittest.TestCase):
    def test_counts_are_non_negative(self):
        with self.assertRaises(DomainError):
            daily(0, hospitalized=-1)
        with self.assertRaises(DomainError):
            daily(0, new_infections=np.int64(-2))

    def test_frame_columns(self):
        frame = metrics_frame([daily(0), daily(1)])
        self.assertEqual(list(frame.columns), METRIC_COLUMNS)
        self.assertEqual(frame["day"].tolist(), [0, 1])


class TestInfectionTree(unittest.TestCase):
    def test_each_agent_infected_once(self):
        tree = InfectionTree()
        tree.add_seed(0)
        tree.add_infection(0, 1, 2, "store")
        with self.assertRaises(DomainError):
            tree.add_infection(0, 1, 3, "park")
        with self.assertRaises(DomainError):
            tree.add_infection(7, 2, 3, "park")
        with self.assertRaises(DomainError):
            tree.add_seed(1)
        self.assertTrue(tree.is_forest())
        self.assertEqual(tree.parent(1), 0)
        self.assertEqual(tree.roots(), [0])

    def test_edges_frame(self):
        tree = InfectionTree()
        tree.add_seed(4)
        tree.add_seed(2)
        tree.add_infection(4, 9, 3, "workplace", via_location=True)
        frame = tree.edges_frame()
        self.assertEqual(frame.values.tolist(), [[2, -1, 0, "seed"], [4, -1, 0, "seed"], [9, 4, 3, "workplace"]])


class TestRt(unittest.TestCase):
    def test_branching_process_recovers_offspring_mean(self):
        tree, last_generation = branching_tree(1.7, n_seeds=200, min_nodes=10_000, seed=3)
        self.assertTrue(tree.is_forest())
        # the newest generation has not transmitted yet
        estimate = estimate_rt(tree, day=last_generation - 1, window=last_generation)
        self.assertFalse(estimate.carried_forward)
        self.assertAlmostEqual(estimate.value, 1.7, delta=0.1)

    def test_window_selects_cohort(self):
        tree = InfectionTree()
        tree.add_seed(0, infectious_end=2.5)
        tree.add_seed(1, infectious_end=9.2)
        tree.add_infection(0, 2, 1, "park", infectious_end=None)
        tree.add_infection(0, 3, 1, "park", infectious_end=None)
        self.assertEqual(estimate_rt(tree, 3, window=3), estimate_rt(tree, 2, window=1))
        self.assertEqual(estimate_rt(tree, 3, window=3).value, 2.0)
        self.assertEqual(estimate_rt(tree, 10, window=3).value, 0.0)

    def test_empty_cohort_carries_forward(self):
        tree = InfectionTree()
        tree.add_seed(0, infectious_end=1.0)
        first = estimate_rt(tree, 20, window=3)
        self.assertTrue(first.carried_forward)
        self.assertTrue(math.isnan(first.value))
        previous = estimate_rt(tree, 1, window=3)
        carried = estimate_rt(tree, 20, window=3, previous=previous)
        self.assertEqual((carried.value, carried.carried_forward, carried.cohort_size), (0.0, True, 0))
        with self.assertRaises(DomainError):
            estimate_rt(tree, 1, window=0)


class TestShapes(unittest.TestCase):
    def test_unimodal(self):
        self.assertTrue(is_unimodal([0, 1, 3, 7, 12, 9, 5, 2, 1, 0]))
        self.assertTrue(is_unimodal([0, 0, 0]))
        self.assertTrue(is_unimodal([]))
        self.assertFalse(is_unimodal([0, 10, 10, 0, 0, 0, 0, 10, 10, 0]))

    def test_cluster_purity(self):
        self.assertAlmostEqual(cluster_purity([[(0, "a"), (0, "a"), (0, "b"), (1, "c")]]), 0.75)
        self.assertAlmostEqual(cluster_purity([[(0, 1)], [(0, 2), (0, 2)]]), 1.0)
        self.assertTrue(math.isnan(cluster_purity([])))


class TestValidationReport(unittest.TestCase):
    def _run(self):
        tree = InfectionTree()
        tree.add_seed(0, infectious_end=5.0)
        tree.add_infection(0, 1, 2, "household", infectious_end=8.0)
        tree.add_infection(0, 2, 3, "store", infectious_end=None)
        days = [daily(d, infectious=i, rt=r, contacts=c, tests=d % 2)
                for d, (i, r, c) in enumerate([(1, float("nan"), 4.0), (2, 1.5, 3.0), (2, float("nan"), 2.0),
                                                (1, 2.5, 1.0)])]
        return RunRecord("unmitigated", 0, 2, days, tree, encounter_count=40, encounter_transmissions=2,
                         infected_age_bands={0: 30, 1: 30, 2: 70}, symptomatic={0}, tested_positive={0},
                         cluster_purity=0.8, last_day=10)

    def test_run_record_helpers(self):
        run = self._run()
        self.assertEqual(run.mobility(), 1.5)
        self.assertEqual(run.mean_rt(), 2.5)
        self.assertEqual(len(run.frame()), 4)

    def test_report_values(self):
        report = validation_report([self._run()])
        self.assertEqual(report["r_overall"], 1.0)
        self.assertEqual(report["r_household"], 0.5)
        self.assertEqual(report["r_store"], 0.5)
        self.assertEqual(report["encounter_transmission_rate"], 0.05)
        self.assertEqual(report["secondary_attack_rate"], 1.0)
        self.assertEqual(report["symptomatic_fraction_age_30"], 0.5)
        self.assertEqual(report["symptomatic_fraction_age_70"], 0.0)
        self.assertEqual(report["infectious_curve_unimodal"], 1.0)
        self.assertAlmostEqual(report["cluster_purity"], 0.8)
        self.assertEqual(report["mean_tests_per_day"], 0.5)
        frame = report_frame(report)
        self.assertEqual(list(frame.columns), ["metric", "value"])

    def test_empty(self):
        with self.assertRaises(DomainError):
            validation_report([])


if __name__ == "__main__":
    unittest.main()
