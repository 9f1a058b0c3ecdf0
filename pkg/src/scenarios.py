# src/scenarios.py
"""
Scenario harness: single runs, mobility equalization, the five-way comparison
and base-rate calibration.

Runs are independent (each owns its world and random streams), so they fan
out over a thread pool.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List

import numpy as np
import pandas as pd

from src.errors import ConvergenceError, DomainError
from src.metrics import RunRecord
from src.policies import RiskAppPolicy, Scenario, ScenarioKind
from src.risk import QuantizerThresholds, ReferenceSample
from src.simulation import Simulation

logger = logging.getLogger(__name__)

MIN_SEEDS_FOR_VERDICT = 3
PLOT_COLUMNS = ["day", "scenario", "cumulative_cases", "rt"]


def run_scenario(definition, scenario, seed, intervention_day=None):
    """One complete run; returns its RunRecord."""
    return Simulation(definition, scenario, seed=seed, intervention_day=intervention_day).run()


def run_many(definition, scenario, seeds, threads=1, intervention_day=None):
    seeds = list(seeds)
    if threads <= 1 or len(seeds) <= 1:
        return [run_scenario(definition, scenario, s, intervention_day) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda s: run_scenario(definition, scenario, s, intervention_day), seeds))


def mean_mobility(runs):
    return float(np.mean([r.mobility() for r in runs]))


# ---------------------------------------------------------------------------
# Mobility equalization
# ---------------------------------------------------------------------------

@dataclass
class EqualizationResult:
    scenario: Scenario
    target: float
    achieved: float
    converged: bool
    steps: int
    runs: List[RunRecord] = field(default_factory=list, repr=False)
    reason: str = ""

    @property
    def strength(self):
        return self.scenario.distancing_strength

    @property
    def gap(self):
        return abs(self.achieved - self.target) / self.target if self.target > 0 else 0.0


def _within(achieved, target, tolerance):
    if target <= 0:
        return achieved <= 0
    return abs(achieved - target) / target <= tolerance


def equalize_scenario(definition, scenario, target, seeds, tolerance=0.02, max_steps=40, threads=1):
    """Bisect `scenario`'s distancing strength until its mobility matches `target`.

    Mobility falls as strength rises, so the search keeps [lo, hi] with
    mobility(lo) above and mobility(hi) below the target. When the scenario's
    own behaviour already holds mobility below the target at zero strength
    the search stops there and says so in `reason`.
    """
    if scenario.kind is ScenarioKind.UNMITIGATED:
        raise DomainError("the unmitigated scenario has no distancing knob to equalize")
    runs = run_many(definition, scenario, seeds, threads)
    achieved = mean_mobility(runs)
    if _within(achieved, target, tolerance):
        return EqualizationResult(scenario, target, achieved, True, 0, runs)

    if achieved < target:
        floor_scenario = scenario.with_strength(0.0)
        floor_runs = runs
        if scenario.distancing_strength > 0.0:
            floor_runs = run_many(definition, floor_scenario, seeds, threads)
        floor = mean_mobility(floor_runs)
        if _within(floor, target, tolerance):
            return EqualizationResult(floor_scenario, target, floor, True, 1, floor_runs)
        if floor < target:
            logger.info("EQUALIZATION_BELOW_TARGET_AT_ZERO", extra={
                "scenario": scenario.label, "target": target, "achieved": floor})
            return EqualizationResult(
                floor_scenario, target, floor, False, 0, floor_runs,
                reason="mobility is below the target even with no distancing")

    lo, hi = 0.0, 1.0
    best = EqualizationResult(scenario, target, achieved, False, 0, runs)
    for step in range(1, max_steps + 1):
        mid = 0.5 * (lo + hi)
        candidate = scenario.with_strength(mid)
        runs = run_many(definition, candidate, seeds, threads)
        achieved = mean_mobility(runs)
        result = EqualizationResult(candidate, target, achieved, False, step, runs)
        if result.gap < best.gap:
            best = result
        if _within(achieved, target, tolerance):
            result.converged = True
            return result
        if achieved > target:
            lo = mid
        else:
            hi = mid
    best.steps = max_steps
    return best


def equalize_mobility(definition, scenarios, seeds, target=None, tolerance=None, max_steps=None,
                      threads=1, strict=False):
    """Distancing strengths that give every scenario the same post-intervention mobility.

    The target defaults to the social-distancing scenario's own mobility at
    the configured strength.
    """
    cfg = definition.scenario
    tolerance = cfg.equalization_tolerance if tolerance is None else tolerance
    max_steps = cfg.max_bisection_steps if max_steps is None else max_steps
    seeds = list(seeds)
    if any(s.kind is ScenarioKind.UNMITIGATED for s in scenarios):
        raise DomainError("equalization excludes the unmitigated scenario")
    reference = None
    if target is None:
        reference_scenario = Scenario.social_distancing(cfg.distancing_strength)
        reference_runs = run_many(definition, reference_scenario, seeds, threads)
        target = mean_mobility(reference_runs)
        reference = EqualizationResult(reference_scenario, target, target, True, 0, reference_runs)

    results = {}
    for scenario in scenarios:
        if reference is not None and scenario == reference.scenario:
            results[scenario.label] = reference
            continue
        result = equalize_scenario(definition, scenario, target, seeds, tolerance, max_steps, threads)
        if not result.converged:
            logger.warning("EQUALIZATION_NOT_CONVERGED", extra={
                "scenario": scenario.label, "target": target, "achieved": result.achieved,
                "gap": result.gap, "steps": result.steps, "reason": result.reason})
            if strict:
                detail = result.reason or f"after {result.steps} bisection steps"
                raise ConvergenceError(
                    f"{scenario.label}: mobility {result.achieved:.4f} vs target {target:.4f} "
                    f"(gap {result.gap:.2%}) {detail}")
        results[scenario.label] = result
    return results


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

def comparison_scenarios(definition, predictor=None):
    strength = definition.scenario.distancing_strength
    return [
        Scenario.unmitigated(),
        Scenario.social_distancing(strength),
        Scenario.binary_tracing(1, strength),
        Scenario.binary_tracing(2, strength),
        Scenario.risk_app(predictor or definition.risk.predictor, strength),
    ]


def ordering_verdict(final_cases_by_label, labels, n_seeds):
    """'holds' when mean final cases strictly decrease along `labels`."""
    if n_seeds < MIN_SEEDS_FOR_VERDICT:
        return "insufficient seeds"
    values = [final_cases_by_label[label] for label in labels]
    return "holds" if all(a > b for a, b in zip(values, values[1:])) else "violated"


def plot_data(runs_by_label):
    """Seed-averaged curves, one row per (day, scenario)."""
    frames = []
    for label, runs in runs_by_label.items():
        frame = pd.concat([r.frame()[["day", "cumulative_cases", "rt_estimate"]] for r in runs])
        mean = frame.groupby("day", sort=True).mean().reset_index()
        mean.insert(1, "scenario", label)
        frames.append(mean.rename(columns={"rt_estimate": "rt"}))
    if not frames:
        return pd.DataFrame(columns=PLOT_COLUMNS)
    return pd.concat(frames, ignore_index=True)[PLOT_COLUMNS]


@dataclass
class ComparisonResult:
    runs: Dict[str, List[RunRecord]]
    equalization: Dict[str, EqualizationResult]
    seeds: List[int]
    verdict: str

    def summary(self):
        scenarios = {}
        for label, runs in self.runs.items():
            eq = self.equalization.get(label)
            scenarios[label] = {
                "final_cases_mean": float(np.mean([r.final_cases for r in runs])),
                "final_cases": [int(r.final_cases) for r in runs],
                "mean_rt_post_intervention": _nan_to_none(mean_post_intervention_rt(runs)),
                "mobility": float(np.mean([r.mobility() for r in runs])),
                "distancing_strength": runs[0].distancing_strength,
                "equalization_converged": None if eq is None else eq.converged,
                "equalization_gap": None if eq is None else eq.gap,
                "equalization_note": None if eq is None or not eq.reason else eq.reason,
            }
        return {"seeds": list(self.seeds), "verdict": self.verdict, "scenarios": scenarios}

    def plot_frame(self):
        return plot_data(self.runs)


def _nan_to_none(value):
    return None if math.isnan(value) else value


def compare(definition, seeds, threads=1, strict=False, predictor=None):
    """All five scenarios over `seeds`, distancing strengths equalized on mobility."""
    seeds = list(seeds)
    scenarios = comparison_scenarios(definition, predictor)
    equalization = equalize_mobility(definition, scenarios[1:], seeds, threads=threads, strict=strict)
    runs = {scenarios[0].label: run_many(definition, scenarios[0], seeds, threads)}
    for scenario in scenarios[1:]:
        runs[scenario.label] = equalization[scenario.label].runs
    final = {label: float(np.mean([r.final_cases for r in rs])) for label, rs in runs.items()}
    verdict = ordering_verdict(final, [s.label for s in scenarios], len(seeds))
    logger.info("COMPARISON_DONE", extra={"verdict": verdict, "final_cases": final})
    return ComparisonResult(runs, equalization, seeds, verdict)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationResult:
    base_rate: float
    mean_rt: float
    converged: bool
    steps: int


def mean_post_intervention_rt(runs):
    values = [r.mean_rt() for r in runs if not math.isnan(r.mean_rt())]
    return float(np.mean(values)) if values else float("nan")


def calibrate_base_rate(definition, seeds, target=(2.0, 2.6), max_steps=20, threads=1, upper=None):
    """Bisect the base transmission rate until unmitigated mean R_t lands in `target`."""
    low_target, high_target = target
    if not 0 < low_target < high_target:
        raise DomainError(f"R_t target must be an increasing positive pair, got {target}")
    seeds = list(seeds)
    lo = 0.0
    hi = upper if upper is not None else 4.0 * max(definition.disease.base_rate, 1e-3)
    base = definition.disease.base_rate
    rt = float("nan")
    for step in range(1, max_steps + 1):
        trial = replace(definition, disease=replace(definition.disease, base_rate=base))
        rt = mean_post_intervention_rt(run_many(trial, Scenario.unmitigated(), seeds, threads))
        logger.info("CALIBRATION_STEP", extra={"step": step, "base_rate": base, "rt": rt})
        if low_target <= rt <= high_target:
            return CalibrationResult(base, rt, True, step)
        if math.isnan(rt) or rt < low_target:
            lo = base
        else:
            hi = base
        base = 0.5 * (lo + hi)
    return CalibrationResult(base, rt, False, max_steps)


def collect_reference_scores(definition, seed, intervention_day=0):
    """Raw predictor scores and tie-breaks from a shadow risk-app run on the unmitigated epidemic."""
    scenario = Scenario.unmitigated()
    shadow_scenario = Scenario.risk_app(definition.risk.predictor)
    sim = Simulation(definition, scenario, seed=seed, intervention_day=intervention_day,
                     policy_factory=lambda s: RiskAppPolicy(s, shadow_scenario, shadow=True))
    sim.run()
    policy = sim.policy
    if not policy.reference_scores:
        raise DomainError("the calibration run produced no predictor scores")
    return ReferenceSample(np.concatenate(policy.reference_scores), np.concatenate(policy.reference_tie_breaks))


def fit_thresholds(definition, seed, intervention_day=0, rounds=1):
    """Equal-mass cut points and the sample they were fitted on.

    Received levels feed back into the scores, so the first shadow run uses
    uniform cuts rather than whatever the definition carries; each further
    round reruns with the previous fit.
    """
    if rounds < 1:
        raise DomainError(f"rounds must be at least 1, got {rounds}")
    thresholds = QuantizerThresholds.uniform()
    sample = None
    for round_no in range(1, rounds + 1):
        trial = replace(definition, thresholds=thresholds)
        sample = collect_reference_scores(trial, seed, intervention_day)
        fitted = sample.fit()
        shift = float(np.max(np.abs(np.subtract(fitted.cuts, thresholds.cuts))))
        logger.info("THRESHOLDS_FITTED", extra={"round": round_no, "samples": len(sample), "max_cut_shift": shift})
        thresholds = fitted
    return thresholds, sample
