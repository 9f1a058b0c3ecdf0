# src/metrics.py
"""
Epidemic metrics: daily series, the infection forest, R_t and the
validation table.
"""
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Set

import networkx as nx
import numpy as np
import pandas as pd

from src.errors import DomainError
from src.world import LocationKind

logger = logging.getLogger(__name__)

SEED_PARENT = -1
SEED_KIND = "seed"
UNIMODAL_DIP_TOLERANCE = 0.10


@dataclass
class DailyMetrics:
    day: int
    new_infections: int
    cumulative_cases: int
    rt_estimate: float
    rt_carried_forward: bool
    mean_contacts_per_agent: float
    hospitalized: int
    icu: int
    tests_performed: int
    quarantined_agent_days: int
    susceptible: int
    exposed: int
    infectious: int
    recovered: int
    canary_alarms: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type is int and isinstance(value, (int, np.integer)) and value < 0:
                raise DomainError(f"{f.name} must be non-negative, got {value}")


METRIC_COLUMNS = [f.name for f in fields(DailyMetrics)]


def metrics_frame(daily):
    return pd.DataFrame([asdict(m) for m in daily], columns=METRIC_COLUMNS)


# ---------------------------------------------------------------------------
# Infection tree
# ---------------------------------------------------------------------------

class InfectionTree:
    """Who infected whom. Nodes carry the day of infection and when the agent
    stopped transmitting; edges carry the location kind of the transmission."""

    def __init__(self):
        self.graph = nx.DiGraph()

    def __len__(self):
        return self.graph.number_of_nodes()

    def __contains__(self, agent_id):
        return agent_id in self.graph

    def add_seed(self, agent_id, day=0, infectious_end=None):
        if agent_id in self.graph:
            raise DomainError(f"agent {agent_id} is already in the infection tree")
        self.graph.add_node(agent_id, day=day, infectious_end=infectious_end, seed=True)

    def add_infection(self, parent, child, day, location_kind, infectious_end=None, via_location=False):
        if child in self.graph:
            raise DomainError(f"agent {child} was already infected")
        if parent not in self.graph:
            raise DomainError(f"infecting agent {parent} is not in the infection tree")
        kind = LocationKind(location_kind).value
        self.graph.add_node(child, day=day, infectious_end=infectious_end, seed=False)
        self.graph.add_edge(parent, child, day=day, location_kind=kind, via_location=via_location)

    def parent(self, child):
        preds = list(self.graph.predecessors(child))
        return preds[0] if preds else None

    def roots(self):
        return sorted(n for n, d in self.graph.in_degree() if d == 0)

    def offspring(self, agent_id):
        return self.graph.out_degree(agent_id)

    def infectious_end(self, agent_id):
        return self.graph.nodes[agent_id]["infectious_end"]

    def is_forest(self):
        if self.graph.number_of_nodes() == 0:
            return True
        return nx.is_branching(self.graph)

    def edges_frame(self):
        rows = []
        for node, attrs in self.graph.nodes(data=True):
            parent = self.parent(node)
            if parent is None:
                rows.append((node, SEED_PARENT, attrs["day"], SEED_KIND))
            else:
                rows.append((node, parent, attrs["day"], self.graph.edges[parent, node]["location_kind"]))
        frame = pd.DataFrame(rows, columns=["child", "parent", "day", "location_kind"])
        return frame.sort_values(["day", "child"], kind="mergesort").reset_index(drop=True)


# ---------------------------------------------------------------------------
# R_t
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RtEstimate:
    value: float
    carried_forward: bool
    cohort_size: int


def estimate_rt(tree, day, window=3, previous=None):
    """Mean offspring of agents whose infectiousness ended during days [day - window, day].

    An empty cohort carries `previous` forward (NaN when there is none) and
    flags it.
    """
    if window < 1:
        raise DomainError(f"R_t window must be at least one day, got {window}")
    cohort = [n for n, end in tree.graph.nodes(data="infectious_end")
              if end is not None and day - window <= math.floor(end) <= day]
    if not cohort:
        value = previous.value if previous is not None else float("nan")
        return RtEstimate(value, True, 0)
    return RtEstimate(float(np.mean([tree.offspring(n) for n in cohort])), False, len(cohort))


# ---------------------------------------------------------------------------
# Run records and validation
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    scenario: str
    seed: int
    intervention_day: int
    daily: List[DailyMetrics]
    tree: InfectionTree
    encounter_count: int = 0
    encounter_transmissions: int = 0
    infected_age_bands: Dict[int, int] = field(default_factory=dict)
    symptomatic: Set[int] = field(default_factory=set)
    tested_positive: Set[int] = field(default_factory=set)
    cluster_purity: float = float("nan")
    canary_alarms: int = 0
    distancing_strength: float = 0.0
    last_day: int = 0

    def frame(self):
        return metrics_frame(self.daily)

    @property
    def final_cases(self):
        return self.daily[-1].cumulative_cases if self.daily else len(self.tree)

    def post_intervention(self):
        return [m for m in self.daily if m.day >= self.intervention_day]

    def mobility(self):
        """Mean daily contacts per agent from the intervention day on."""
        post = self.post_intervention()
        return float(np.mean([m.mean_contacts_per_agent for m in post])) if post else float("nan")

    def mean_rt(self):
        values = [m.rt_estimate for m in self.post_intervention() if not math.isnan(m.rt_estimate)]
        return float(np.mean(values)) if values else float("nan")


def cluster_purity(labelled_logs):
    """Share of contact entries whose cluster's majority sender is their true sender.

    `labelled_logs` holds one list of (cluster id, true sender) pairs per phone.
    """
    total = 0
    agreeing = 0
    for pairs in labelled_logs:
        by_cluster = defaultdict(Counter)
        for cluster_id, sender in pairs:
            by_cluster[cluster_id][sender] += 1
        for senders in by_cluster.values():
            agreeing += senders.most_common(1)[0][1]
            total += sum(senders.values())
    return agreeing / total if total else float("nan")


def is_unimodal(counts, window=3, tolerance=UNIMODAL_DIP_TOLERANCE):
    """Single peak after a centred moving average; wiggles under tolerance x peak are ignored."""
    series = pd.Series(np.asarray(counts, dtype=float))
    if series.empty or series.max() <= 0:
        return True
    smooth = series.rolling(window, center=True, min_periods=1).mean().to_numpy()
    peak_at = int(np.argmax(smooth))
    slack = tolerance * smooth[peak_at]
    rising = smooth[:peak_at + 1]
    falling = smooth[peak_at:]
    if np.any(np.maximum.accumulate(rising) - rising > slack):
        return False
    return not np.any(falling - np.minimum.accumulate(falling) > slack)


def _closed_offspring(tree, last_day):
    """Offspring counts by location kind for agents who stopped transmitting by `last_day`."""
    closed = [n for n, end in tree.graph.nodes(data="infectious_end")
              if end is not None and end <= last_day + 1]
    by_kind = Counter()
    for n in closed:
        for _, _, kind in tree.graph.out_edges(n, data="location_kind"):
            by_kind[kind] += 1
    return len(closed), by_kind


def validation_report(runs):
    """Named metrics pooled over `runs`; returned as an ordered dict of floats."""
    runs = list(runs)
    if not runs:
        raise DomainError("validation needs at least one completed run")
    report = {}

    n_closed = 0
    by_kind = Counter()
    for run in runs:
        closed, kinds = _closed_offspring(run.tree, run.last_day)
        n_closed += closed
        by_kind.update(kinds)
    report["r_overall"] = sum(by_kind.values()) / n_closed if n_closed else 0.0
    for kind in LocationKind:
        report[f"r_{kind.value}"] = by_kind[kind.value] / n_closed if n_closed else 0.0

    encounters = sum(r.encounter_count for r in runs)
    report["encounter_transmission_rate"] = (
        sum(r.encounter_transmissions for r in runs) / encounters if encounters else 0.0)

    symptomatic = sum(len(r.symptomatic) for r in runs)
    positives = sum(len(r.tested_positive) for r in runs)
    report["secondary_attack_rate"] = positives / symptomatic if symptomatic else 0.0

    infected_by_band = Counter()
    symptomatic_by_band = Counter()
    for run in runs:
        for agent_id, band in run.infected_age_bands.items():
            infected_by_band[band] += 1
            if agent_id in run.symptomatic:
                symptomatic_by_band[band] += 1
    for band in range(0, 90, 10):
        n = infected_by_band[band]
        report[f"symptomatic_fraction_age_{band}"] = symptomatic_by_band[band] / n if n else 0.0

    report["infectious_curve_unimodal"] = float(all(
        is_unimodal([m.infectious for m in run.daily]) for run in runs))

    purities = [r.cluster_purity for r in runs if not math.isnan(r.cluster_purity)]
    report["cluster_purity"] = float(np.mean(purities)) if purities else float("nan")
    report["canary_alarms"] = float(sum(r.canary_alarms for r in runs))
    days = [m.tests_performed for r in runs for m in r.daily]
    report["mean_tests_per_day"] = float(np.mean(days)) if days else 0.0
    return report


def report_frame(report):
    return pd.DataFrame({"metric": list(report), "value": list(report.values())})
