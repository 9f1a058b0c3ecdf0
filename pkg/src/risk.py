# src/risk.py
"""
On-phone risk bookkeeping.

Phones only ever see app-observable data (own symptoms, own test results and
day-granular contact entries carrying the levels received from the other
phone). A pluggable predictor (src/predictors.py) turns that into 15 daily
contagiousness scores, which are quantized to 4-bit risk levels. A level that
changes for some day triggers update messages to that day's contacts, and
today's level maps to one of four recommendation tiers.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DomainError
from src.world import NO_BEHAVIOUR_CHANGE, BehaviourModifiers, DistanceBand

logger = logging.getLogger(__name__)

WINDOW_DAYS = 14
N_LEVELS = 16
CLUSTER_THRESHOLD = 0.35
# Scores tied to within this width are ordered by their keyed tie-break.
TIE_BREAK_WIDTH = 1e-7


class RiskLevel(int):
    """4-bit risk level, 0..15."""

    def __new__(cls, value):
        value = int(value)
        if not 0 <= value < N_LEVELS:
            raise DomainError(f"risk level must lie in 0..{N_LEVELS - 1}, got {value}")
        return super().__new__(cls, value)

    def __repr__(self):
        return f"RiskLevel({int(self)})"


@dataclass(frozen=True)
class QuantizerThresholds:
    cuts: Tuple[float, ...]

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        object.__setattr__(self, "cuts", cuts)
        if len(cuts) != N_LEVELS - 1:
            raise ConfigError("risk.thresholds", f"expected {N_LEVELS - 1} cut points, got {len(cuts)}")
        if not all(0.0 < c < 1.0 for c in cuts):
            raise ConfigError("risk.thresholds", "cut points must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigError("risk.thresholds", "cut points must be strictly increasing")

    @classmethod
    def from_reference(cls, scores, tie_breaks=None):
        """Equal-mass bins from a reference score sample.

        Predictor outputs have point masses (every no-evidence phone-day scores
        the same), so cuts are placed on tie-broken keys; pass the same
        tie-breaks to bin_masses() and quantize_many().
        """
        scores = np.asarray(scores, dtype=float)
        if scores.size == 0:
            raise DomainError("reference sample is empty")
        keys = quantization_keys(scores, tie_breaks)
        cuts = np.clip(np.quantile(keys, np.arange(1, N_LEVELS) / N_LEVELS), 1e-12, 1.0 - 1e-12)
        for i in range(1, len(cuts)):
            if cuts[i] <= cuts[i - 1]:
                cuts[i] = np.nextafter(cuts[i - 1], 1.0)
        return cls(tuple(cuts.tolist()))

    @classmethod
    def uniform(cls):
        return cls(tuple(k / N_LEVELS for k in range(1, N_LEVELS)))

    @classmethod
    def load(cls, path):
        values = []
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                values.append(float(line))
        return cls(tuple(values))

    def save(self, path):
        Path(path).write_text("".join(f"{c:.17g}\n" for c in self.cuts))

    def representatives(self):
        """Midpoint of every bin; quantize() maps each back to its own level."""
        edges = (0.0, *self.cuts, 1.0)
        return [0.5 * (lo + hi) for lo, hi in zip(edges, edges[1:])]

    def bin_masses(self, scores, tie_breaks=None):
        levels = quantize_many(scores, self, tie_breaks)
        return np.bincount(levels, minlength=N_LEVELS) / max(len(levels), 1)


@dataclass(frozen=True)
class ReferenceSample:
    """Raw predictor scores with their tie-breaks, the input to threshold fitting."""
    scores: np.ndarray
    tie_breaks: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float).ravel()
        ties = np.asarray(self.tie_breaks, dtype=float).ravel()
        if scores.shape != ties.shape:
            raise DomainError(f"{scores.size} scores but {ties.size} tie-breaks")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "tie_breaks", ties)

    def __len__(self):
        return len(self.scores)

    def fit(self):
        return QuantizerThresholds.from_reference(self.scores, self.tie_breaks)

    def bin_masses(self, thresholds):
        return thresholds.bin_masses(self.scores, self.tie_breaks)

    def save(self, path):
        np.savez_compressed(path, scores=self.scores, tie_breaks=self.tie_breaks)

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            return cls(f["scores"], f["tie_breaks"])


def reference_sample_path(thresholds_path):
    """Where the sample a thresholds file was fitted on is kept."""
    return str(Path(thresholds_path).with_suffix(".reference.npz"))


@dataclass(frozen=True)
class RiskConfig:
    predictor: str = "heuristic"
    thresholds_file: Optional[str] = None
    calibrate_if_missing: bool = False
    cluster_threshold: float = CLUSTER_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.cluster_threshold <= 1.0:
            raise ConfigError("risk.cluster_threshold", f"must lie in (0, 1], got {self.cluster_threshold}")


def quantize(score, thresholds):
    score = float(score)
    if math.isnan(score) or not 0.0 <= score <= 1.0:
        raise DomainError(f"score must lie in [0, 1], got {score}")
    return RiskLevel(int(np.searchsorted(thresholds.cuts, score, side="right")))


def keyed_tie_breaks(agent_id, days):
    """Keyed uniforms in [0, 1), one per (agent, day); a day keeps its value on every recomputation."""
    return np.array([int.from_bytes(hashlib.blake2b(f"{agent_id}:{d}".encode(), digest_size=8).digest(), "big")
                     for d in days], dtype=float) / 2.0 ** 64


def quantization_keys(scores, tie_breaks=None):
    scores = np.asarray(scores, dtype=float)
    if tie_breaks is None:
        return scores
    tie_breaks = np.asarray(tie_breaks, dtype=float)
    if tie_breaks.shape != scores.shape:
        raise DomainError(f"tie-breaks shape {tie_breaks.shape} does not match scores {scores.shape}")
    return scores - TIE_BREAK_WIDTH * tie_breaks


def quantize_many(scores, thresholds, tie_breaks=None):
    scores = np.asarray(scores, dtype=float)
    if np.isnan(scores).any() or (scores < 0).any() or (scores > 1).any():
        raise DomainError("scores must lie in [0, 1]")
    keys = quantization_keys(scores, tie_breaks)
    return np.searchsorted(thresholds.cuts, keys, side="right").astype(int)


def should_send_update(old, new):
    """Days whose quantized level differs from what was last sent."""
    return {day for day, level in new.items() if old.get(day) != level}


# ---------------------------------------------------------------------------
# Phone-side data
# ---------------------------------------------------------------------------

@dataclass
class ContactLogEntry:
    """One encounter as the phone remembers it: day-granular, no sender identity."""
    day: int
    duration: float
    distance_band: DistanceBand
    received_level: int = 0
    prior_level: Optional[int] = None
    arrival_day_of_last_update: Optional[int] = None
    cluster_id: Optional[int] = None
    level_history: List[int] = field(default_factory=list)
    zone_id: Optional[int] = None
    token: Optional[bytes] = None


@dataclass
class PhoneData:
    age_band: int
    sex: str
    conditions: FrozenSet[str]
    is_healthcare_worker: bool
    symptoms_by_day: Dict[int, FrozenSet[str]] = field(default_factory=dict)
    test_results: List[Tuple[int, bool]] = field(default_factory=list)
    contact_log: List[ContactLogEntry] = field(default_factory=list)
    day_cursor: int = 0

    @classmethod
    def for_agent(cls, agent):
        return cls(agent.age_band, agent.sex, agent.preexisting_conditions, agent.is_healthcare_worker)

    def purge(self, today, horizon=WINDOW_DAYS):
        """Forget everything older than `horizon` days; returns the number of contact entries dropped."""
        cutoff = today - horizon
        self.symptoms_by_day = {d: s for d, s in self.symptoms_by_day.items() if d >= cutoff}
        self.test_results = [(d, p) for d, p in self.test_results if d >= cutoff]
        before = len(self.contact_log)
        self.contact_log = [e for e in self.contact_log if e.day >= cutoff]
        return before - len(self.contact_log)


# ---------------------------------------------------------------------------
# Clustering of incoming contacts into putative persons
# ---------------------------------------------------------------------------

def _hamming(a, b):
    if not a and not b:
        return 0.0
    n = max(len(a), len(b))
    pad_a = list(a) + [a[-1] if a else 0] * (n - len(a))
    pad_b = list(b) + [b[-1] if b else 0] * (n - len(b))
    return sum(x != y for x, y in zip(pad_a, pad_b)) / n


def contact_distance(a, b):
    """Feature distance between two log entries (0 = indistinguishable)."""
    arrival_a = a.day if a.arrival_day_of_last_update is None else a.arrival_day_of_last_update
    arrival_b = b.day if b.arrival_day_of_last_update is None else b.arrival_day_of_last_update
    ratio = max(a.duration, 1.0) / max(b.duration, 1.0)
    return (0.5 * _hamming(a.level_history, b.level_history)
            + 0.15 * min(1.0, abs(arrival_a - arrival_b) / 2.0)
            + 0.1 * min(1.0, abs(math.log2(ratio)) / 3.0)
            + 0.05 * abs(a.day - b.day))


def cluster_contacts(log, threshold=CLUSTER_THRESHOLD):
    """Founder-greedy clustering in log order; sets and returns cluster ids.

    An entry joins the first cluster whose founder lies within `threshold`,
    otherwise it founds a new cluster. Earlier assignments never depend on
    later entries.
    """
    founders = []
    assignment = []
    for entry in log:
        for cluster_id, founder in enumerate(founders):
            if contact_distance(founder, entry) <= threshold:
                break
        else:
            cluster_id = len(founders)
            founders.append(entry)
        entry.cluster_id = cluster_id
        assignment.append(cluster_id)
    return assignment


# ---------------------------------------------------------------------------
# Recommendations
# ---------------------------------------------------------------------------

def recommendation_level(level):
    level = RiskLevel(level)
    if level <= 1:
        return 1
    if level <= 3:
        return 2
    if level <= 5:
        return 3
    return 4


RECOMMENDATION_BEHAVIOUR = {
    1: BehaviourModifiers(hygiene=True),
    2: BehaviourModifiers(hygiene=True, mask_outside_household=True, keep_distance=True),
    3: BehaviourModifiers(hygiene=True, mask_outside_household=True, keep_distance=True,
                          duration_factor=0.5, explore=False),
    4: BehaviourModifiers(hygiene=True, mask_outside_household=True, keep_distance=True,
                          duration_factor=0.5, explore=False, outing_factor=0.1,
                          work_from_home=True, request_test=True, single_stop=True),
}


def apply_recommendation(agent, rec):
    if rec not in RECOMMENDATION_BEHAVIOUR:
        raise DomainError(f"recommendation level must be 1..4, got {rec}")
    if not agent.has_app:
        return NO_BEHAVIOUR_CHANGE
    return RECOMMENDATION_BEHAVIOUR[rec]


# ---------------------------------------------------------------------------
# Phone
# ---------------------------------------------------------------------------

def estimate_contagiousness(data, predictor):
    """Scores for data.day_cursor-14 .. data.day_cursor from any predictor."""
    scores = np.asarray(predictor.predict(data), dtype=float)
    if scores.shape != (WINDOW_DAYS + 1,):
        raise DomainError(f"predictor returned shape {scores.shape}, expected ({WINDOW_DAYS + 1},)")
    if np.isnan(scores).any() or (scores < 0).any() or (scores > 1).any():
        raise DomainError("scores must lie in [0, 1]")
    return scores


@dataclass(frozen=True)
class PhoneUpdate:
    levels: Dict[int, RiskLevel]
    changed: FrozenSet[int]
    today_level: RiskLevel
    recommendation: int


class Phone:
    def __init__(self, agent_id, data, predictor, thresholds):
        self.agent_id = agent_id
        self.data = data
        self.predictor = predictor
        self.thresholds = thresholds
        self.sent_levels: Dict[int, RiskLevel] = {}
        self.last_scores = None
        self.last_tie_breaks = None

    def observe_symptoms(self, day, symptoms):
        if symptoms:
            self.data.symptoms_by_day[day] = frozenset(symptoms)

    def observe_test(self, result):
        self.data.test_results.append((result.day, bool(result.positive)))

    def log_contact(self, day, duration, distance_band, zone_id=None, token=None):
        entry = ContactLogEntry(day=day, duration=float(duration), distance_band=DistanceBand(distance_band),
                                zone_id=zone_id, token=token)
        self.data.contact_log.append(entry)
        return entry

    def receive_update(self, entry, new_level, prior_level, arrival_day):
        entry.prior_level = None if prior_level is None else int(prior_level)
        entry.received_level = int(RiskLevel(new_level))
        entry.arrival_day_of_last_update = arrival_day
        entry.level_history.append(entry.received_level)

    def level_for(self, day):
        return self.sent_levels.get(day, RiskLevel(0))

    def update(self, day):
        self.data.day_cursor = day
        self.data.purge(day)
        scores = estimate_contagiousness(self.data, self.predictor)
        days = range(day - WINDOW_DAYS, day + 1)
        ties = keyed_tie_breaks(self.agent_id, days)
        self.last_scores, self.last_tie_breaks = scores, ties
        levels = {d: RiskLevel(q) for d, q in zip(days, quantize_many(scores, self.thresholds, ties))}
        changed = frozenset(should_send_update(self.sent_levels, levels))
        self.sent_levels = dict(levels)
        today = levels[day]
        return PhoneUpdate(levels, changed, today, recommendation_level(today))
