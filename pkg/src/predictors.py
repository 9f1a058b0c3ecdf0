# src/predictors.py
"""
Contagiousness predictors.

A predictor maps PhoneData to 15 scores in [0, 1], one per day from
`day_cursor - 14` up to today. Implementations register themselves by name,
so a learned model can replace the heuristic without touching the phone or
the simulator.
"""
import logging
import math
from typing import Protocol, runtime_checkable

import numpy as np
from scipy.special import expit

from src.risk import CLUSTER_THRESHOLD, WINDOW_DAYS, cluster_contacts

logger = logging.getLogger(__name__)

_PREDICTORS = {}


def register_predictor(name):
    """Decorator to register a predictor class under `name`."""
    def decorator(cls):
        _PREDICTORS[name] = cls
        cls.name = name
        return cls
    return decorator


def get_predictor(name, **kwargs):
    if name not in _PREDICTORS:
        raise ValueError(f"Unknown predictor: {name}. Available: {sorted(_PREDICTORS)}")
    return _PREDICTORS[name](**kwargs)


def list_predictors():
    return sorted(_PREDICTORS)


@runtime_checkable
class Predictor(Protocol):
    def predict(self, data) -> np.ndarray:
        """Scores for days data.day_cursor-14 .. data.day_cursor."""
        ...


BASELINE_LOGIT = -4.6
EVIDENCE_SLOPE = 2.0
# Evidence alone never reaches the score of a positive test.
MAX_UNTESTED_SCORE = 0.98
POSITIVE_TEST_SCORE = 0.995


@register_predictor("null")
class NullPredictor:
    """Always the no-evidence score. Accepts and ignores heuristic options."""

    def __init__(self, **options):
        self.options = options

    def predict(self, data):
        return np.full(WINDOW_DAYS + 1, float(expit(BASELINE_LOGIT)))


SYMPTOM_WEIGHTS = {
    "anosmia": 1.5,
    "fever": 0.8,
    "difficulty_breathing": 0.8,
    "cough": 0.5,
    "chills": 0.4,
    "diarrhea": 0.3,
    "muscle_pain": 0.3,
    "fatigue": 0.3,
    "headache": 0.2,
    "sore_throat": 0.2,
    "runny_nose": 0.1,
    "sneezing": 0.1,
}
# Symptoms a cold or flu produces just as readily.
COLD_FLU_SHARED = frozenset({"cough", "sore_throat", "runny_nose", "sneezing",
                             "headache", "fatigue", "muscle_pain", "chills"})
BAND_WEIGHTS = {"close": 1.0, "medium": 0.5, "far": 0.0}


def symptom_strength(symptoms):
    if not symptoms:
        return 0.0
    discount = not ({"fever", "anosmia"} <= set(symptoms))
    total = sum(SYMPTOM_WEIGHTS.get(s, 0.0) * (0.5 if discount and s in COLD_FLU_SHARED else 1.0)
                for s in symptoms)
    return 1.0 - math.exp(-total)


def symptom_kernel(lag):
    """Contagiousness on day d given symptoms on day s, lag = d - s."""
    if lag == -3:
        return 0.5
    if -2 <= lag <= 7:
        return 1.0
    return 0.0


def exposure_kernel(lag):
    """Contagiousness on day d given exposure on day e, lag = d - e."""
    if lag == 0:
        return 0.25
    if 1 <= lag <= 10:
        return 1.0
    if 11 <= lag <= 12:
        return 0.5
    return 0.0


def entry_infection_probability(entry):
    level = entry.received_level / 15.0
    band = getattr(entry.distance_band, "value", entry.distance_band)
    return 0.5 * level ** 1.5 * min(1.0, entry.duration / 45.0) * BAND_WEIGHTS[band]


@register_predictor("heuristic")
class HeuristicPredictor:
    """Deterministic evidence combination.

    Symptoms and received contact levels are turned into per-day probabilities
    of being contagious, combined by noisy-OR, and mapped through a logistic.
    Contacts are grouped into putative persons first, so repeated contacts with
    one person count once per day. A positive test overrides everything from
    the inferred infection window onwards.
    """

    def __init__(self, cluster=True, cluster_threshold=CLUSTER_THRESHOLD):
        self.cluster = cluster
        self.cluster_threshold = cluster_threshold

    def _exposure_by_day(self, data):
        if self.cluster:
            cluster_contacts(data.contact_log, self.cluster_threshold)
        strongest = {}
        for index, entry in enumerate(data.contact_log):
            key = (entry.cluster_id if entry.cluster_id is not None else ("solo", index), entry.day)
            p = entry_infection_probability(entry)
            if p > strongest.get(key, 0.0):
                strongest[key] = p
        escape = {}
        for (_, day), p in strongest.items():
            escape[day] = escape.get(day, 1.0) * (1.0 - p)
        return {day: 1.0 - e for day, e in escape.items()}

    def predict(self, data):
        today = data.day_cursor
        days = np.arange(today - WINDOW_DAYS, today + 1)

        exposure = self._exposure_by_day(data)
        contact = np.zeros(len(days))
        for i, d in enumerate(days):
            escape = 1.0
            for e, p in exposure.items():
                escape *= 1.0 - exposure_kernel(d - e) * p
            contact[i] = 1.0 - escape

        strengths = {s: symptom_strength(sym) for s, sym in data.symptoms_by_day.items() if sym}
        symptoms = np.zeros(len(days))
        for i, d in enumerate(days):
            for s, strength in strengths.items():
                symptoms[i] = max(symptoms[i], symptom_kernel(d - s) * strength)

        negatives = [d for d, positive in data.test_results if not positive]
        if negatives:
            last_negative = max(negatives)
            mask = days <= last_negative
            contact[mask] *= 0.5
            symptoms[mask] *= 0.5

        combined = 1.0 - (1.0 - contact) * (1.0 - symptoms)
        evidence = -np.log(np.clip(1.0 - combined, 1e-12, 1.0))
        scores = np.minimum(expit(BASELINE_LOGIT + EVIDENCE_SLOPE * evidence), MAX_UNTESTED_SCORE)

        positives = [d for d, positive in data.test_results if positive]
        if positives:
            test_day = min(positives)
            symptom_days = [s for s, sym in data.symptoms_by_day.items() if sym]
            start = min(symptom_days) - 3 if symptom_days else test_day - 7
            scores = np.where(days >= start, np.maximum(scores, POSITIVE_TEST_SCORE), scores)
        return np.clip(scores, 0.0, 1.0)
