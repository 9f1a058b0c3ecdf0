# src/disease.py
"""
Within-host disease course and between-host transmission.

Contents:
    ViralLoadCurve / viral_load      three-piece linear contagiousness profile
    sample_disease_course            severity flags, curve, symptom onset
    infectiousness / transmit        encounter transmission
    environmental_exposures          residual location hazard after a visit
    sample_symptoms                  per-day symptom draw by curve stage
    TestingLab / run_test            lab tests with turnaround and capacity
    BackgroundIllness                weekly cold/flu noise
    CareUnits                        hospital and ICU beds with a FIFO queue

Time inside this module is measured in (fractional) days since simulation
start; `t` arguments named `t_since` are days since infection.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Optional

import numpy as np
from scipy import stats

from src.errors import ConfigError, DomainError, DuplicateTestError
from src.world import (DistanceBand, LocationKind, SLEEP_SLOT, SLOTS_PER_DAY, WAKE_SLOT)

logger = logging.getLogger(__name__)


class Status(str, Enum):
    SUSCEPTIBLE = "susceptible"
    EXPOSED = "exposed"
    INFECTIOUS = "infectious"
    RECOVERED = "recovered"   # includes deceased


SYMPTOMS = (
    "fever", "cough", "fatigue", "anosmia", "sore_throat", "headache",
    "muscle_pain", "runny_nose", "sneezing", "difficulty_breathing",
    "diarrhea", "chills",
)

# Per-stage prevalence of each symptom among symptomatic cases. Calibration
# defaults, not clinical estimates.
DEFAULT_SYMPTOM_PREVALENCE = {
    "rise": {
        "fever": 0.30, "cough": 0.30, "fatigue": 0.30, "anosmia": 0.15,
        "sore_throat": 0.20, "headache": 0.25, "muscle_pain": 0.15, "runny_nose": 0.10,
        "sneezing": 0.05, "difficulty_breathing": 0.05, "diarrhea": 0.05, "chills": 0.10,
    },
    "plateau": {
        "fever": 0.60, "cough": 0.55, "fatigue": 0.50, "anosmia": 0.40,
        "sore_throat": 0.25, "headache": 0.35, "muscle_pain": 0.30, "runny_nose": 0.10,
        "sneezing": 0.05, "difficulty_breathing": 0.20, "diarrhea": 0.10, "chills": 0.25,
    },
    "decay": {
        "fever": 0.20, "cough": 0.40, "fatigue": 0.45, "anosmia": 0.30,
        "sore_throat": 0.10, "headache": 0.15, "muscle_pain": 0.15, "runny_nose": 0.05,
        "sneezing": 0.03, "difficulty_breathing": 0.10, "diarrhea": 0.05, "chills": 0.05,
    },
}

DEFAULT_COLD_PREVALENCE = {
    "fever": 0.10, "cough": 0.50, "fatigue": 0.30, "anosmia": 0.02,
    "sore_throat": 0.50, "headache": 0.30, "muscle_pain": 0.15, "runny_nose": 0.70,
    "sneezing": 0.60, "difficulty_breathing": 0.02, "diarrhea": 0.03, "chills": 0.10,
}

DEFAULT_SEVERITY_MODIFIERS = {
    "asymptomatic_under_20": 1.25,
    "asymptomatic_70_plus": 0.75,
    "really_sick_under_20": 0.3,
    "really_sick_70_plus": 2.0,
    "really_sick_per_condition": 1.5,
    "fatal_70_plus": 5.0,
    "fatal_with_condition": 2.0,
}


def _gaussian(mean, sd):
    return {"mean": mean, "sd": sd}


@dataclass(frozen=True)
class DiseaseConfig:
    base_rate: float = 0.045
    asymptomatic_probability: float = 0.40
    asymptomatic_infectiousness: float = 0.1
    really_sick_probability: float = 0.15
    extremely_sick_probability: float = 0.30
    fatal_probability: float = 0.002
    cougher_probability: float = 0.5
    cough_multiplier: float = 1.5
    mask_efficacy_healthcare: float = 0.98
    mask_efficacy_other: float = 0.32
    hygiene_factor: float = 0.8
    duration_cap: float = 8.0
    distance_factors: Dict[str, float] = field(
        default_factory=lambda: {"close": 1.0, "medium": 0.3, "far": 0.0})
    incubation_days: Dict[str, float] = field(default_factory=lambda: _gaussian(2.5, 1.0))
    rise_days: Dict[str, float] = field(default_factory=lambda: _gaussian(2.5, 1.0))
    plateau_days: Dict[str, float] = field(default_factory=lambda: _gaussian(5.0, 1.5))
    decay_days: Dict[str, float] = field(default_factory=lambda: _gaussian(5.0, 1.5))
    symptom_onset_days: Dict[str, float] = field(default_factory=lambda: _gaussian(2.5, 1.0))
    truncation_days: float = 0.5
    plateau_height_min: float = 0.5
    plateau_height_max: float = 0.9
    background_illness_fraction: float = 0.01
    background_illness_days: int = 7
    environmental_transmission: bool = True
    environmental_rate: float = 0.002
    environmental_decay_slots: int = 4
    clinical_test_probability: float = 0.15
    symptom_prevalence: Dict[str, Dict[str, float]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_SYMPTOM_PREVALENCE.items()})
    cold_prevalence: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COLD_PREVALENCE))
    severity_modifiers: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SEVERITY_MODIFIERS))

    def __post_init__(self):
        for name in ("asymptomatic_probability", "asymptomatic_infectiousness", "really_sick_probability",
                     "extremely_sick_probability", "fatal_probability", "cougher_probability",
                     "mask_efficacy_healthcare", "mask_efficacy_other", "hygiene_factor",
                     "background_illness_fraction", "clinical_test_probability", "environmental_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"disease.{name}", f"must lie in [0, 1], got {value}")
        if self.base_rate < 0:
            raise ConfigError("disease.base_rate", "must be non-negative")
        if self.fatal_probability > self.really_sick_probability:
            raise ConfigError("disease.fatal_probability", "fatal cases are a subset of really sick cases")
        if self.really_sick_probability > 1.0 - self.asymptomatic_probability:
            raise ConfigError("disease.really_sick_probability", "really sick cases are a subset of symptomatic cases")
        if self.cough_multiplier < 1.0:
            raise ConfigError("disease.cough_multiplier", "must be at least 1")
        if self.truncation_days <= 0:
            raise ConfigError("disease.truncation_days", "must be positive")
        if not 0 < self.plateau_height_min <= self.plateau_height_max <= 1.0:
            raise ConfigError("disease.plateau_height_min", "plateau heights must satisfy 0 < min <= max <= 1")
        if self.environmental_decay_slots < 1:
            raise ConfigError("disease.environmental_decay_slots", "must be at least 1")
        for band in DistanceBand:
            if band.value not in self.distance_factors:
                raise ConfigError(f"disease.distance_factors.{band.value}", "missing")
        if self.distance_factors["far"] != 0.0:
            raise ConfigError("disease.distance_factors.far", "far contacts never transmit")
        for stage in ("rise", "plateau", "decay"):
            if stage not in self.symptom_prevalence:
                raise ConfigError(f"disease.symptom_prevalence.{stage}", "missing stage table")
        for table_name, table in [*(("symptom_prevalence." + k, v) for k, v in self.symptom_prevalence.items()),
                                  ("cold_prevalence", self.cold_prevalence)]:
            for symptom, p in table.items():
                if symptom not in SYMPTOMS:
                    raise ConfigError(f"disease.{table_name}.{symptom}", "unknown symptom")
                if not 0.0 <= p <= 1.0:
                    raise ConfigError(f"disease.{table_name}.{symptom}", f"must lie in [0, 1], got {p}")


@dataclass(frozen=True)
class TestConfig:
    false_positive_rate: float = 0.0
    false_negative_rate: float = 0.10
    turnaround_days: int = 2
    daily_capacity: Optional[int] = None

    def __post_init__(self):
        for name in ("false_positive_rate", "false_negative_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"testing.{name}", f"must lie in [0, 1], got {value}")
        if self.turnaround_days < 0:
            raise ConfigError("testing.turnaround_days", "must be non-negative")
        if self.daily_capacity is not None and self.daily_capacity < 0:
            raise ConfigError("testing.daily_capacity", "must be non-negative")


# ---------------------------------------------------------------------------
# Viral load
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViralLoadCurve:
    incubation_days: float
    rise_days: float
    plateau_height: float
    plateau_days: float
    decay_days: float

    @property
    def peak_start(self):
        return self.incubation_days + self.rise_days

    @property
    def peak_end(self):
        return self.peak_start + self.plateau_days

    @property
    def end_days(self):
        return self.peak_end + self.decay_days

    def stage(self, t_since):
        if t_since < self.incubation_days:
            return "incubation"
        if t_since < self.peak_start:
            return "rise"
        if t_since < self.peak_end:
            return "plateau"
        if t_since < self.end_days:
            return "decay"
        return "over"


def viral_load(curve, t_since):
    """Load in [0, plateau_height] at `t_since` days after infection."""
    if t_since < 0 or np.isnan(t_since):
        raise DomainError(f"time since infection must be non-negative, got {t_since}")
    if t_since <= curve.incubation_days or t_since >= curve.end_days:
        return 0.0
    if t_since < curve.peak_start:
        return curve.plateau_height * (t_since - curve.incubation_days) / curve.rise_days
    if t_since <= curve.peak_end:
        return curve.plateau_height
    return curve.plateau_height * (curve.end_days - t_since) / curve.decay_days


def plateau_height(age, cfg):
    """Linear in age decile: min below 20, max from 80."""
    band = int(np.clip(age // 10, 1, 8))
    return cfg.plateau_height_min + (cfg.plateau_height_max - cfg.plateau_height_min) * (band - 1) / 7.0


class CurveSampler:
    """Frozen truncated Gaussians for the curve and symptom-onset durations."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._dists = {}
        for name in ("incubation_days", "rise_days", "plateau_days", "decay_days", "symptom_onset_days"):
            params = getattr(cfg, name)
            mean, sd = float(params["mean"]), float(params["sd"])
            a = (cfg.truncation_days - mean) / sd
            self._dists[name] = stats.truncnorm(a, np.inf, loc=mean, scale=sd)

    def draw(self, name, rng):
        return float(self._dists[name].rvs(random_state=rng))

    def curve(self, age, rng):
        return ViralLoadCurve(
            incubation_days=self.draw("incubation_days", rng),
            rise_days=self.draw("rise_days", rng),
            plateau_height=plateau_height(age, self.cfg),
            plateau_days=self.draw("plateau_days", rng),
            decay_days=self.draw("decay_days", rng),
        )


# ---------------------------------------------------------------------------
# Disease state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExposureSource:
    kind: str           # "agent" or "location"
    id: int
    via_agent: Optional[int] = None


@dataclass(frozen=True)
class Severity:
    asymptomatic: bool
    really_sick: bool
    extremely_sick: bool
    fatal: bool
    cougher: bool


@dataclass
class DiseaseState:
    status: Status = Status.SUSCEPTIBLE
    infection_timestamp: Optional[float] = None
    curve: Optional[ViralLoadCurve] = None
    asymptomatic: bool = False
    really_sick: bool = False
    extremely_sick: bool = False
    fatal: bool = False
    cough_multiplier: float = 1.0
    symptom_onset_days: Optional[float] = None
    symptoms_by_day: Dict[int, FrozenSet[str]] = field(default_factory=dict)
    exposure_source: Optional[ExposureSource] = None
    deceased: bool = False

    @property
    def infected(self):
        return self.status is not Status.SUSCEPTIBLE

    @property
    def infectious_end(self):
        """Absolute day the agent stops transmitting (recovery or death)."""
        if self.curve is None:
            return None
        stop = self.curve.peak_end if self.fatal else self.curve.end_days
        return self.infection_timestamp + stop

    def since(self, t):
        return t - self.infection_timestamp

    def is_infectious_at(self, t):
        if self.curve is None:
            return False
        elapsed = self.since(t)
        return self.curve.incubation_days < elapsed and t < self.infectious_end

    def needs_care_at(self, t):
        """Really sick agents need a bed from the plateau until they stop transmitting."""
        if not self.really_sick or self.curve is None or self.deceased:
            return False
        return self.since(t) >= self.curve.peak_start and t < self.infectious_end

    def advance(self, t):
        """Move status forward to absolute time t; returns True if the agent died now."""
        if self.curve is None or self.status is Status.RECOVERED:
            return False
        elapsed = self.since(t)
        if self.status is Status.EXPOSED and elapsed >= self.curve.incubation_days:
            self.status = Status.INFECTIOUS
        if self.status is Status.INFECTIOUS and t >= self.infectious_end:
            self.status = Status.RECOVERED
            if self.fatal:
                self.deceased = True
                return True
        return False


def _capped(p):
    return float(min(max(p, 0.0), 1.0))


def sample_severity(agent, rng, cfg, really_sick=None):
    """Severity flags for a newly exposed agent.

    Five uniforms are always consumed. `really_sick` forces that flag; forcing
    it False also rules out extremely sick and fatal outcomes.
    """
    mods = cfg.severity_modifiers
    u_asym, u_sick, u_extreme, u_fatal, u_cough = rng.random(5)
    age = agent.age
    n_conditions = len(agent.preexisting_conditions)

    p_asym = cfg.asymptomatic_probability
    if age < 20:
        p_asym *= mods["asymptomatic_under_20"]
    elif age >= 70:
        p_asym *= mods["asymptomatic_70_plus"]
    asymptomatic = u_asym < _capped(p_asym)

    if really_sick is None:
        sick = False
        if not asymptomatic:
            p_sick = cfg.really_sick_probability / (1.0 - cfg.asymptomatic_probability)
            if age < 20:
                p_sick *= mods["really_sick_under_20"]
            elif age >= 70:
                p_sick *= mods["really_sick_70_plus"]
            p_sick *= mods["really_sick_per_condition"] ** n_conditions
            sick = u_sick < _capped(p_sick)
    else:
        sick = bool(really_sick)
        if sick:
            asymptomatic = False

    extremely = sick and u_extreme < cfg.extremely_sick_probability
    fatal = False
    if sick and cfg.really_sick_probability > 0:
        p_fatal = cfg.fatal_probability / cfg.really_sick_probability
        if age >= 70:
            p_fatal *= mods["fatal_70_plus"]
        if n_conditions:
            p_fatal *= mods["fatal_with_condition"]
        fatal = u_fatal < _capped(p_fatal)
    cougher = not asymptomatic and u_cough < cfg.cougher_probability
    return Severity(asymptomatic, sick, extremely, fatal, cougher)


def sample_disease_course(agent, rng, cfg, sampler=None, timestamp=0.0, source=None, really_sick=None):
    """Fresh EXPOSED state for `agent` infected at absolute day `timestamp`."""
    sampler = sampler or CurveSampler(cfg)
    severity = sample_severity(agent, rng, cfg, really_sick=really_sick)
    curve = sampler.curve(agent.age, rng)
    onset = sampler.draw("symptom_onset_days", rng)
    return DiseaseState(
        status=Status.EXPOSED,
        infection_timestamp=float(timestamp),
        curve=curve,
        asymptomatic=severity.asymptomatic,
        really_sick=severity.really_sick,
        extremely_sick=severity.extremely_sick,
        fatal=severity.fatal,
        cough_multiplier=cfg.cough_multiplier if severity.cougher else 1.0,
        symptom_onset_days=None if severity.asymptomatic else onset,
        exposure_source=source,
    )


# ---------------------------------------------------------------------------
# Transmission
# ---------------------------------------------------------------------------

def infectiousness(state, t, cfg):
    """Transmission potential at absolute day t (0 outside the infectious window)."""
    if not state.is_infectious_at(t):
        return 0.0
    value = viral_load(state.curve, state.since(t)) * state.cough_multiplier
    if state.asymptomatic:
        value *= cfg.asymptomatic_infectiousness
    return value


def duration_factor(minutes, cfg):
    return min(minutes / 15.0, cfg.duration_cap)


@dataclass(frozen=True)
class ExposureContext:
    """Per-party protective behaviour during one encounter."""
    masked_a: bool = False
    masked_b: bool = False
    healthcare_a: bool = False
    healthcare_b: bool = False
    hygiene_a: bool = False
    hygiene_b: bool = False

    def oriented(self, source_is_a):
        """(source masked, source hcw, recipient masked, recipient hcw, recipient hygiene)."""
        if source_is_a:
            return self.masked_a, self.healthcare_a, self.masked_b, self.healthcare_b, self.hygiene_b
        return self.masked_b, self.healthcare_b, self.masked_a, self.healthcare_a, self.hygiene_a


NO_PROTECTION = ExposureContext()


def mask_factor(masked, healthcare_worker, cfg):
    if not masked:
        return 1.0
    return 1.0 - (cfg.mask_efficacy_healthcare if healthcare_worker else cfg.mask_efficacy_other)


def transmission_probability(source_infectiousness, duration, band, cfg, source_masked=False,
                             source_hcw=False, recipient_masked=False, recipient_hcw=False,
                             recipient_hygiene=False):
    p = (cfg.base_rate * source_infectiousness * duration_factor(duration, cfg)
         * cfg.distance_factors[DistanceBand(band).value]
         * mask_factor(source_masked, source_hcw, cfg)
         * mask_factor(recipient_masked, recipient_hcw, cfg))
    if recipient_hygiene:
        p *= cfg.hygiene_factor
    return min(p, 1.0)


@dataclass(frozen=True)
class InfectionEvent:
    source: int               # infecting agent (the contaminating visitor for location infections)
    recipient: int
    day: int
    slot: int
    location_id: int
    via_location: bool = False

    @property
    def timestamp(self):
        return self.day + self.slot / SLOTS_PER_DAY

    def exposure_source(self):
        if self.via_location:
            return ExposureSource("location", self.location_id, via_agent=self.source)
        return ExposureSource("agent", self.source)


def encounter_midpoint(encounter):
    return encounter.day + (encounter.slot + encounter.n_slots / 2.0) / SLOTS_PER_DAY


def transmit(encounter, states, cfg, rng, context=NO_PROTECTION):
    """One Bernoulli draw for an encounter with exactly one infectious party.

    No random number is consumed when the precondition fails or the
    probability is zero.
    """
    t = encounter_midpoint(encounter)
    sa, sb = states[encounter.agent_a], states[encounter.agent_b]
    a_inf, b_inf = sa.is_infectious_at(t), sb.is_infectious_at(t)
    if a_inf and sb.status is Status.SUSCEPTIBLE:
        source, recipient, source_state, source_is_a = encounter.agent_a, encounter.agent_b, sa, True
    elif b_inf and sa.status is Status.SUSCEPTIBLE:
        source, recipient, source_state, source_is_a = encounter.agent_b, encounter.agent_a, sb, False
    else:
        return None
    src_masked, src_hcw, rec_masked, rec_hcw, rec_hygiene = context.oriented(source_is_a)
    p = transmission_probability(
        infectiousness(source_state, t, cfg), encounter.duration, encounter.distance_band, cfg,
        source_masked=src_masked, source_hcw=src_hcw, recipient_masked=rec_masked,
        recipient_hcw=rec_hcw, recipient_hygiene=rec_hygiene,
    )
    if p <= 0.0:
        return None
    if rng.random() < p:
        return InfectionEvent(source, recipient, encounter.day, encounter.slot, encounter.location_id)
    return None


def environmental_exposures(itineraries, occupancy, states, world, day, cfg, rng):
    """Infections from the residual hazard an infectious visitor leaves behind.

    A visit at slot s contributes infectiousness x (1 - k/decay) at slot s+k for
    k = 1..decay-1. Susceptibles present at a contaminated slot get one draw.
    Households are excluded; co-residents already meet directly.
    """
    if not cfg.environmental_transmission or cfg.environmental_rate <= 0:
        return []
    decay = cfg.environmental_decay_slots
    hazard = {}
    for agent_id in sorted(itineraries):
        state = states[agent_id]
        if state.curve is None:
            continue
        level = infectiousness(state, day + 0.5, cfg)
        if level <= 0:
            continue
        slots = itineraries[agent_id].slots
        for s in range(WAKE_SLOT, SLEEP_SLOT):
            loc = int(slots[s])
            if world.locations[loc].kind is LocationKind.HOUSEHOLD:
                continue
            for k in range(1, decay):
                target = s + k
                if target >= SLEEP_SLOT:
                    break
                value = level * (1.0 - k / decay)
                current = hazard.get((loc, target))
                if current is None or value > current[0]:
                    hazard[(loc, target)] = (value, agent_id)

    events = []
    infected_now = set()
    for cell in sorted(hazard):
        value, contaminator = hazard[cell]
        for agent_id in occupancy.get(cell, ()):
            if (states[agent_id].status is not Status.SUSCEPTIBLE or agent_id == contaminator
                    or agent_id in infected_now):
                continue
            if rng.random() < min(cfg.environmental_rate * value, 1.0):
                loc, slot = cell
                events.append(InfectionEvent(contaminator, agent_id, day, slot, loc, via_location=True))
                infected_now.add(agent_id)
    return events


# ---------------------------------------------------------------------------
# Symptoms
# ---------------------------------------------------------------------------

def _draw_symptoms(table, rng):
    draws = rng.random(len(SYMPTOMS))
    return frozenset(s for s, u in zip(SYMPTOMS, draws) if u < table.get(s, 0.0))


def sample_symptoms(state, day, cfg, rng):
    """Symptoms experienced on `day` (empty before onset, after recovery, or if asymptomatic)."""
    if state.curve is None or state.asymptomatic or state.deceased:
        return frozenset()
    if state.infection_timestamp + state.symptom_onset_days >= day + 1:
        return frozenset()
    stage = state.curve.stage(day + 0.5 - state.infection_timestamp)
    if stage == "over":
        return frozenset()
    table = cfg.symptom_prevalence["rise" if stage == "incubation" else stage]
    return _draw_symptoms(table, rng)


def sample_background_illness(agents, rng, fraction):
    """Exactly round(fraction * N) agent ids, children weighted up."""
    n_flagged = int(round(fraction * len(agents)))
    if n_flagged == 0:
        return frozenset()
    weights = np.array([2.0 if a.age < 10 else 1.5 if a.age < 20 else 0.8 if a.age >= 65 else 1.0
                        for a in agents])
    chosen = rng.choice(len(agents), size=n_flagged, replace=False, p=weights / weights.sum())
    return frozenset(agents[int(i)].id for i in chosen)


class BackgroundIllness:
    """Cold/flu cases, independent of the Covid course."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.active = frozenset()
        self.since_day = None

    def refresh(self, day, agents, rng):
        if self.since_day is None or day - self.since_day >= self.cfg.background_illness_days:
            self.active = sample_background_illness(agents, rng, self.cfg.background_illness_fraction)
            self.since_day = day
            return True
        return False

    def symptoms(self, agent_id, rng):
        if agent_id not in self.active:
            return frozenset()
        return _draw_symptoms(self.cfg.cold_prevalence, rng)


# ---------------------------------------------------------------------------
# Testing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestResult:
    agent_id: int
    day: int
    available_day: int
    positive: bool


def run_test(agent_id, infected, day, cfg, rng):
    u = rng.random()
    positive = u >= cfg.false_negative_rate if infected else u < cfg.false_positive_rate
    return TestResult(agent_id, day, day + cfg.turnaround_days, bool(positive))


class TestingLab:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.rng = rng
        self.pending: Dict[int, TestResult] = {}
        self._performed = {}
        self.history = []

    def has_pending(self, agent_id):
        return agent_id in self.pending

    def request(self, agent_id, infected, day):
        """Run a test now; the result is released at day + turnaround.

        Returns False when the daily capacity is exhausted.
        """
        if agent_id in self.pending:
            raise DuplicateTestError(f"agent {agent_id} already has a pending test")
        done = self._performed.get(day, 0)
        if self.cfg.daily_capacity is not None and done >= self.cfg.daily_capacity:
            return False
        result = run_test(agent_id, infected, day, self.cfg, self.rng)
        self.pending[agent_id] = result
        self._performed[day] = done + 1
        return True

    def results_due(self, day):
        due = sorted((r for r in self.pending.values() if r.available_day <= day), key=lambda r: r.agent_id)
        for r in due:
            del self.pending[r.agent_id]
        self.history.extend(due)
        return due

    def performed_on(self, day):
        return self._performed.get(day, 0)


# ---------------------------------------------------------------------------
# Hospital capacity
# ---------------------------------------------------------------------------

class CareUnits:
    """Hospital and ICU beds; agents who find no bed wait at home in FIFO order."""

    def __init__(self, world):
        self.beds = {}
        for kind in (LocationKind.HOSPITAL, LocationKind.ICU):
            for loc_id in world.by_kind[kind]:
                self.beds[loc_id] = (kind, world.locations[loc_id].capacity)
        self.occupant_of: Dict[int, int] = {}
        self.queue = deque()

    def _free_bed(self, kind):
        used = {}
        for loc in self.occupant_of.values():
            used[loc] = used.get(loc, 0) + 1
        for loc_id in sorted(self.beds):
            bed_kind, capacity = self.beds[loc_id]
            if bed_kind is kind and used.get(loc_id, 0) < capacity:
                return loc_id
        return None

    def update(self, needs):
        """Reconcile beds with `needs` (agent id -> HOSPITAL or ICU); returns newly admitted ids."""
        for agent_id, loc in list(self.occupant_of.items()):
            if needs.get(agent_id) is not self.beds[loc][0]:
                del self.occupant_of[agent_id]
        self.queue = deque(a for a in self.queue if a in needs and a not in self.occupant_of)
        for agent_id in sorted(needs):
            if agent_id not in self.occupant_of and agent_id not in self.queue:
                self.queue.append(agent_id)
        admitted = []
        waiting = deque()
        while self.queue:
            agent_id = self.queue.popleft()
            bed = self._free_bed(needs[agent_id])
            if bed is None:
                waiting.append(agent_id)
            else:
                self.occupant_of[agent_id] = bed
                admitted.append(agent_id)
        self.queue = waiting
        if waiting:
            logger.debug("CARE_QUEUE", extra={"waiting": len(waiting)})
        return admitted

    def count(self, kind):
        return sum(1 for loc in self.occupant_of.values() if self.beds[loc][0] is kind)


def status_counts(states):
    counts = {s: 0 for s in Status}
    for state in states:
        counts[state.status] += 1
    return counts
