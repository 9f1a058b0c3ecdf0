# src/world.py
"""
Synthetic city: agents, locations and zones, daily itineraries over 96
fifteen-minute slots, and encounter detection from slot occupancy.

Itineraries follow a two-tier schedule. Anchors (home at night, workplace on
weekdays for employed agents and pupils) are fixed; discretionary trips to
stores and parks are Poisson distributed with a rate scaled by carefulness,
recommendation level and the scenario's distancing strength.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from src.errors import ConfigError
from src.rng import RandomStreams

logger = logging.getLogger(__name__)

SLOT_MINUTES = 15
SLOTS_PER_DAY = 96
WAKE_SLOT = 28    # 07:00
SLEEP_SLOT = 92   # 23:00, first slot asleep
WORK_START_SLOT = 36
WORK_END_SLOT = 68

MAX_TRIPS = 4
MAX_STOPS = 3
# Uniform draws consumed per agent-day, see _DrawLayout.
_DRAWS_PER_DAY = 7 + MAX_TRIPS * (2 + 4 * MAX_STOPS)


class LocationKind(str, Enum):
    HOUSEHOLD = "household"
    STORE = "store"
    PARK = "park"
    HOSPITAL = "hospital"
    ICU = "icu"
    NURSING_HOME = "nursing_home"
    WORKPLACE = "workplace"
    TRANSIT = "transit"


CARE_KINDS = (LocationKind.HOSPITAL, LocationKind.ICU, LocationKind.NURSING_HOME)
DISCRETIONARY_KINDS = (LocationKind.STORE, LocationKind.PARK)


class DistanceBand(str, Enum):
    CLOSE = "close"     # < 1 m
    MEDIUM = "medium"   # 1-2 m
    FAR = "far"         # > 2 m

    def further(self):
        if self is DistanceBand.CLOSE:
            return DistanceBand.MEDIUM
        return DistanceBand.FAR


_BANDS = (DistanceBand.CLOSE, DistanceBand.MEDIUM, DistanceBand.FAR)

# (close, medium, far) sampling probabilities per location kind.
DISTANCE_BAND_PROBABILITIES = {
    LocationKind.HOUSEHOLD: (0.60, 0.30, 0.10),
    LocationKind.STORE: (0.15, 0.45, 0.40),
    LocationKind.PARK: (0.05, 0.25, 0.70),
    LocationKind.HOSPITAL: (0.30, 0.40, 0.30),
    LocationKind.ICU: (0.50, 0.40, 0.10),
    LocationKind.NURSING_HOME: (0.40, 0.40, 0.20),
    LocationKind.WORKPLACE: (0.15, 0.45, 0.40),
    LocationKind.TRANSIT: (0.35, 0.45, 0.20),
}

DEFAULT_LOCATION_COUNTS = {
    "household": 0,       # 0 = derived from the household size distribution
    "store": 25,
    "park": 8,
    "hospital": 2,
    "icu": 1,
    "nursing_home": 2,
    "workplace": 60,
    "transit": 12,
}

DEFAULT_CAPACITIES = {
    "store": 40,
    "park": 200,
    "hospital": 30,
    "icu": 6,
    "nursing_home": 40,
    "workplace": 20,
    "transit": 60,
}

# Ten-year age bands 0-9 ... 80+ with their population shares.
AGE_BAND_WEIGHTS = (0.105, 0.11, 0.13, 0.135, 0.13, 0.135, 0.125, 0.08, 0.05)
SEXES = ("female", "male", "other")
SEX_WEIGHTS = (0.495, 0.495, 0.01)
# Prevalence at age 50; scaled by (0.2 + age / 62.5) and capped.
CONDITION_PREVALENCE = {
    "hypertension": 0.12,
    "diabetes": 0.07,
    "heart_disease": 0.05,
    "lung_disease": 0.05,
    "immunocompromised": 0.02,
    "obesity": 0.15,
}


@dataclass(frozen=True)
class WorldConfig:
    population: int
    n_days: int
    slot_minutes: int = SLOT_MINUTES
    location_counts: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_LOCATION_COUNTS))
    location_capacities: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_CAPACITIES))
    app_adoption: float = 0.6
    seed: int = 0
    initial_infected: int = 10
    zone_count: int = 4
    small_zones: int = 1
    small_zone_residents: int = 40
    household_sizes: Tuple[float, ...] = (0.28, 0.34, 0.15, 0.14, 0.09)
    employment_rate: float = 0.6
    school_attendance: float = 0.95
    healthcare_worker_fraction: float = 0.05
    nursing_home_fraction: float = 0.25
    weekend_days: Tuple[int, ...] = (5, 6)

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("world.population", f"must be at least 2, got {self.population}")
        if self.n_days < 1:
            raise ConfigError("world.n_days", f"must be at least 1, got {self.n_days}")
        if self.slot_minutes != SLOT_MINUTES:
            raise ConfigError("world.slot_minutes", f"slots are fixed at {SLOT_MINUTES} minutes")
        if not 0.0 <= self.app_adoption <= 1.0:
            raise ConfigError("world.app_adoption", f"must lie in [0, 1], got {self.app_adoption}")
        if not 0 <= self.initial_infected <= self.population:
            raise ConfigError("world.initial_infected",
                              f"must lie in [0, population], got {self.initial_infected}")
        if self.seed < 0:
            raise ConfigError("world.seed", "must be a non-negative integer")
        if self.zone_count < 1:
            raise ConfigError("world.zone_count", "at least one zone is required")
        if self.small_zones < 0 or self.small_zone_residents < 1:
            raise ConfigError("world.small_zones", "small zone tail must be non-negative")
        for rate_name in ("employment_rate", "school_attendance",
                          "healthcare_worker_fraction", "nursing_home_fraction"):
            value = getattr(self, rate_name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"world.{rate_name}", f"must lie in [0, 1], got {value}")
        kinds = {k.value for k in LocationKind}
        for kind, count in self.location_counts.items():
            if kind not in kinds:
                raise ConfigError(f"world.location_counts.{kind}", "unknown location kind")
            if count < 0:
                raise ConfigError(f"world.location_counts.{kind}", "count must be non-negative")
        for kind, capacity in self.location_capacities.items():
            if kind not in kinds:
                raise ConfigError(f"world.location_capacities.{kind}", "unknown location kind")
            if capacity < 1:
                raise ConfigError(f"world.location_capacities.{kind}", "capacity must be at least 1")
        if self.location_counts.get("household", 0) > self.population:
            raise ConfigError("world.location_counts.household", "more households than agents")
        if not self.household_sizes or min(self.household_sizes) < 0 or sum(self.household_sizes) <= 0:
            raise ConfigError("world.household_sizes", "must be non-negative weights with a positive sum")
        if any(not 0 <= d <= 6 for d in self.weekend_days):
            raise ConfigError("world.weekend_days", "weekday indices lie in 0..6")

    def count(self, kind):
        return int(self.location_counts.get(LocationKind(kind).value, 0))

    def capacity(self, kind):
        return int(self.location_capacities.get(LocationKind(kind).value, DEFAULT_CAPACITIES.get(kind, 1)))


@dataclass(frozen=True)
class MobilityConfig:
    base_outings_per_day: float = 1.2
    explore_probability: float = 0.3
    store_share: float = 0.65
    transit_probability: float = 0.3
    work_attendance: float = 0.95
    # cumulative probabilities of 1, 2 (else 3) stops per trip
    stop_count_cdf: Tuple[float, float] = (0.6, 0.9)
    store_slots: Tuple[int, int] = (1, 4)
    park_slots: Tuple[int, int] = (2, 8)

    def __post_init__(self):
        if self.base_outings_per_day < 0:
            raise ConfigError("mobility.base_outings_per_day", "must be non-negative")
        for name in ("explore_probability", "store_share", "transit_probability", "work_attendance"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"mobility.{name}", f"must lie in [0, 1], got {value}")
        one, two = self.stop_count_cdf
        if not 0.0 <= one <= two <= 1.0:
            raise ConfigError("mobility.stop_count_cdf", "must be a non-decreasing pair in [0, 1]")
        for name in ("store_slots", "park_slots"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"mobility.{name}", "must be an increasing pair of slot counts >= 1")


@dataclass
class Agent:
    """One simulated person.

    Demographic and propensity fields are sampled at world build and never
    reassigned; only `recommendation_level` changes during a run.
    """
    id: int
    age: int
    sex: str
    preexisting_conditions: FrozenSet[str]
    carefulness: float
    is_healthcare_worker: bool
    has_app: bool
    mask_propensity: float
    household_id: int
    workplace_id: Optional[int]
    home_zone_id: int
    recommendation_level: int = 1

    @property
    def age_band(self):
        """Lower bound of the ten-year age band (80 covers 80+)."""
        return min(self.age // 10, 8) * 10


@dataclass(frozen=True)
class Location:
    id: int
    kind: LocationKind
    capacity: int
    zone_id: int


@dataclass(frozen=True)
class Encounter:
    agent_a: int
    agent_b: int
    day: int
    slot: int
    duration: float
    distance_band: DistanceBand
    location_id: int
    n_slots: int = 1

    def involves(self, agent_id):
        return agent_id == self.agent_a or agent_id == self.agent_b

    def other(self, agent_id):
        return self.agent_b if agent_id == self.agent_a else self.agent_a


@dataclass(frozen=True)
class BehaviourModifiers:
    """What a recommendation level changes in an agent's day."""
    hygiene: bool = False
    mask_outside_household: bool = False
    keep_distance: bool = False
    duration_factor: float = 1.0
    explore: bool = True
    outing_factor: float = 1.0
    work_from_home: bool = False
    request_test: bool = False
    single_stop: bool = False


NO_BEHAVIOUR_CHANGE = BehaviourModifiers()


@dataclass
class Itinerary:
    agent_id: int
    slots: np.ndarray
    trips: int = 0
    visited: Tuple[int, ...] = ()


@dataclass
class World:
    config: WorldConfig
    agents: List[Agent]
    locations: List[Location]
    zone_populations: Dict[int, int]
    initial_exposed: List[int]

    def __post_init__(self):
        self.by_kind = {kind: [] for kind in LocationKind}
        for loc in self.locations:
            self.by_kind[loc.kind].append(loc.id)
        self.kind_of = np.array([list(LocationKind).index(loc.kind) for loc in self.locations], dtype=np.int8)
        self.zone_of = np.array([loc.zone_id for loc in self.locations], dtype=np.int32)

    def location_kind(self, location_id):
        return self.locations[location_id].kind

    def app_agents(self):
        return [a for a in self.agents if a.has_app]

    def roster_frame(self):
        rows = []
        for a in self.agents:
            rows.append({
                "id": a.id, "age": a.age, "sex": a.sex,
                "conditions": ";".join(sorted(a.preexisting_conditions)),
                "carefulness": a.carefulness, "is_healthcare_worker": a.is_healthcare_worker,
                "has_app": a.has_app, "mask_propensity": a.mask_propensity,
                "household_id": a.household_id, "workplace_id": a.workplace_id,
                "home_zone_id": a.home_zone_id,
            })
        return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# World construction
# ---------------------------------------------------------------------------

def _household_sizes(config, n_residents, rng):
    n_households = config.count("household")
    if n_households > 0:
        n_households = min(n_households, n_residents)
        if n_households == 0:
            return []
        extra = rng.multinomial(n_residents - n_households, np.full(n_households, 1.0 / n_households))
        return [1 + int(e) for e in extra]
    weights = np.asarray(config.household_sizes, dtype=float)
    weights = weights / weights.sum()
    sizes = []
    remaining = n_residents
    while remaining > 0:
        size = int(rng.choice(len(weights), p=weights)) + 1
        size = min(size, remaining)
        sizes.append(size)
        remaining -= size
    return sizes


def _assign_zones(config, household_sizes):
    """Small-zone tail first, then round-robin over the regular zones."""
    zone_of_household = []
    populations = defaultdict(int)
    tail = list(range(config.zone_count, config.zone_count + config.small_zones))
    rr = 0
    for size in household_sizes:
        while tail and populations[tail[0]] >= config.small_zone_residents:
            tail.pop(0)
        if tail:
            zone = tail[0]
        else:
            zone = rr % config.zone_count
            rr += 1
        zone_of_household.append(zone)
        populations[zone] += size
    return zone_of_household


def _sample_conditions(age, rng):
    scale = min(0.2 + age / 62.5, 2.5)
    draws = rng.random(len(CONDITION_PREVALENCE))
    return frozenset(
        name for (name, base), u in zip(CONDITION_PREVALENCE.items(), draws)
        if u < min(base * scale, 0.9)
    )


def build_world(config):
    """Build the synthetic city. All randomness comes from config.seed."""
    rng = RandomStreams(config.seed).stream("world")
    n = config.population

    bands = rng.choice(len(AGE_BAND_WEIGHTS), size=n, p=np.asarray(AGE_BAND_WEIGHTS) / sum(AGE_BAND_WEIGHTS))
    ages = [int(b * 10 + rng.integers(0, 10 if b < 8 else 20)) for b in bands]

    nursing_capacity = config.count("nursing_home") * config.capacity("nursing_home")
    in_nursing_home = []
    if config.count("nursing_home") > 0:
        for i, age in enumerate(ages):
            if age >= 80 and len(in_nursing_home) < nursing_capacity and rng.random() < config.nursing_home_fraction:
                in_nursing_home.append(i)
    nursing_set = set(in_nursing_home)
    community = [i for i in range(n) if i not in nursing_set]
    order = [community[j] for j in rng.permutation(len(community))]
    sizes = _household_sizes(config, len(order), rng)

    locations = []
    household_of = {}
    zone_of_household = _assign_zones(config, sizes)
    cursor = 0
    for h, size in enumerate(sizes):
        loc_id = len(locations)
        locations.append(Location(loc_id, LocationKind.HOUSEHOLD, max(size, 1), zone_of_household[h]))
        for agent_id in order[cursor:cursor + size]:
            household_of[agent_id] = loc_id
        cursor += size

    for kind in LocationKind:
        if kind is LocationKind.HOUSEHOLD:
            continue
        for i in range(config.count(kind)):
            loc_id = len(locations)
            locations.append(Location(loc_id, kind, config.capacity(kind), i % config.zone_count))

    nursing_homes = [loc.id for loc in locations if loc.kind is LocationKind.NURSING_HOME]
    for j, agent_id in enumerate(in_nursing_home):
        household_of[agent_id] = nursing_homes[j % len(nursing_homes)]

    workplaces = [loc.id for loc in locations if loc.kind is LocationKind.WORKPLACE]
    care_sites = [loc.id for loc in locations if loc.kind in CARE_KINDS]

    app_ids = set(rng.choice(n, size=int(round(config.app_adoption * n)), replace=False).tolist())

    agents = []
    for i in range(n):
        age = ages[i]
        sex = str(rng.choice(SEXES, p=SEX_WEIGHTS))
        conditions = _sample_conditions(age, rng)
        carefulness = float(rng.beta(2.0, 2.0))
        mask_propensity = float(np.clip(0.2 + 0.8 * carefulness, 0.0, 1.0))
        u_job, u_hcw, u_site = rng.random(3)
        workplace_id = None
        is_hcw = False
        if i not in nursing_set:
            if 18 <= age < 65 and u_job < config.employment_rate:
                if care_sites and u_hcw < config.healthcare_worker_fraction:
                    is_hcw = True
                    workplace_id = care_sites[int(u_site * len(care_sites))]
                elif workplaces:
                    workplace_id = workplaces[int(u_site * len(workplaces))]
            elif 5 <= age < 18 and workplaces and u_job < config.school_attendance:
                workplace_id = workplaces[int(u_site * len(workplaces))]
        home = household_of[i]
        agents.append(Agent(
            id=i, age=age, sex=sex, preexisting_conditions=conditions,
            carefulness=carefulness, is_healthcare_worker=is_hcw, has_app=i in app_ids,
            mask_propensity=mask_propensity, household_id=home, workplace_id=workplace_id,
            home_zone_id=locations[home].zone_id,
        ))

    zone_populations = defaultdict(int)
    for a in agents:
        zone_populations[a.home_zone_id] += 1
    for zone in range(config.zone_count + config.small_zones):
        zone_populations.setdefault(zone, 0)

    initial = sorted(int(i) for i in rng.choice(n, size=config.initial_infected, replace=False))
    world = World(config, agents, locations, dict(sorted(zone_populations.items())), initial)
    logger.info("WORLD_BUILT", extra={"population": n, "locations": len(locations),
                                       "app_users": len(app_ids), "seed": config.seed})
    return world


# ---------------------------------------------------------------------------
# Mobility
# ---------------------------------------------------------------------------

class _DrawLayout:
    """Positions in the per agent-day uniform block.

    Every decision reads a fixed position, so a behaviour change alters how a
    draw is interpreted but never which draw later decisions see.
    """
    WORK = 0
    TRANSIT = 1
    START_JITTER = 2
    END_JITTER = 3
    TRANSIT_OUT = 4
    TRANSIT_BACK = 5
    TRIPS = 6
    TRIP_BASE = 7
    TRIP_WIDTH = 2 + 4 * MAX_STOPS

    @classmethod
    def trip(cls, i):
        return cls.TRIP_BASE + i * cls.TRIP_WIDTH


def outing_rate(agent, mobility, modifiers=NO_BEHAVIOUR_CHANGE, distancing=0.0):
    """Expected discretionary trips per day."""
    return (mobility.base_outings_per_day * (1.25 - 0.5 * agent.carefulness)
            * (1.0 - distancing) * modifiers.outing_factor)


def _jitter(u):
    return int(u * 5) - 2


def _build_itinerary(agent, day, world, mobility, draws, trips, modifiers, known, distancing):
    home = agent.household_id
    slots = np.full(SLOTS_PER_DAY, home, dtype=np.int32)
    keep = 1.0 - distancing
    L = _DrawLayout

    weekday = (day % 7) not in world.config.weekend_days
    if agent.workplace_id is not None and weekday and not modifiers.work_from_home:
        attend = mobility.work_attendance * (1.0 if agent.is_healthcare_worker else keep)
        if draws[L.WORK] < attend:
            start = WORK_START_SLOT + _jitter(draws[L.START_JITTER])
            end = WORK_END_SLOT + _jitter(draws[L.END_JITTER])
            slots[start:end] = agent.workplace_id
            transit = world.by_kind[LocationKind.TRANSIT]
            if transit and draws[L.TRANSIT] < mobility.transit_probability * keep:
                slots[start - 1] = transit[int(draws[L.TRANSIT_OUT] * len(transit))]
                slots[end] = transit[int(draws[L.TRANSIT_BACK] * len(transit))]

    visited = []
    realized = 0
    for t in range(min(trips, MAX_TRIPS)):
        base = L.trip(t)
        free = np.flatnonzero(slots[WAKE_SLOT:SLEEP_SLOT] == home) + WAKE_SLOT
        if free.size == 0:
            break
        cursor = int(free[int(draws[base] * free.size)])
        u_stops = draws[base + 1]
        n_stops = 1
        if not modifiers.single_stop:
            n_stops = 1 if u_stops < mobility.stop_count_cdf[0] else 2 if u_stops < mobility.stop_count_cdf[1] else 3
        placed_any = False
        for s in range(n_stops):
            u_kind, u_explore, u_pick, u_dur = draws[base + 2 + 4 * s: base + 6 + 4 * s]
            kind = LocationKind.STORE if u_kind < mobility.store_share else LocationKind.PARK
            candidates = world.by_kind[kind]
            if not candidates:
                kind = LocationKind.PARK if kind is LocationKind.STORE else LocationKind.STORE
                candidates = world.by_kind[kind]
            if not candidates:
                break
            familiar = sorted(loc for loc in known if world.locations[loc].kind is kind)
            if modifiers.explore and (not familiar or u_explore < mobility.explore_probability):
                loc = candidates[int(u_pick * len(candidates))]
            elif familiar:
                loc = familiar[int(u_pick * len(familiar))]
            else:
                break
            lo, hi = mobility.store_slots if kind is LocationKind.STORE else mobility.park_slots
            duration = lo + int(u_dur * (hi - lo + 1))
            placed = 0
            while placed < duration and cursor < SLEEP_SLOT and slots[cursor] == home:
                slots[cursor] = loc
                cursor += 1
                placed += 1
            if placed == 0:
                break
            placed_any = True
            visited.append(loc)
        if placed_any:
            realized += 1
    return Itinerary(agent.id, slots, trips=realized, visited=tuple(dict.fromkeys(visited)))


def plan_day(world, day, mobility, streams, modifiers=None, known_locations=None,
             distancing=0.0, confined=None, absent=()):
    """Sample itineraries for every present agent.

    Args:
        modifiers: agent id -> BehaviourModifiers (missing = no change)
        known_locations: agent id -> set of previously visited store/park ids
        distancing: global distancing strength in [0, 1]
        confined: agent id -> location occupied for all 96 slots (hospital beds)
        absent: agent ids with no itinerary (deceased)
    Returns:
        dict agent id -> Itinerary
    """
    modifiers = modifiers or {}
    known_locations = known_locations or {}
    confined = confined or {}
    absent = set(absent)
    present = [a for a in world.agents if a.id not in absent]

    blocks = np.empty((len(present), _DRAWS_PER_DAY))
    rates = np.empty(len(present))
    for row, agent in enumerate(present):
        blocks[row] = streams.keyed("mobility", agent.id, day).random(_DRAWS_PER_DAY)
        rates[row] = outing_rate(agent, mobility, modifiers.get(agent.id, NO_BEHAVIOUR_CHANGE), distancing)
    trips = np.zeros(len(present), dtype=int)
    positive = rates > 0
    trips[positive] = stats.poisson.ppf(blocks[positive, _DrawLayout.TRIPS], rates[positive]).astype(int)

    itineraries = {}
    for row, agent in enumerate(present):
        if agent.id in confined:
            itineraries[agent.id] = Itinerary(agent.id, np.full(SLOTS_PER_DAY, confined[agent.id], dtype=np.int32))
            continue
        itineraries[agent.id] = _build_itinerary(
            agent, day, world, mobility, blocks[row], int(trips[row]),
            modifiers.get(agent.id, NO_BEHAVIOUR_CHANGE),
            known_locations.get(agent.id, ()), distancing,
        )
    return itineraries


# ---------------------------------------------------------------------------
# Encounters
# ---------------------------------------------------------------------------

def build_occupancy(itineraries):
    """(location id, slot) -> sorted agent ids, waking slots only."""
    occupancy = defaultdict(list)
    for agent_id in sorted(itineraries):
        slots = itineraries[agent_id].slots
        for s in range(WAKE_SLOT, SLEEP_SLOT):
            occupancy[(int(slots[s]), s)].append(agent_id)
    return occupancy


def detect_encounters(occupancy, day, world, rng):
    """Pairwise encounters from one day's occupancy.

    Consecutive slots shared by the same pair at the same location merge into
    one encounter. Distance bands are drawn once per merged encounter, in
    (start slot, location, agent_a, agent_b) order.
    """
    open_runs = {}
    closed = []
    for cell in sorted(occupancy):
        present = sorted(occupancy[cell])
        if len(present) < 2:
            continue
        location_id, slot = cell
        for i, a in enumerate(present):
            for b in present[i + 1:]:
                key = (a, b, location_id)
                run = open_runs.get(key)
                if run is not None and run[0] + run[1] == slot:
                    run[1] += 1
                    continue
                if run is not None:
                    closed.append((key, run))
                open_runs[key] = [slot, 1]
    closed.extend(open_runs.items())
    closed.sort(key=lambda item: (item[1][0], item[0][2], item[0][0], item[0][1]))

    draws = rng.random(len(closed))
    encounters = []
    for ((a, b, location_id), (start, length)), u in zip(closed, draws):
        close_p, medium_p, _ = DISTANCE_BAND_PROBABILITIES[world.location_kind(location_id)]
        band = DistanceBand.CLOSE if u < close_p else DistanceBand.MEDIUM if u < close_p + medium_p else DistanceBand.FAR
        encounters.append(Encounter(a, b, day, start, float(length * SLOT_MINUTES), band, location_id, length))
    return encounters


def apply_encounter_behaviour(encounters, world, modifiers):
    """Distance keeping and shortened contacts outside households."""
    if not modifiers:
        return list(encounters)
    out = []
    for enc in encounters:
        if world.location_kind(enc.location_id) is LocationKind.HOUSEHOLD:
            out.append(enc)
            continue
        ma = modifiers.get(enc.agent_a, NO_BEHAVIOUR_CHANGE)
        mb = modifiers.get(enc.agent_b, NO_BEHAVIOUR_CHANGE)
        band = enc.distance_band
        if ma.keep_distance or mb.keep_distance:
            band = band.further()
        factor = min(ma.duration_factor, mb.duration_factor)
        if band is not enc.distance_band or factor != 1.0:
            enc = replace(enc, distance_band=band, duration=enc.duration * factor)
        out.append(enc)
    return out


def encounters_for(agent_id, encounters):
    return [e for e in encounters if e.involves(agent_id)]


def encounters_frame(encounters, world):
    return pd.DataFrame(
        [(e.day, e.agent_a, e.agent_b, e.duration, e.distance_band.value, world.location_kind(e.location_id).value)
         for e in encounters],
        columns=["day", "agent_a", "agent_b", "duration_min", "distance_band", "location_kind"],
    )
