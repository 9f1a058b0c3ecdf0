# src/aggregation.py
"""
Opt-in aggregate outputs under a k-anonymity floor (k = 100).

Geo packets are folded into per-(zone, day) histograms the moment they
arrive and never stored. Releases only contain groups of at least k
individuals; smaller groups are merged into the lumped row first and
suppressed if that row is still too small.
"""
import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

import numpy as np
import pandas as pd

from src.errors import ConfigError, DomainError

logger = logging.getLogger(__name__)

LUMPED_ZONE = -1
K_ANONYMITY = 100
N_LEVELS = 16


@dataclass(frozen=True)
class AggregationConfig:
    opt_in_fraction: float = 0.5
    k_anonymity: int = K_ANONYMITY
    record_retention_days: int = 90
    log_retention_days: int = 30

    def __post_init__(self):
        if not 0.0 <= self.opt_in_fraction <= 1.0:
            raise ConfigError("aggregation.opt_in_fraction", f"must lie in [0, 1], got {self.opt_in_fraction}")
        if self.k_anonymity < 1:
            raise ConfigError("aggregation.k_anonymity", "must be at least 1")
        if self.record_retention_days < 1 or self.log_retention_days < 1:
            raise ConfigError("aggregation.record_retention_days", "retention periods must be positive")


# ---------------------------------------------------------------------------
# Zones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Zone:
    id: int
    population: int
    lumped: bool


class ZoneTable:
    def __init__(self, zones):
        self.zones = {z.id: z for z in zones}

    def code(self, zone_id):
        """Released code for a zone; small and unknown zones share LUMPED_ZONE."""
        zone = self.zones.get(zone_id)
        if zone is None or zone.lumped:
            return LUMPED_ZONE
        return zone.id

    def kept(self):
        return sorted(z.id for z in self.zones.values() if not z.lumped)


def lump_small_zones(populations, k=K_ANONYMITY):
    """Zones with fewer than k residents share the lumped code."""
    return ZoneTable([Zone(int(z), int(n), n < k) for z, n in sorted(populations.items())])


# ---------------------------------------------------------------------------
# Packets
# ---------------------------------------------------------------------------

def _check_level(name, value, optional=False):
    if value is None and optional:
        return
    if not 0 <= int(value) < N_LEVELS:
        raise DomainError(f"{name} must lie in 0..15, got {value}")


def mobility_nibble(outings, hygiene):
    """4-bit mobility/risk-averseness summary: capped outings x 2 + hygiene flag."""
    return min(int(outings), 7) * 2 + (1 if hygiene else 0)


def contributor_tag(key, day):
    """Per-day tag for one phone: equal within a day, unlinkable across days."""
    return hashlib.blake2b(int(day).to_bytes(4, "big", signed=True), key=key, digest_size=8).digest()


@dataclass(frozen=True)
class HeatMapPacket:
    zone_id: int
    day: int
    risk_level: int
    mobility_nibble: int
    old_risk_level: Optional[int] = None
    contributor: Optional[bytes] = None

    def __post_init__(self):
        _check_level("risk_level", self.risk_level)
        _check_level("old_risk_level", self.old_risk_level, optional=True)
        _check_level("mobility_nibble", self.mobility_nibble)


@dataclass(frozen=True)
class FlowMapPacket:
    home_zone_id: int
    day: int
    contact_zone_id: int
    received_level: int
    old_received_level: Optional[int] = None
    contributor: Optional[bytes] = None

    def __post_init__(self):
        _check_level("received_level", self.received_level)
        _check_level("old_received_level", self.old_received_level, optional=True)


@dataclass
class _Cell:
    count: int = 0                 # contributions, the sum of the level histogram
    anonymous: int = 0             # contributions without a contributor tag, each its own person
    contributors: Set[bytes] = field(default_factory=set)
    levels: np.ndarray = field(default_factory=lambda: np.zeros(N_LEVELS, dtype=np.int64))
    mobility: np.ndarray = field(default_factory=lambda: np.zeros(N_LEVELS, dtype=np.int64))

    @property
    def people(self):
        return self.anonymous + len(self.contributors)

    def absorb(self, other):
        self.count += other.count
        self.anonymous += other.anonymous
        self.contributors |= other.contributors
        self.levels = self.levels + other.levels
        self.mobility = self.mobility + other.mobility


@dataclass(frozen=True)
class Release:
    rows: List[dict]
    suppressed: int
    total: int


class GeoAggregator:
    """Single-owner accumulator for heat-map and flow-map packets."""

    def __init__(self, zone_table, k=K_ANONYMITY):
        self.zone_table = zone_table
        self.k = k
        self._heat: Dict[Tuple[int, int], _Cell] = defaultdict(_Cell)
        self._flow: Dict[Tuple[int, int, int], _Cell] = defaultdict(_Cell)
        self.corrections_without_original = 0

    def _accumulate(self, cell, new, old, nibble=None, contributor=None):
        if old is not None:
            if cell.levels[old] > 0:
                cell.levels[old] -= 1
                cell.levels[new] += 1
                return
            self.corrections_without_original += 1
            logger.warning("CORRECTION_WITHOUT_ORIGINAL", extra={"old_level": old, "new_level": new})
        cell.count += 1
        if contributor is None:
            cell.anonymous += 1
        else:
            cell.contributors.add(contributor)
        cell.levels[new] += 1
        if nibble is not None:
            cell.mobility[nibble] += 1

    def ingest_heat(self, packet):
        cell = self._heat[(self.zone_table.code(packet.zone_id), packet.day)]
        self._accumulate(cell, packet.risk_level, packet.old_risk_level, packet.mobility_nibble,
                         packet.contributor)

    def ingest_flow(self, packet):
        key = (self.zone_table.code(packet.home_zone_id), self.zone_table.code(packet.contact_zone_id), packet.day)
        self._accumulate(self._flow[key], packet.received_level, packet.old_received_level,
                         contributor=packet.contributor)

    def ingest_geo_packet(self, packet):
        if isinstance(packet, HeatMapPacket):
            self.ingest_heat(packet)
        elif isinstance(packet, FlowMapPacket):
            self.ingest_flow(packet)
        else:
            raise TypeError(f"not a geo packet: {type(packet).__name__}")

    def days(self):
        return sorted({key[-1] for key in (*self._heat, *self._flow)})

    def state_size(self):
        """Values held: cells x (2 + 2 x 16) plus one tag per distinct contributor and cell.

        Repeated packets from the same phone add nothing.
        """
        cells = [*self._heat.values(), *self._flow.values()]
        return len(cells) * (2 + 2 * N_LEVELS) + sum(len(c.contributors) for c in cells)

    def _release(self, cells, lumped_key, to_row, context):
        rows = []
        lumped = _Cell()
        tagged = set().union(*(cell.contributors for cell in cells.values()))
        total = sum(cell.anonymous for cell in cells.values()) + len(tagged)
        for key in sorted(cells):
            cell = cells[key]
            if cell.people >= self.k and key != lumped_key:
                rows.append(to_row(key, cell))
            else:
                lumped.absorb(cell)
        suppressed = 0
        if lumped.people >= self.k:
            rows.append(to_row(lumped_key, lumped))
        elif lumped.people > 0:
            suppressed = lumped.people
            logger.info("K_ANONYMITY_SUPPRESSED", extra={"group_size": suppressed, "k_threshold": self.k,
                                                        "context": context})
        return Release(rows, suppressed, total)

    def emit_heatmap(self, day):
        cells = {zone: cell for (zone, d), cell in self._heat.items() if d == day}

        def to_row(zone, cell):
            row = {"zone_id": zone, "day": day, "count": cell.people}
            row.update({f"level_{i}": int(v) for i, v in enumerate(cell.levels)})
            row.update({f"mobility_{i}": int(v) for i, v in enumerate(cell.mobility)})
            return row

        return self._release(cells, LUMPED_ZONE, to_row, f"heatmap day {day}")

    def emit_flowmap(self, day):
        cells = {(home, contact): cell for (home, contact, d), cell in self._flow.items() if d == day}

        def to_row(key, cell):
            row = {"home_zone": key[0], "contact_zone": key[1], "day": day, "count": cell.people}
            row.update({f"level_{i}": int(v) for i, v in enumerate(cell.levels)})
            return row

        return self._release(cells, (LUMPED_ZONE, LUMPED_ZONE), to_row, f"flowmap day {day}")


HEATMAP_COLUMNS = ["zone_id", "day", "count", *(f"level_{i}" for i in range(N_LEVELS)),
                   *(f"mobility_{i}" for i in range(N_LEVELS))]
FLOWMAP_COLUMNS = ["home_zone", "contact_zone", "day", "count", *(f"level_{i}" for i in range(N_LEVELS))]


def releases_frame(releases, columns):
    rows = [row for release in releases for row in release.rows]
    return pd.DataFrame(rows, columns=columns)


# ---------------------------------------------------------------------------
# Pseudonymized records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PseudonymizedRecord:
    pseudonym: str
    age_band: int
    sex: str
    conditions: FrozenSet[str]
    symptoms_by_day: Dict[int, FrozenSet[str]]
    diagnosis_status: str
    contact_count: int
    contact_minutes: float
    received_levels: Tuple[int, ...]
    location_visits: Dict[str, int]
    received_day: int


@dataclass(frozen=True)
class DeletionReport:
    records_deleted: int
    contact_entries_purged: int
    revoked: int = 0


class RecordStore:
    def __init__(self):
        self._records: List[PseudonymizedRecord] = []

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(list(self._records))

    def add(self, record):
        self._records.append(record)

    def with_pseudonym(self, pseudonym):
        return [r for r in self._records if r.pseudonym == pseudonym]

    def revoke(self, pseudonym):
        """Delete every record under `pseudonym`; unknown pseudonyms are a logged no-op."""
        before = len(self._records)
        self._records = [r for r in self._records if r.pseudonym != pseudonym]
        removed = before - len(self._records)
        if removed == 0:
            logger.info("REVOCATION_UNKNOWN_PSEUDONYM", extra={"pseudonym": pseudonym})
        return removed

    def expire(self, now, max_age_days):
        before = len(self._records)
        self._records = [r for r in self._records if now - r.received_day < max_age_days]
        return before - len(self._records)


def expire_data(store, now, phone_logs=(), record_max_age=90, log_max_age=30):
    """Apply retention: records aged >= record_max_age, phone logs older than log_max_age."""
    deleted = store.expire(now, record_max_age)
    purged = sum(data.purge(now, horizon=log_max_age) for data in phone_logs)
    report = DeletionReport(deleted, purged)
    if deleted or purged:
        logger.info("RETENTION_EXPIRED", extra={"day": now, "records": deleted, "contact_entries": purged})
    return report


def emit_demographics(store, day, k=K_ANONYMITY):
    """(age band, diagnosis status) symptom tallies for records received on `day`."""
    groups = defaultdict(list)
    for record in store:
        if record.received_day == day:
            groups[(record.age_band, record.diagnosis_status)].append(record)
    rows, small = [], []
    for key in sorted(groups):
        (rows if len(groups[key]) >= k else small).append((key, groups[key]))

    def to_row(key, records):
        row = {"age_band": key[0], "diagnosis_status": key[1], "day": day, "count": len(records)}
        for symptom in sorted({s for r in records for s in r.symptoms_by_day.get(day, ())}):
            row[f"symptom_{symptom}"] = sum(symptom in r.symptoms_by_day.get(day, ()) for r in records)
        return row

    out = [to_row(key, records) for key, records in rows]
    merged = [r for _, records in small for r in records]
    suppressed = 0
    if len(merged) >= k:
        out.append(to_row((LUMPED_ZONE, "lumped"), merged))
    elif merged:
        suppressed = len(merged)
        logger.info("K_ANONYMITY_SUPPRESSED", extra={"group_size": suppressed, "k_threshold": k,
                                                    "context": f"demographics day {day}"})
    return Release(out, suppressed, sum(len(v) for v in groups.values()))
