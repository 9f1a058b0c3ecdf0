# src/policies.py
"""
Intervention scenarios and the behaviour policies that implement them.

Every policy is inert before the intervention day: no behaviour change, no
draws from shared random streams. This keeps the pre-intervention trace of a
seed identical across scenarios.

Hooks called by the simulation, in daily order:
    distancing / modifiers      before itineraries are planned
    observe_encounters          after encounters are detected
    observe_symptoms            per agent with symptoms today
    test_requests               level-4 test requests
    on_test_results             results released today
    end_of_day                  phone updates, messaging, aggregation
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Set

import numpy as np

from src.aggregation import (FlowMapPacket, GeoAggregator, HeatMapPacket,
                             PseudonymizedRecord, RecordStore, contributor_tag, emit_demographics, expire_data,
                             lump_small_zones, mobility_nibble)
from src.errors import ConfigError, DomainError
from src.messaging import Courier, MixChain, PhoneMessenger, exchange_tokens
from src.metrics import cluster_purity
from src.predictors import get_predictor
from src.risk import WINDOW_DAYS, Phone, PhoneData, apply_recommendation
from src.world import SLEEP_SLOT, WAKE_SLOT, DistanceBand

logger = logging.getLogger(__name__)

QUARANTINE_LEVEL = 4


class ScenarioKind(str, Enum):
    UNMITIGATED = "unmitigated"
    SOCIAL_DISTANCING = "social_distancing"
    BINARY_TRACING = "binary_tracing"
    RISK_APP = "risk_app"


@dataclass(frozen=True)
class Scenario:
    kind: ScenarioKind
    distancing_strength: float = 0.0
    order: Optional[int] = None
    predictor: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ScenarioKind(self.kind))
        if not 0.0 <= self.distancing_strength <= 1.0:
            raise DomainError(f"distancing strength must lie in [0, 1], got {self.distancing_strength}")
        if self.kind is ScenarioKind.UNMITIGATED and self.distancing_strength != 0.0:
            raise DomainError("the unmitigated scenario has no distancing")
        if (self.kind is ScenarioKind.BINARY_TRACING) != (self.order is not None):
            raise DomainError("tracing order is set for binary tracing and nothing else")
        if self.order is not None and self.order not in (1, 2):
            raise DomainError(f"tracing order must be 1 or 2, got {self.order}")
        if (self.kind is ScenarioKind.RISK_APP) != (self.predictor is not None):
            raise DomainError("a predictor is set for the risk app and nothing else")

    @classmethod
    def unmitigated(cls):
        return cls(ScenarioKind.UNMITIGATED)

    @classmethod
    def social_distancing(cls, strength):
        return cls(ScenarioKind.SOCIAL_DISTANCING, strength)

    @classmethod
    def binary_tracing(cls, order, strength=0.0):
        return cls(ScenarioKind.BINARY_TRACING, strength, order=order)

    @classmethod
    def risk_app(cls, predictor="heuristic", strength=0.0):
        return cls(ScenarioKind.RISK_APP, strength, predictor=predictor)

    def with_strength(self, strength):
        return replace(self, distancing_strength=float(strength))

    @property
    def label(self):
        if self.kind is ScenarioKind.BINARY_TRACING:
            return f"binary_tracing_{self.order}"
        return self.kind.value

    @classmethod
    def parse(cls, text, strength=0.3, predictor="heuristic"):
        """Scenario from a CLI label such as `binary_tracing_2`."""
        text = text.strip().lower()
        if text == "unmitigated":
            return cls.unmitigated()
        if text == "social_distancing":
            return cls.social_distancing(strength)
        if text in ("binary_tracing_1", "binary_tracing_2"):
            return cls.binary_tracing(int(text[-1]), strength)
        if text == "risk_app":
            return cls.risk_app(predictor, strength)
        raise ValueError(f"Unknown scenario: {text}. Available: {SCENARIO_LABELS}")


SCENARIO_LABELS = ["unmitigated", "social_distancing", "binary_tracing_1", "binary_tracing_2", "risk_app"]


@dataclass(frozen=True)
class ScenarioConfig:
    intervention_day: int = 4
    rt_window: int = 3
    distancing_strength: float = 0.3
    equalization_tolerance: float = 0.02
    max_bisection_steps: int = 40

    def __post_init__(self):
        if self.intervention_day < 0:
            raise ConfigError("scenario.intervention_day", "must be non-negative")
        if self.rt_window < 1:
            raise ConfigError("scenario.rt_window", "must be at least one day")
        if not 0.0 <= self.distancing_strength <= 1.0:
            raise ConfigError("scenario.distancing_strength", f"must lie in [0, 1], got {self.distancing_strength}")
        if not 0.0 < self.equalization_tolerance < 1.0:
            raise ConfigError("scenario.equalization_tolerance", "must lie in (0, 1)")
        if self.max_bisection_steps < 1:
            raise ConfigError("scenario.max_bisection_steps", "must be at least 1")


def is_app_contact(encounter, world):
    """Both phones present and close enough for the proximity exchange."""
    return (encounter.distance_band is not DistanceBand.FAR
            and world.agents[encounter.agent_a].has_app and world.agents[encounter.agent_b].has_app)


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

_POLICIES = {}


def register_policy(kind):
    """Decorator to register a policy class for a scenario kind."""
    def decorator(cls):
        _POLICIES[ScenarioKind(kind)] = cls
        cls.kind = ScenarioKind(kind)
        return cls
    return decorator


def build_policy(scenario, sim):
    if scenario.kind not in _POLICIES:
        raise ValueError(f"Unknown scenario kind: {scenario.kind}. Available: {sorted(k.value for k in _POLICIES)}")
    return _POLICIES[scenario.kind](sim, scenario)


@register_policy(ScenarioKind.UNMITIGATED)
class Policy:
    """No intervention. Base class for the others."""

    def __init__(self, sim, scenario):
        self.sim = sim
        self.scenario = scenario
        self.intervention_day = sim.intervention_day

    def active(self, day):
        return day >= self.intervention_day

    def distancing(self, day):
        return self.scenario.distancing_strength if self.active(day) else 0.0

    def modifiers(self, day):
        return {}

    def observe_encounters(self, day, encounters):
        pass

    def observe_symptoms(self, day, agent_id, symptoms):
        pass

    def test_requests(self, day):
        return []

    def on_test_results(self, day, results):
        pass

    def end_of_day(self, day, itineraries):
        pass

    def quarantined_count(self, day):
        return 0

    def canary_alarms(self):
        return 0

    def cluster_purity(self):
        return float("nan")

    def finish(self):
        pass


@register_policy(ScenarioKind.SOCIAL_DISTANCING)
class SocialDistancingPolicy(Policy):
    """Global distancing strength from the intervention day on."""


class TestRequestTracker:
    """One test request per agent and quarantine episode."""

    def __init__(self):
        self._episodes: Dict[int, int] = {}

    def want(self, agent_id, episode_start):
        if self._episodes.get(agent_id) == episode_start:
            return False
        self._episodes[agent_id] = episode_start
        return True


# ---------------------------------------------------------------------------
# Binary contact tracing
# ---------------------------------------------------------------------------

class ContactGraph:
    """App-recorded contacts, kept for the tracing window."""

    def __init__(self, window_days=WINDOW_DAYS):
        self.window_days = window_days
        self._contacts: Dict[int, Dict[int, int]] = defaultdict(dict)

    def add(self, a, b, day):
        self._contacts[a][b] = max(day, self._contacts[a].get(b, day))
        self._contacts[b][a] = max(day, self._contacts[b].get(a, day))

    def contacts_of(self, agent_id, since):
        return {other for other, last in self._contacts.get(agent_id, {}).items() if last >= since}

    def forget_before(self, day):
        for agent_id in list(self._contacts):
            kept = {o: d for o, d in self._contacts[agent_id].items() if d >= day}
            if kept:
                self._contacts[agent_id] = kept
            else:
                del self._contacts[agent_id]


@dataclass(frozen=True)
class TracingRule:
    order: int
    window_days: int = WINDOW_DAYS
    quarantine_days: int = WINDOW_DAYS

    def to_quarantine(self, graph, positive, day):
        """Agents sent to level 4 by `positive`'s result on `day` (excluding `positive`)."""
        since = day - self.window_days
        first = graph.contacts_of(positive, since)
        targets = set(first)
        if self.order == 2:
            for contact in first:
                targets |= graph.contacts_of(contact, since)
        targets.discard(positive)
        return targets


def binary_tracing_policy(order):
    if order not in (1, 2):
        raise DomainError(f"tracing order must be 1 or 2, got {order}")
    return TracingRule(order)


@register_policy(ScenarioKind.BINARY_TRACING)
class BinaryTracingPolicy(Policy):
    def __init__(self, sim, scenario):
        super().__init__(sim, scenario)
        self.rule = binary_tracing_policy(scenario.order)
        self.graph = ContactGraph(self.rule.window_days)
        self.release_day: Dict[int, int] = {}
        self.episode_start: Dict[int, int] = {}
        self.tracker = TestRequestTracker()

    def _quarantined(self, day):
        return sorted(a for a, release in self.release_day.items() if release > day)

    def modifiers(self, day):
        if not self.active(day):
            return {}
        agents = self.sim.world.agents
        for agent_id, release in list(self.release_day.items()):
            if release <= day:
                agents[agent_id].recommendation_level = 1
                del self.release_day[agent_id]
                self.episode_start.pop(agent_id, None)
        return {a: apply_recommendation(agents[a], QUARANTINE_LEVEL) for a in self._quarantined(day)}

    def observe_encounters(self, day, encounters):
        # contacts from before the intervention day are never traced
        if not self.active(day):
            return
        world = self.sim.world
        for enc in encounters:
            if is_app_contact(enc, world):
                self.graph.add(enc.agent_a, enc.agent_b, day)
        self.graph.forget_before(day - self.rule.window_days)

    def test_requests(self, day):
        if not self.active(day):
            return []
        return [a for a in self._quarantined(day) if self.tracker.want(a, self.episode_start[a])]

    def on_test_results(self, day, results):
        if not self.active(day):
            return
        agents = self.sim.world.agents
        for result in results:
            if not result.positive or not agents[result.agent_id].has_app:
                continue
            targets = self.rule.to_quarantine(self.graph, result.agent_id, day) | {result.agent_id}
            release = day + self.rule.quarantine_days
            for agent_id in sorted(targets):
                if agent_id not in self.release_day:
                    self.episode_start[agent_id] = day
                self.release_day[agent_id] = max(release, self.release_day.get(agent_id, release))
                agents[agent_id].recommendation_level = QUARANTINE_LEVEL
            logger.debug("TRACING_QUARANTINE", extra={"day": day, "positive": result.agent_id,
                                                      "quarantined": len(targets)})

    def quarantined_count(self, day):
        return len(self._quarantined(day))


# ---------------------------------------------------------------------------
# Risk-awareness app
# ---------------------------------------------------------------------------

@register_policy(ScenarioKind.RISK_APP)
class RiskAppPolicy(Policy):
    """Phones estimate their own risk and message graded levels to their contacts.

    In shadow mode the whole pipeline runs but recommendations never change
    behaviour; the threshold calibration run uses it to sample raw scores.
    """

    def __init__(self, sim, scenario, shadow=False):
        super().__init__(sim, scenario)
        self.shadow = shadow
        definition = sim.definition
        world = sim.world
        transport = definition.transport
        self.transport = transport
        rng = sim.streams.stream("transport")
        self.chain = MixChain.from_config(transport, rng)
        self.courier = Courier()
        predictor_name = scenario.predictor or definition.risk.predictor
        predictor = get_predictor(predictor_name, cluster_threshold=definition.risk.cluster_threshold)
        self.phones: Dict[int, Phone] = {}
        self.messengers: Dict[int, PhoneMessenger] = {}
        for agent in world.app_agents():
            self.phones[agent.id] = Phone(agent.id, PhoneData.for_agent(agent), predictor, definition.thresholds)
            self.messengers[agent.id] = PhoneMessenger(
                agent.id, self.chain.suite, self.chain.publics, self.courier,
                np.random.default_rng(rng.integers(2**63)), max_delay_days=transport.max_delay_days)
        self.tracker = TestRequestTracker()
        self.level4_since: Dict[int, int] = {}
        self.reference_scores: List[np.ndarray] = []
        self.reference_tie_breaks: List[np.ndarray] = []
        self._senders = defaultdict(list)

        agg = definition.aggregation
        self.aggregation = agg
        agg_rng = sim.streams.stream("aggregation")
        app_ids = sorted(self.phones)
        n_opt_in = int(round(agg.opt_in_fraction * len(app_ids)))
        chosen = agg_rng.choice(app_ids, size=n_opt_in, replace=False) if n_opt_in else []
        self.opted_in: Set[int] = {int(a) for a in chosen}
        self.pseudonyms = {a: agg_rng.bytes(8).hex() for a in sorted(self.opted_in)}
        self.tag_keys = {a: agg_rng.bytes(16) for a in sorted(self.opted_in)}
        self.zone_table = lump_small_zones(world.zone_populations, agg.k_anonymity)
        self.aggregator = GeoAggregator(self.zone_table, agg.k_anonymity)
        self.store = RecordStore()
        self._heat_sent = {}
        self._flow_sent = {}

    def modifiers(self, day):
        if self.shadow or not self.active(day):
            return {}
        agents = self.sim.world.agents
        return {a: apply_recommendation(agents[a], agents[a].recommendation_level) for a in sorted(self.phones)}

    def observe_encounters(self, day, encounters):
        # the app starts logging on the intervention day
        if not self.active(day):
            return
        world = self.sim.world
        suite = self.chain.suite
        for enc in encounters:
            if not is_app_contact(enc, world):
                continue
            a, b = enc.agent_a, enc.agent_b
            pair = exchange_tokens(suite, suite.generate_keypair(), suite.generate_keypair())
            zone = world.locations[enc.location_id].zone_id
            for own, other, initiator in ((a, b, True), (b, a, False)):
                entry = self.phones[own].log_contact(day, enc.duration, enc.distance_band, zone_id=zone)
                self.messengers[own].add_contact(day, pair, initiator, entry)
                self._senders[own].append((entry, other))

    def observe_symptoms(self, day, agent_id, symptoms):
        if self.active(day) and agent_id in self.phones:
            self.phones[agent_id].observe_symptoms(day, symptoms)

    def test_requests(self, day):
        if self.shadow or not self.active(day):
            return []
        return [a for a, since in sorted(self.level4_since.items()) if self.tracker.want(a, since)]

    def on_test_results(self, day, results):
        if not self.active(day):
            return
        for result in results:
            phone = self.phones.get(result.agent_id)
            if phone is not None:
                phone.observe_test(result)

    def _report_flows(self, agent, phone, day):
        # one packet per (contact zone, day) carrying the highest level received there
        highest = {}
        for entry in phone.data.contact_log:
            if entry.arrival_day_of_last_update is None or entry.zone_id is None:
                continue
            key = (entry.zone_id, entry.day)
            highest[key] = max(highest.get(key, 0), entry.received_level)
        tag_key = self.tag_keys[agent.id]
        for (zone, contact_day), level in sorted(highest.items()):
            sent = self._flow_sent.get((agent.id, zone, contact_day))
            if sent == level:
                continue
            self.aggregator.ingest_flow(FlowMapPacket(agent.home_zone_id, contact_day, zone, level, sent,
                                                      contributor_tag(tag_key, contact_day)))
            self._flow_sent[(agent.id, zone, contact_day)] = level

    def _report_heat(self, agent, update, itinerary, day):
        tag_key = self.tag_keys[agent.id]
        for past in sorted(update.changed - {day}):
            sent = self._heat_sent.get((agent.id, past))
            new = int(update.levels[past])
            if sent is None or sent[1] == new:
                continue
            zones, old, nibble = sent
            for zone in zones:
                self.aggregator.ingest_heat(HeatMapPacket(zone, past, new, nibble, old_risk_level=old,
                                                          contributor=contributor_tag(tag_key, past)))
            self._heat_sent[(agent.id, past)] = (zones, new, nibble)
        if itinerary is None:
            return
        world = self.sim.world
        zones = sorted({world.locations[int(loc)].zone_id for loc in itinerary.slots[WAKE_SLOT:SLEEP_SLOT]})
        nibble = mobility_nibble(itinerary.trips, apply_recommendation(agent, agent.recommendation_level).hygiene)
        level = int(update.today_level)
        for zone in zones:
            self.aggregator.ingest_heat(HeatMapPacket(zone, day, level, nibble,
                                                      contributor=contributor_tag(tag_key, day)))
        self._heat_sent[(agent.id, day)] = (zones, level, nibble)

    def _record(self, agent, phone, itinerary, day):
        data = phone.data
        today = [e for e in data.contact_log if e.day == day]
        positives = [p for _, p in data.test_results]
        status = "positive" if any(positives) else "negative" if positives else "untested"
        world = self.sim.world
        visits = Counter()
        if itinerary is not None:
            for loc in itinerary.visited:
                visits[world.locations[loc].kind.value] += 1
        self.store.add(PseudonymizedRecord(
            pseudonym=self.pseudonyms[agent.id], age_band=agent.age_band, sex=agent.sex,
            conditions=agent.preexisting_conditions, symptoms_by_day=dict(data.symptoms_by_day),
            diagnosis_status=status, contact_count=len(today), contact_minutes=float(sum(e.duration for e in today)),
            received_levels=tuple(e.received_level for e in today), location_visits=dict(visits),
            received_day=day,
        ))

    def end_of_day(self, day, itineraries):
        if not self.active(day):
            return
        agents = self.sim.world.agents
        mailbox = self.chain.mailbox
        canary_due = (day - self.intervention_day) % self.transport.canary_interval_days == 0
        for agent_id in sorted(self.phones):
            agent = agents[agent_id]
            phone = self.phones[agent_id]
            messenger = self.messengers[agent_id]
            messenger.fetch_updates(mailbox, day, phone)
            update = phone.update(day)
            if self.shadow:
                self.reference_scores.append(np.asarray(phone.last_scores, dtype=float))
                self.reference_tie_breaks.append(phone.last_tie_breaks)
            else:
                agent.recommendation_level = update.recommendation
                if update.recommendation == QUARANTINE_LEVEL:
                    self.level4_since.setdefault(agent_id, day)
                else:
                    self.level4_since.pop(agent_id, None)
            messenger.broadcast(day, update)
            if canary_due:
                messenger.send_canary(day)
            if agent_id in self.opted_in:
                itinerary = itineraries.get(agent_id)
                self._report_flows(agent, phone, day)
                self._report_heat(agent, update, itinerary, day)
                self._record(agent, phone, itinerary, day)

        self.courier.dispatch_until(day + 1, self.chain)
        for agent_id in sorted(self.messengers):
            self.messengers[agent_id].canary_check(mailbox, day, self.transport.canary_timeout_days)
        mailbox.expire(day)
        horizon = day - WINDOW_DAYS
        self._heat_sent = {k: v for k, v in self._heat_sent.items() if k[1] >= horizon}
        self._flow_sent = {k: v for k, v in self._flow_sent.items() if k[2] >= horizon}
        for agent_id, pairs in self._senders.items():
            self._senders[agent_id] = [(e, s) for e, s in pairs if e.day >= horizon]
        expire_data(self.store, day, [p.data for p in self.phones.values()],
                    self.aggregation.record_retention_days, self.aggregation.log_retention_days)

    def quarantined_count(self, day):
        if self.shadow:
            return 0
        agents = self.sim.world.agents
        return sum(1 for a in self.phones if agents[a].recommendation_level == QUARANTINE_LEVEL)

    def canary_alarms(self):
        return sum(m.canary_alarms for m in self.messengers.values())

    def cluster_purity(self):
        labelled = []
        for agent_id, pairs in sorted(self._senders.items()):
            live = {id(e) for e in self.phones[agent_id].data.contact_log}
            labelled.append([(e.cluster_id, s) for e, s in pairs if id(e) in live and e.cluster_id is not None])
        return cluster_purity(labelled)

    def releases(self):
        """Heat-map, flow-map and demographic releases for every day seen."""
        days = self.aggregator.days()
        return {
            "heatmap": [self.aggregator.emit_heatmap(d) for d in days],
            "flowmap": [self.aggregator.emit_flowmap(d) for d in days],
            "demographics": [emit_demographics(self.store, d, self.aggregation.k_anonymity)
                             for d in sorted({r.received_day for r in self.store})],
        }

    def finish(self):
        drained = self.chain.drain(self.sim.definition.world.n_days - 1)
        if drained:
            logger.info("MIX_CHAIN_DRAINED", extra={"envelopes": drained})
        logger.info("RISK_APP_DONE", extra={"sent": sum(m.sent for m in self.messengers.values()),
                                           "received": sum(m.received for m in self.messengers.values()),
                                           "canary_alarms": self.canary_alarms(),
                                           "mix_dropped": self.chain.dropped()})
