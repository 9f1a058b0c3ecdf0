# src/simulation.py
"""
Day-by-day driver tying the world, the disease and an intervention policy together.

Daily order (fixed; the pre-intervention trace depends on it):
     1. advance disease states, reconcile hospital and ICU beds
     2. refresh background cold/flu
     3. policy distancing and behaviour modifiers
     4. plan itineraries
     5. detect encounters
     6. apply encounter behaviour (distance, duration)
     7. policy observes encounters (app contact logging)
     8. direct transmission, then environmental transmission
     9. symptoms
    10. test requests: admissions, clinical, level 4
    11. test results released, policy reacts
    12. policy end-of-day (phones, messaging, aggregation)
    13. metrics; visited stores and parks become known locations
"""
import logging
from dataclasses import replace

from src.disease import (BackgroundIllness, CareUnits, CurveSampler, DiseaseState, ExposureContext,
                         Status, TestingLab, environmental_exposures, sample_disease_course,
                         sample_symptoms, status_counts, transmit)
from src.metrics import DailyMetrics, InfectionTree, RunRecord, estimate_rt
from src.policies import build_policy
from src.rng import RandomStreams
from src.world import (CARE_KINDS, DISCRETIONARY_KINDS, NO_BEHAVIOUR_CHANGE, LocationKind,
                       apply_encounter_behaviour, build_occupancy, build_world, detect_encounters,
                       plan_day)

logger = logging.getLogger(__name__)

CLINICAL_SYMPTOMS = frozenset({"fever", "difficulty_breathing"})


class Simulation:
    """One run of one scenario for one seed.

    Attributes:
        world: the synthetic city (owned by this run)
        states: per-agent DiseaseState, indexed by agent id
        tree: infection forest; its node count is the cumulative case count
        daily: DailyMetrics appended by step_day
    """

    def __init__(self, definition, scenario, seed=None, intervention_day=None, policy_factory=None):
        self.definition = definition
        self.scenario = scenario
        world_cfg = definition.world if seed is None else replace(definition.world, seed=int(seed))
        self.seed = world_cfg.seed
        self.n_days = world_cfg.n_days
        self.intervention_day = (definition.scenario.intervention_day
                                 if intervention_day is None else int(intervention_day))
        self.streams = RandomStreams(self.seed)
        self.world = build_world(world_cfg)
        self.disease = definition.disease
        self.sampler = CurveSampler(self.disease)
        self.states = [DiseaseState() for _ in self.world.agents]
        self.tree = InfectionTree()
        for agent_id in self.world.initial_exposed:
            state = self._course(agent_id, 0.0, None)
            self.states[agent_id] = state
            self.tree.add_seed(agent_id, 0, state.infectious_end)
        self.lab = TestingLab(definition.testing, self.streams.stream("testing"))
        self.care = CareUnits(self.world)
        self.background = BackgroundIllness(self.disease)
        self.known_locations = {a.id: set() for a in self.world.agents}
        self.deceased = set()
        self.symptomatic = set()
        self.tested_positive = set()
        self.daily = []
        self.encounter_count = 0
        self.encounter_transmissions = 0
        self.last_encounters = []
        self._rt = None
        factory = policy_factory or (lambda sim: build_policy(scenario, sim))
        self.policy = factory(self)

    def _course(self, agent_id, timestamp, source):
        agent = self.world.agents[agent_id]
        return sample_disease_course(agent, self.streams.keyed("disease", agent_id), self.disease,
                                     self.sampler, timestamp=timestamp, source=source)

    def _infect(self, event):
        state = self._course(event.recipient, event.timestamp, event.exposure_source())
        self.states[event.recipient] = state
        kind = self.world.location_kind(event.location_id)
        self.tree.add_infection(event.source, event.recipient, event.day, kind,
                                infectious_end=state.infectious_end, via_location=event.via_location)

    def _context(self, encounter, modifiers):
        world = self.world
        kind = world.location_kind(encounter.location_id)
        a, b = world.agents[encounter.agent_a], world.agents[encounter.agent_b]
        ma = modifiers.get(a.id, NO_BEHAVIOUR_CHANGE)
        mb = modifiers.get(b.id, NO_BEHAVIOUR_CHANGE)
        outside = kind is not LocationKind.HOUSEHOLD
        at_care = kind in CARE_KINDS
        return ExposureContext(
            masked_a=(ma.mask_outside_household and outside) or (a.is_healthcare_worker and at_care),
            masked_b=(mb.mask_outside_household and outside) or (b.is_healthcare_worker and at_care),
            healthcare_a=a.is_healthcare_worker and at_care,
            healthcare_b=b.is_healthcare_worker and at_care,
            hygiene_a=ma.hygiene,
            hygiene_b=mb.hygiene,
        )

    def step_day(self, day):
        world, states, policy, streams = self.world, self.states, self.policy, self.streams

        for agent_id, state in enumerate(states):
            if state.advance(float(day)):
                self.deceased.add(agent_id)
        needs = {a: LocationKind.ICU if states[a].extremely_sick else LocationKind.HOSPITAL
                 for a in range(len(states)) if states[a].needs_care_at(float(day))}
        admitted = self.care.update(needs)
        confined = dict(self.care.occupant_of)

        self.background.refresh(day, world.agents, streams.stream("background"))

        distancing = policy.distancing(day)
        modifiers = policy.modifiers(day)

        itineraries = plan_day(world, day, self.definition.mobility, streams, modifiers,
                               self.known_locations, distancing, confined, absent=self.deceased)
        occupancy = build_occupancy(itineraries)
        encounters = detect_encounters(occupancy, day, world, streams.stream("encounters"))
        encounters = apply_encounter_behaviour(encounters, world, modifiers)
        self.last_encounters = encounters
        self.encounter_count += len(encounters)
        policy.observe_encounters(day, encounters)

        before = len(self.tree)
        rng = streams.stream("transmission")
        for encounter in encounters:
            event = transmit(encounter, states, self.disease, rng, self._context(encounter, modifiers))
            if event is not None:
                self._infect(event)
                self.encounter_transmissions += 1
        for event in environmental_exposures(itineraries, occupancy, states, world, day, self.disease,
                                             streams.stream("environment")):
            if states[event.recipient].status is Status.SUSCEPTIBLE:
                self._infect(event)

        clinical = []
        for agent in world.agents:
            if agent.id in self.deceased:
                continue
            state = states[agent.id]
            if state.curve is None and agent.id not in self.background.active:
                continue
            rng = streams.keyed("symptoms", agent.id, day)
            covid = sample_symptoms(state, day, self.disease, rng)
            cold = self.background.symptoms(agent.id, rng)
            if covid:
                state.symptoms_by_day[day] = covid
                self.symptomatic.add(agent.id)
            combined = covid | cold
            if combined:
                policy.observe_symptoms(day, agent.id, combined)
            if combined & CLINICAL_SYMPTOMS and rng.random() < self.disease.clinical_test_probability:
                clinical.append(agent.id)

        requests = set(admitted) | set(clinical) | set(policy.test_requests(day))
        for agent_id in sorted(requests):
            if agent_id in self.tested_positive or agent_id in self.deceased or self.lab.has_pending(agent_id):
                continue
            infected = states[agent_id].status in (Status.EXPOSED, Status.INFECTIOUS)
            self.lab.request(agent_id, infected, day)
        results = self.lab.results_due(day)
        for result in results:
            if result.positive:
                self.tested_positive.add(result.agent_id)
        policy.on_test_results(day, results)

        policy.end_of_day(day, itineraries)

        self._rt = estimate_rt(self.tree, day, self.definition.scenario.rt_window, self._rt)
        counts = status_counts(states)
        alive = len(world.agents) - len(self.deceased)
        metrics = DailyMetrics(
            day=day,
            new_infections=len(self.tree) - before,
            cumulative_cases=len(self.tree),
            rt_estimate=self._rt.value,
            rt_carried_forward=self._rt.carried_forward,
            mean_contacts_per_agent=2.0 * len(encounters) / alive if alive else 0.0,
            hospitalized=self.care.count(LocationKind.HOSPITAL),
            icu=self.care.count(LocationKind.ICU),
            tests_performed=self.lab.performed_on(day),
            quarantined_agent_days=policy.quarantined_count(day),
            susceptible=counts[Status.SUSCEPTIBLE],
            exposed=counts[Status.EXPOSED],
            infectious=counts[Status.INFECTIOUS],
            recovered=counts[Status.RECOVERED],
            canary_alarms=policy.canary_alarms(),
        )
        self.daily.append(metrics)

        for agent_id, itinerary in itineraries.items():
            known = self.known_locations[agent_id]
            for loc in itinerary.visited:
                if world.location_kind(loc) in DISCRETIONARY_KINDS:
                    known.add(loc)
        return metrics

    def run(self):
        for day in range(self.n_days):
            step_day(self, day)
        self.policy.finish()
        return self.record()

    def record(self):
        return RunRecord(
            scenario=self.scenario.label,
            seed=self.seed,
            intervention_day=self.intervention_day,
            daily=list(self.daily),
            tree=self.tree,
            encounter_count=self.encounter_count,
            encounter_transmissions=self.encounter_transmissions,
            infected_age_bands={n: self.world.agents[n].age_band for n in self.tree.graph.nodes},
            symptomatic=set(self.symptomatic),
            tested_positive=set(self.tested_positive),
            cluster_purity=self.policy.cluster_purity(),
            canary_alarms=self.policy.canary_alarms(),
            distancing_strength=self.scenario.distancing_strength,
            last_day=self.n_days - 1,
        )


def step_day(sim, day):
    """Advance `sim` by one day and return that day's DailyMetrics."""
    if sim.daily and day != sim.daily[-1].day + 1:
        raise ValueError(f"days must be stepped in order; expected {sim.daily[-1].day + 1}, got {day}")
    return sim.step_day(day)
