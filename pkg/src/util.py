import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional

from src.aggregation import AggregationConfig
from src.config_parser import load_config
from src.disease import DiseaseConfig, TestConfig
from src.errors import ConfigError
from src.messaging import TransportConfig
from src.policies import ScenarioConfig
from src.risk import QuantizerThresholds, RiskConfig, reference_sample_path
from src.scenarios import fit_thresholds
from src.world import MobilityConfig, WorldConfig

logger = logging.getLogger(__name__)

# Config keys whose YAML lists become tuples on the dataclasses.
TUPLE_FIELDS = {
    'world': ('household_sizes', 'weekend_days'),
    'mobility': ('stop_count_cdf', 'store_slots', 'park_slots'),
}


@dataclass(frozen=True)
class RunDefinition:
    """Everything a run needs, typed and validated."""
    name: str
    description: str
    world: WorldConfig
    mobility: MobilityConfig
    disease: DiseaseConfig
    testing: TestConfig
    risk: RiskConfig
    transport: TransportConfig
    aggregation: AggregationConfig
    scenario: ScenarioConfig
    thresholds: QuantizerThresholds
    digest: str
    config_path: Optional[str] = None

    def with_seed(self, seed):
        return dataclasses.replace(self, world=dataclasses.replace(self.world, seed=int(seed)))


def build_section(cls, section_name, values):
    """Instantiate a config dataclass from one YAML section."""
    values = dict(values or {})
    for key in TUPLE_FIELDS.get(section_name, ()):
        if key in values:
            values[key] = tuple(values[key])
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{section_name}.{key}", "unknown key")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(section_name, str(e)) from e


def config_digest(config, thresholds):
    """SHA-256 over the canonical JSON of the config and the resolved thresholds."""
    payload = {k: v for k, v in config.items() if k != 'config_dir'}
    payload['_thresholds'] = list(thresholds.cuts)
    canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def thresholds_path(risk, config_dir):
    if not risk.thresholds_file:
        return None
    path = risk.thresholds_file
    return path if os.path.isabs(path) else os.path.join(config_dir, path)


def resolve_thresholds(risk, config_dir):
    """Cut points named by the risk section; None when they still have to be fitted."""
    path = thresholds_path(risk, config_dir)
    if path is None:
        return QuantizerThresholds.uniform()
    if os.path.isfile(path):
        return QuantizerThresholds.load(path)
    if risk.calibrate_if_missing:
        return None
    raise ConfigError('risk.thresholds_file', f"file not found: {path}")


def calibrate_missing_thresholds(definition, path, seed, verbose=True):
    """Fit thresholds from a shadow run and save them with their reference sample."""
    if verbose:
        print(f"  Fitting quantizer thresholds into {path}")
    thresholds, sample = fit_thresholds(definition.with_seed(seed), seed)
    thresholds.save(path)
    sample.save(reference_sample_path(path))
    logger.info("THRESHOLDS_CALIBRATED", extra={"path": path, "samples": len(sample), "seed": seed})
    return thresholds


def build_run_definition(config_path, seed=None, verbose=True, use_jinja2=False, jinja_vars=None):
    """
    Loads a case config and builds the typed RunDefinition used by every command.
    """
    if verbose:
        print(f"Loading configuration from: {config_path}")
    config = load_config(config_path, use_jinja2=use_jinja2, jinja_vars=jinja_vars, verbose=verbose)

    world_values = dict(config.get('world') or {})
    if seed is not None:
        world_values['seed'] = int(seed)
    world = build_section(WorldConfig, 'world', world_values)
    risk = build_section(RiskConfig, 'risk', config.get('risk'))
    thresholds = resolve_thresholds(risk, config['config_dir'])
    pending = thresholds is None
    if pending:
        thresholds = QuantizerThresholds.uniform()
    definition = RunDefinition(
        name=config['name'],
        description=config.get('description', ''),
        world=world,
        mobility=build_section(MobilityConfig, 'mobility', config.get('mobility')),
        disease=build_section(DiseaseConfig, 'disease', config.get('disease')),
        testing=build_section(TestConfig, 'testing', config.get('testing')),
        risk=risk,
        transport=build_section(TransportConfig, 'transport', config.get('transport')),
        aggregation=build_section(AggregationConfig, 'aggregation', config.get('aggregation')),
        scenario=build_section(ScenarioConfig, 'scenario', config.get('scenario')),
        thresholds=thresholds,
        digest=config_digest(config, thresholds),
        config_path=os.path.abspath(config_path),
    )
    if pending:
        calibration_seed = int((config.get('world') or {}).get('seed', WorldConfig.seed))
        thresholds = calibrate_missing_thresholds(definition, thresholds_path(risk, config['config_dir']),
                                                  calibration_seed, verbose)
        definition = dataclasses.replace(definition, thresholds=thresholds,
                                         digest=config_digest(config, thresholds))
    if verbose:
        print(f"  Population {world.population}, {world.n_days} days, app adoption {world.app_adoption:.0%}")
    return definition
