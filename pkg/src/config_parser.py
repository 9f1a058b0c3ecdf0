"""
config_parser.py
Loader and validator for covisim case config.yml files.
Supports optional Jinja2 templating for parameter sweeps.
"""
import json
import os

import yaml

from src.errors import ConfigError

try:
    from jinja2 import Environment, FileSystemLoader
    JINJA2_AVAILABLE = True
except ImportError:
    JINJA2_AVAILABLE = False

try:
    import jsonschema
    JSONSCHEMA_AVAILABLE = True
except ImportError:
    JSONSCHEMA_AVAILABLE = False


def load_schema():
    """Load the config schema from config_schema.json"""
    schema_path = os.path.join(os.path.dirname(__file__), 'config_schema.json')
    if not os.path.isfile(schema_path):
        return None
    with open(schema_path, 'r') as f:
        return json.load(f)


def _dotted(path):
    return '.'.join(str(p) for p in path) or '<root>'


def _field(error):
    field = _dotted(error.absolute_path)
    if error.validator == 'additionalProperties':
        field += ' (unknown key)'
    return field


def schema_errors(config, schema=None):
    """All schema violations in `config` as (field, message) pairs, sorted by field."""
    schema = schema if schema is not None else load_schema()
    validator = jsonschema.validators.validator_for(schema)(schema)
    found = [(_field(e), e.message) for e in validator.iter_errors(config)]
    return sorted(found)


def validate_config_schema(config, verbose=True):
    """
    Check `config` against config_schema.json.
    Raises ConfigError for the first offending field and counts the rest.
    """
    if not JSONSCHEMA_AVAILABLE:
        print("Warning: jsonschema not installed. Skipping schema validation.")
        return

    schema = load_schema()
    if schema is None:
        print("Warning: config_schema.json not found. Skipping schema validation.")
        return

    errors = schema_errors(config, schema)
    if not errors:
        if verbose:
            print("  [OK] Config validation passed")
        return
    if verbose:
        print(f"  [FAIL] {len(errors)} config error(s):")
        for field, message in errors:
            print(f"    {field}: {message}")
    field, message = errors[0]
    if len(errors) > 1:
        message += f" (and {len(errors) - 1} more)"
    raise ConfigError(field, message)


def load_config(config_path, use_jinja2=False, jinja_vars=None, validate=True, verbose=True):
    """
    Loads and validates a covisim config.yml file.
    If use_jinja2 is True, renders with Jinja2 before parsing YAML.
    Args:
        config_path (str): Path to config.yml
        use_jinja2 (bool): Whether to use Jinja2 templating
        jinja_vars (dict): Variables for Jinja2 rendering
        validate (bool): Check against config_schema.json
    Returns:
        dict: Parsed config dictionary
    """
    if not os.path.isfile(config_path):
        raise FileNotFoundError(f"Config file not found: {config_path}")

    try:
        if use_jinja2:
            if not JINJA2_AVAILABLE:
                raise ImportError("Jinja2 not installed. Install with 'pip install jinja2'.")
            env = Environment(loader=FileSystemLoader(os.path.dirname(os.path.abspath(config_path))))
            template = env.get_template(os.path.basename(config_path))
            config = yaml.safe_load(template.render(jinja_vars or {}))
        else:
            with open(config_path, 'r') as f:
                config = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError('<document>', f"not valid YAML: {e}") from e

    if not isinstance(config, dict):
        raise ConfigError('<root>', "config must be a mapping")

    if validate:
        validate_config_schema(config, verbose=verbose)

    config['config_dir'] = os.path.dirname(os.path.abspath(config_path))
    return config
