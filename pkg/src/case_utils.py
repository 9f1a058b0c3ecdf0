# src/case_utils.py
"""
Utilities for discovering case folders.
"""
import os

import yaml

CASES_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'cases')


def discover_cases(cases_dir=CASES_DIR):
    """
    Discover all valid case folders in the cases/ directory.
    A valid case has a config.yml file.

    Returns:
        list: Case names (subdirectory names), sorted
    """
    if not os.path.isdir(cases_dir):
        return []

    cases = []
    for entry in os.listdir(cases_dir):
        if os.path.isfile(get_case_config_path(entry, cases_dir)):
            cases.append(entry)
    return sorted(cases)


def get_case_config_path(case_name, cases_dir=CASES_DIR):
    """Full path to a case's config.yml file."""
    return os.path.join(cases_dir, case_name, 'config.yml')


def case_summary(case_name, cases_dir=CASES_DIR):
    """(name, description) from a case config, without validation."""
    with open(get_case_config_path(case_name, cases_dir), 'r') as f:
        config = yaml.safe_load(f) or {}
    return config.get('name', case_name), config.get('description', '')
