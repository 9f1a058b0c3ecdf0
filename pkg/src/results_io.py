# src/results_io.py
"""
Output files. CSV and JSON only; every output directory gets one manifest.json.

    simulate          metrics.csv, infection_tree.csv, validation.csv, manifest.json
                      (+ encounters.csv)
    compare           runs/<scenario>_seed<k>.csv, plot_data.csv, summary.json, manifest.json
    aggregate-export  heatmap.csv, flowmap.csv, demographics.csv, manifest.json
    calibrate         quantizer_thresholds.txt, quantizer_thresholds.reference.npz,
                      calibration.json, manifest.json
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import pandas as pd

from src import __version__
from src.aggregation import FLOWMAP_COLUMNS, HEATMAP_COLUMNS, releases_frame
from src.metrics import report_frame, validation_report

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: Optional[object]
    scenario: Optional[str]
    code_version: str = __version__
    outputs: List[str] = field(default_factory=list)
    duration_s: float = 0.0
    notes: List[str] = field(default_factory=list)


def ensure_out_dir(path):
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory is not writable: {path}")
    return path


def write_csv(frame, out_dir, name):
    path = os.path.join(out_dir, name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return name


def write_json(payload, out_dir, name):
    with open(os.path.join(out_dir, name), 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return name


def write_manifest(manifest, out_dir):
    manifest.outputs = sorted(set(manifest.outputs))
    write_json(asdict(manifest), out_dir, MANIFEST_NAME)
    return MANIFEST_NAME


def read_manifest(out_dir):
    with open(os.path.join(out_dir, MANIFEST_NAME), 'r') as f:
        return RunManifest(**json.load(f))


def write_simulation_outputs(record, out_dir, encounters=None):
    """Files for one run; returns the names written."""
    written = [
        write_csv(record.frame(), out_dir, "metrics.csv"),
        write_csv(record.tree.edges_frame(), out_dir, "infection_tree.csv"),
        write_csv(report_frame(validation_report([record])), out_dir, "validation.csv"),
    ]
    if encounters is not None:
        written.append(write_csv(encounters, out_dir, "encounters.csv"))
    return written


def write_comparison_outputs(result, out_dir):
    written = []
    for label, runs in result.runs.items():
        for run in runs:
            written.append(write_csv(run.frame(), out_dir, os.path.join("runs", f"{label}_seed{run.seed}.csv")))
    written.append(write_csv(result.plot_frame(), out_dir, "plot_data.csv"))
    written.append(write_json(result.summary(), out_dir, "summary.json"))
    return written


def write_aggregate_outputs(releases, out_dir):
    demographics = [row for release in releases["demographics"] for row in release.rows]
    suppressed = {name: int(sum(r.suppressed for r in releases[name])) for name in releases}
    written = [
        write_csv(releases_frame(releases["heatmap"], HEATMAP_COLUMNS), out_dir, "heatmap.csv"),
        write_csv(releases_frame(releases["flowmap"], FLOWMAP_COLUMNS), out_dir, "flowmap.csv"),
        write_csv(pd.DataFrame(demographics).fillna(0), out_dir, "demographics.csv"),
    ]
    logger.info("AGGREGATES_WRITTEN", extra={"suppressed": suppressed})
    return written, suppressed
