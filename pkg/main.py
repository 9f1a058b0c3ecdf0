# main.py
"""
covisim command-line entry point.

    python main.py simulate --case pilot1000 --scenario risk_app --seed 3 --out out/run
    python main.py compare --case pilot1000 --seeds 0 1 2 3 4 --threads 4 --out out/compare
    python main.py protocol-demo --drop-attack
    python main.py aggregate-export --case pilot1000 --out out/aggregates
    python main.py calibrate --case pilot1000 --seeds 0 1 2 --out out/calibration
    python main.py list-cases

Exit codes: 0 success, 2 config error, 3 I/O error, 4 equalization did not
converge (--strict-equalization only), 5 network error.
"""
import argparse
import logging
import os
import sys
import time
from dataclasses import replace

from src.case_utils import case_summary, discover_cases, get_case_config_path
from src.errors import ConfigError, ConvergenceError
from src.loopback import run_protocol_demo
from src.policies import SCENARIO_LABELS, Scenario
from src.results_io import (RunManifest, ensure_out_dir, write_aggregate_outputs, write_comparison_outputs,
                            write_json, write_manifest, write_simulation_outputs)
from src.risk import reference_sample_path
from src.scenarios import calibrate_base_rate, compare, fit_thresholds
from src.simulation import Simulation
from src.util import build_run_definition
from src.world import encounters_frame

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CONVERGENCE = 4
EXIT_NETWORK = 5


class _NetworkError(Exception):
    pass


def _config_path(args):
    if args.case:
        return get_case_config_path(args.case)
    return args.config


def _definition(args, seed=None):
    return build_run_definition(_config_path(args), seed=seed, use_jinja2=args.jinja)


def cmd_simulate(args):
    out_dir = ensure_out_dir(args.out)
    definition = _definition(args, seed=args.seed)
    strength = definition.scenario.distancing_strength if args.strength is None else args.strength
    scenario = Scenario.parse(args.scenario, strength=strength, predictor=definition.risk.predictor)
    print(f"Running {scenario.label} (seed {definition.world.seed}, strength {scenario.distancing_strength:.3f})")
    started = time.time()
    sim = Simulation(definition, scenario, intervention_day=args.intervention_day)
    encounters = [] if args.export_encounters else None
    for day in range(sim.n_days):
        metrics = sim.step_day(day)
        if encounters is not None:
            encounters.extend(sim.last_encounters)
        print(f"  day {day:3d}: cases {metrics.cumulative_cases:5d}  R_t {metrics.rt_estimate:.2f}")
    sim.policy.finish()
    record = sim.record()
    frame = encounters_frame(encounters, sim.world) if encounters is not None else None
    outputs = write_simulation_outputs(record, out_dir, frame)
    manifest = RunManifest("simulate", definition.digest, definition.world.seed, scenario.label,
                           outputs=outputs, duration_s=round(time.time() - started, 3))
    write_manifest(manifest, out_dir)
    print(f"Wrote {len(outputs) + 1} files to {out_dir}")
    return EXIT_OK


def cmd_compare(args):
    out_dir = ensure_out_dir(args.out)
    definition = _definition(args)
    print(f"Comparing scenarios over seeds {args.seeds} ({args.threads} threads)")
    started = time.time()
    result = compare(definition, args.seeds, threads=args.threads, strict=args.strict_equalization)
    outputs = write_comparison_outputs(result, out_dir)
    notes = [f"{label}: equalization gap {eq.gap:.2%}"
             + ("" if eq.converged else f" (not converged: {eq.reason or 'bisection exhausted'})")
             for label, eq in result.equalization.items()]
    manifest = RunManifest("compare", definition.digest, list(args.seeds), "all", outputs=outputs,
                           duration_s=round(time.time() - started, 3), notes=notes)
    write_manifest(manifest, out_dir)
    for label, entry in result.summary()["scenarios"].items():
        print(f"  {label:20s} final cases {entry['final_cases_mean']:8.1f}  "
              f"strength {entry['distancing_strength']:.3f}")
    print(f"Ordering verdict: {result.verdict}")
    return EXIT_OK


def cmd_protocol_demo(args):
    try:
        report = run_protocol_demo(n_servers=args.servers, batch_threshold=args.batch, null_crypto=not args.real_crypto,
                                   canaries=not args.no_canaries, drop_attack=args.drop_attack,
                                   n_messages=args.messages, n_pairs=args.pairs, seed=args.seed)
    except OSError as e:
        raise _NetworkError(str(e)) from e
    for line in report.lines():
        print(line)
    if args.transcript:
        for line in report.transcript:
            print(line)
    return EXIT_OK


def cmd_aggregate_export(args):
    out_dir = ensure_out_dir(args.out)
    definition = _definition(args, seed=args.seed)
    scenario = Scenario.risk_app(definition.risk.predictor, definition.scenario.distancing_strength)
    print(f"Running {scenario.label} with aggregation (seed {definition.world.seed})")
    started = time.time()
    sim = Simulation(definition, scenario)
    sim.run()
    outputs, suppressed = write_aggregate_outputs(sim.policy.releases(), out_dir)
    manifest = RunManifest("aggregate-export", definition.digest, definition.world.seed, scenario.label,
                           outputs=outputs, duration_s=round(time.time() - started, 3),
                           notes=[f"suppressed {name}: {n}" for name, n in sorted(suppressed.items())])
    write_manifest(manifest, out_dir)
    print(f"Wrote {len(outputs) + 1} files to {out_dir}")
    return EXIT_OK


def cmd_calibrate(args):
    out_dir = ensure_out_dir(args.out)
    definition = _definition(args)
    started = time.time()
    payload = {}
    if not args.skip_base_rate:
        print(f"Calibrating base rate against R_t in [{args.rt_low}, {args.rt_high}]")
        result = calibrate_base_rate(definition, args.seeds, target=(args.rt_low, args.rt_high),
                                     threads=args.threads)
        print(f"  base_rate {result.base_rate:.5f}  mean R_t {result.mean_rt:.3f}  converged {result.converged}")
        payload.update(base_rate=result.base_rate, mean_rt=result.mean_rt, converged=result.converged,
                       steps=result.steps)
        if not result.converged and args.strict:
            raise ConvergenceError(f"base rate calibration stopped at R_t {result.mean_rt:.3f}")
        definition = replace(definition, disease=replace(definition.disease, base_rate=result.base_rate))
    print("Sampling reference predictor scores")
    thresholds, sample = fit_thresholds(definition, args.seeds[0], rounds=args.rounds)
    thresholds_file = os.path.join(out_dir, "quantizer_thresholds.txt")
    thresholds.save(thresholds_file)
    sample.save(reference_sample_path(thresholds_file))
    masses = sample.bin_masses(thresholds)
    print(f"  {len(sample)} reference scores, bin masses {masses.min():.4f} to {masses.max():.4f}")
    payload.update(thresholds=list(thresholds.cuts), reference_scores=len(sample), bin_masses=masses.tolist())
    outputs = ["quantizer_thresholds.txt", "quantizer_thresholds.reference.npz",
               write_json(payload, out_dir, "calibration.json")]
    manifest = RunManifest("calibrate", definition.digest, list(args.seeds), "unmitigated", outputs=outputs,
                           duration_s=round(time.time() - started, 3))
    write_manifest(manifest, out_dir)
    print(f"Wrote {len(outputs) + 1} files to {out_dir}")
    return EXIT_OK


def cmd_list_cases(args):
    for case in discover_cases():
        name, description = case_summary(case)
        print(f"{case:14s} {name}: {description}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")

    config = argparse.ArgumentParser(add_help=False)
    source = config.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="path to a case config.yml")
    source.add_argument("--case", help="case name under cases/")
    config.add_argument("--jinja", action="store_true", help="render the config with Jinja2 first")

    parser = argparse.ArgumentParser(prog="covisim", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common, config], help="run one scenario")
    p.add_argument("--scenario", choices=SCENARIO_LABELS, default="unmitigated")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--strength", type=float, default=None, help="distancing strength override")
    p.add_argument("--intervention-day", type=int, default=None)
    p.add_argument("--export-encounters", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", parents=[common, config], help="all scenarios under equalized mobility")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--strict-equalization", action="store_true", help="fail (exit 4) if equalization does not converge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("protocol-demo", parents=[common], help="mix chain and mailbox over loopback TCP")
    p.add_argument("--servers", type=int, default=3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--messages", type=int, default=100)
    p.add_argument("--pairs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    crypto = p.add_mutually_exclusive_group()
    crypto.add_argument("--null-crypto", action="store_true", help="deterministic identity ciphers (default)")
    crypto.add_argument("--real-crypto", action="store_true", help="X25519 / AES-GCM")
    p.add_argument("--no-canaries", action="store_true")
    p.add_argument("--drop-attack", action="store_true", help="first mix forwards only one sender's messages")
    p.add_argument("--transcript", action="store_true", help="print the deposit order")
    p.set_defaults(func=cmd_protocol_demo)

    p = sub.add_parser("aggregate-export", parents=[common, config], help="heat-map and flow-map CSVs")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate_export)

    p = sub.add_parser("calibrate", parents=[common, config], help="base rate and quantizer thresholds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--rt-low", type=float, default=2.0)
    p.add_argument("--rt-high", type=float, default=2.6)
    p.add_argument("--skip-base-rate", action="store_true")
    p.add_argument("--rounds", type=int, default=1, help="threshold refits, each replaying the shadow run on the last fit")
    p.add_argument("--strict", action="store_true", help="fail (exit 4) if the base rate search does not converge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("list-cases", parents=[common], help="cases shipped under cases/")
    p.set_defaults(func=cmd_list_cases)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO
    except ConvergenceError as e:
        print(f"Convergence error: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except _NetworkError as e:
        print(f"Network error: {e}", file=sys.stderr)
        return EXIT_NETWORK
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
