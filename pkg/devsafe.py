#!/usr/bin/env python3
"""
Retention-constrained model development on desk-scale scenarios.

Every verb reads one JSON experiment document (--config) and writes its files
under the output directory (output.dir, or --out):

  scenario/            generated scenario (manifest.json, images.csv, texts.csv)
  w_old.json           base model
  runs/<run>.csv       one trajectory per (round, method, seed)
  runs/<run>.params.json
                       selected model of each run
  summary.csv          per-seed finals plus mean/std rows and the retention ratio
  summary.xlsx         the same table as a workbook

Usage examples:
  # Generate the scenario described in the config
  python devsafe.py generate --config configs/default.json

  # Train the base model w_old
  python devsafe.py train-base --config configs/default.json

  # Develop the target class with the penalty method on three seeds
  python devsafe.py develop --config configs/default.json --seeds 0,1,2

  # Same with the RM baseline at alpha 10
  python devsafe.py develop --config configs/default.json --override method=rm --override baseline.alpha=10

  # Load seeds from a file and continue interrupted runs from their checkpoints
  python devsafe.py develop --config configs/default.json --seeds @/tmp/seeds.txt --resume

  # Two consecutive rounds of development
  python devsafe.py multiround --config configs/multiround.json

  # Recompute the aggregate table from summary.csv
  python devsafe.py report --config configs/default.json

  # KKT residuals and constraint-Jacobian diagnostics of the selected models
  python devsafe.py kkt --config configs/default.json
  python devsafe.py diagnose-heads --config configs/default.json --override model.heads=true
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from tabulate import tabulate

import config
from retention.data import generate_scenario, make_base_model, save_scenario
from retention.errors import DevSafeError, DivergenceError, MetricError, PreconditionError
from retention.experiment import (SUMMARY_COLUMNS, SeedResult, base_model, check_targets, final_beta,
                                  load_experiment_scenario, load_params, prepare_round, read_seed_rows, run_name,
                                  run_seeds, save_params, seed_rows, summarize, write_summary)
from retention.files import read_csv
from retention.metrics import constraint_jacobian_sigma_min, lemma2_check, task_losses
from retention.model import attach_heads
from retention.optimizer import kkt_report
from retention.rng import RandomStreams
from utils import parse_seeds, save_to_excel, setup_logging

logger = logging.getLogger(__name__)

VERBS = ('generate', 'train-base', 'develop', 'multiround', 'report', 'kkt', 'diagnose-heads')

EXIT_ERROR = 1
EXIT_DIVERGED = 2


def output_paths(out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    return {
        'out': out,
        'scenario': out / 'scenario',
        'w_old': out / 'w_old.json',
        'runs': out / 'runs',
        'summary_csv': out / 'summary.csv',
        'summary_xlsx': out / 'summary.xlsx',
    }


def print_summary(rows: list[dict]) -> None:
    """Print the aggregate table: retention ratio and mean (std) per method and round."""
    if not rows:
        logger.info("No runs to summarize.")
        return
    table_data = []
    for group in summarize(rows):
        table_data.append([
            group.method, group.round, group.target, group.count,
            f"{group.retention_ratio:.2f}",
            f"{group.devsafety_mean:.4f} ({group.devsafety_std:.4f})",
            f"{group.delta_acc_mean:.4f} ({group.delta_acc_std:.4f})",
        ])
    headers = ["Method", "Round", "Target", "Seeds", "Retention ratio", "DevSafety(acc)", "ΔAcc(Target)"]
    print(tabulate(table_data, headers=headers, tablefmt="github"))
    print()


def save_summary(paths: dict[str, Path], results: list[SeedResult]) -> list[dict]:
    rows = seed_rows(results)
    table = write_summary(paths['summary_csv'], rows)
    save_to_excel(paths['summary_xlsx'], "Summary", SUMMARY_COLUMNS, table)
    logger.info(f"Wrote {paths['summary_csv']}")
    return rows


def cmd_generate(experiment: config.ExperimentConfig, paths: dict[str, Path]) -> None:
    if experiment.scenario_spec is None:
        logger.error("generate needs scenario.generate in the config (scenario.path names an existing scenario)")
        sys.exit(EXIT_ERROR)
    scenario = generate_scenario(experiment.scenario_spec)
    save_scenario(scenario, paths['scenario'])

    table_data = []
    for table_name, table in (('images', scenario.images), ('texts', scenario.texts)):
        counts: dict[tuple[str, str], int] = {}
        for split, tag in zip(table.splits, table.tags):
            counts[(split, tag)] = counts.get((split, tag), 0) + 1
        table_data += [[table_name, split, tag, count] for (split, tag), count in sorted(counts.items())]
    print(tabulate(table_data, headers=["Table", "Split", "Tag", "Count"], tablefmt="github"))
    print()


def cmd_train_base(experiment: config.ExperimentConfig, paths: dict[str, Path]) -> None:
    scenario = load_experiment_scenario(experiment)
    w_old = make_base_model(scenario, experiment.model.shape(scenario.spec), experiment.base)
    save_params(w_old, paths['w_old'])
    logger.info(f"Saved base model to {paths['w_old']}")

    table_data = []
    for target in scenario.spec.target_classes:
        setup = prepare_round(experiment, scenario, w_old, target, w_old.layout)
        losses = task_losses(w_old, setup.test)
        for task, zero_one, ce in zip(setup.tasks, losses.zero_one, losses.ce):
            table_data.append([target, task, f"{1.0 - zero_one:.4f}", f"{ce:.4f}"])
        table_data.append([target, f"{target} (target)", f"{losses.target_acc:.4f}", ''])
    print(tabulate(table_data, headers=["Round target", "Class", "Test acc", "Test ce"], tablefmt="github"))
    print()


def develop_targets(experiment: config.ExperimentConfig, scenario, multiround: bool) -> list[int]:
    targets = experiment.rounds or scenario.spec.target_classes
    targets = list(targets) if multiround else [targets[0]]
    check_targets(scenario, targets)
    return targets


def cmd_develop(experiment: config.ExperimentConfig, paths: dict[str, Path], resume: bool = False,
                multiround: bool = False) -> list[SeedResult]:
    """Run the configured method on every seed (and every round when `multiround`)."""
    scenario = load_experiment_scenario(experiment)
    w_old = base_model(experiment, scenario, paths['w_old'])
    targets = develop_targets(experiment, scenario, multiround)
    logger.info(f"Developing targets {targets} with {experiment.method} on seeds {experiment.seeds}")
    results = run_seeds(experiment, scenario, w_old, targets, experiment.seeds, paths['runs'], resume)
    rows = save_summary(paths, results)
    print_summary(rows)
    return results


def cmd_report(paths: dict[str, Path]) -> None:
    headers, rows = read_csv(paths['summary_csv'])
    print_summary(read_seed_rows(headers, rows, str(paths['summary_csv'])))


def round_models(experiment: config.ExperimentConfig, paths: dict[str, Path], seed: int, count: int):
    """Yield (round, w_old, selected) for the first `count` rounds of one seed."""
    w_old = load_params(paths['w_old'])
    for number in range(1, count + 1):
        selected = load_params(paths['runs'] / f"{run_name(experiment.method, number, seed)}.params.json")
        yield number, w_old, selected
        w_old = selected


def cmd_kkt(experiment: config.ExperimentConfig, paths: dict[str, Path], multiround: bool = False) -> None:
    scenario = load_experiment_scenario(experiment)
    targets = develop_targets(experiment, scenario, multiround)
    beta = final_beta(experiment)
    table_data = []
    for seed in experiment.seeds:
        for number, w_old, selected in round_models(experiment, paths, seed, len(targets)):
            setup = prepare_round(experiment, scenario, w_old, targets[number - 1], selected.layout,
                                  targets[:number - 1])
            report = kkt_report(selected, setup.problem, beta, experiment.solver)
            table_data.append([number, seed, f"{report.stationarity:.4e}", f"{report.violation:.4e}",
                               f"{report.complementarity:.4e}"])
    print(f"KKT residuals at beta = {beta:g}")
    print(tabulate(table_data, headers=["Round", "Seed", "Stationarity", "Violation", "Complementarity"],
                   tablefmt="github"))
    print()


def eigenvalue_gain_cell(p, specs) -> str:
    if not p.shape.heads_enabled:
        return 'n/a (no heads)'
    if not p.heads_are_zero():
        return 'n/a (heads nonzero)'
    try:
        gain = lemma2_check(p, specs)
    except (PreconditionError, MetricError) as e:
        return f"n/a ({e})"
    return f"{gain.lhs:.4e} >= {gain.rhs:.4e}: {'yes' if gain.holds else 'NO'}"


def cmd_diagnose_heads(experiment: config.ExperimentConfig, paths: dict[str, Path]) -> None:
    """σ_min of the constraint Jacobian with heads off and on, and the eigenvalue-gain check."""
    scenario = load_experiment_scenario(experiment)
    target = develop_targets(experiment, scenario, False)[0]
    w_old = base_model(experiment, scenario, paths['w_old'])
    models = [('w_old', attach_heads(w_old, experiment.model.r, RandomStreams(experiment.seeds[0])['init']))]
    for seed in experiment.seeds:
        path = paths['runs'] / f"{run_name(experiment.method, 1, seed)}.params.json"
        if path.exists():
            models.append((f"seed {seed}", load_params(path)))
        else:
            logger.warning(f"No selected model at {path}")

    specs = prepare_round(experiment, scenario, w_old, target, w_old.layout).problem.specs
    table_data = []
    for label, p in models:
        off = constraint_jacobian_sigma_min(p, specs, heads='off')
        on = constraint_jacobian_sigma_min(p, specs, heads='on') if p.shape.heads_enabled else None
        table_data.append([label, f"{off:.4e}", '' if on is None else f"{on:.4e}", eigenvalue_gain_cell(p, specs)])
    print(tabulate(table_data, headers=["Model", "σ_min heads off", "σ_min heads on", "Eigenvalue gain"],
                   tablefmt="github"))
    print()


def parse_arguments(argv: list[str] | None = None):
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        description='Retention-constrained model development',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )

    parser.add_argument(
        'verb',
        choices=VERBS,
        help='What to run'
    )
    parser.add_argument(
        '-c', '--config',
        type=str,
        default=str(config.DEFAULT_CONFIG_PATH),
        help='Experiment JSON document (default: configs/default.json)'
    )
    parser.add_argument(
        '-o', '--out',
        type=str,
        help='Output directory (overrides output.dir)'
    )
    parser.add_argument(
        '-s', '--seeds',
        type=str,
        help='Seeds, comma-separated (e.g., "0,1,2"). Use @filepath to load from file'
    )
    parser.add_argument(
        '--override',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='Set a config field by dotted path, e.g. solver.beta=1000 (repeatable)'
    )
    parser.add_argument(
        '--resume',
        action='store_true',
        help='Continue runs from their checkpoints (needs solver.checkpoint_every > 0)'
    )
    parser.add_argument(
        '--log-level',
        type=str,
        default='INFO',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
        help='Logging level'
    )

    return parser.parse_args(argv)


def load_experiment(args) -> config.ExperimentConfig:
    overrides = list(args.override)
    if args.out:
        overrides.append(f"output.dir={args.out}")
    config.load_config(args.config, overrides)
    experiment = config.get_experiment()
    if args.seeds:
        experiment = replace(experiment, seeds=parse_seeds(args.seeds))
    return experiment


def dispatch(args, experiment: config.ExperimentConfig) -> None:
    paths = output_paths(experiment.output_dir)
    if args.verb == 'generate':
        cmd_generate(experiment, paths)
    elif args.verb == 'train-base':
        cmd_train_base(experiment, paths)
    elif args.verb == 'develop':
        cmd_develop(experiment, paths, args.resume)
    elif args.verb == 'multiround':
        cmd_develop(experiment, paths, args.resume, multiround=True)
    elif args.verb == 'report':
        cmd_report(paths)
    elif args.verb == 'kkt':
        cmd_kkt(experiment, paths, multiround=bool(experiment.rounds and len(experiment.rounds) > 1))
    else:
        cmd_diagnose_heads(experiment, paths)


def main(argv: list[str] | None = None) -> None:
    """Main function to execute the script."""
    args = parse_arguments(argv)
    setup_logging(args.log_level)

    try:
        experiment = load_experiment(args)
        dispatch(args, experiment)
    except DivergenceError as e:
        logger.error(f"Run diverged: {e}")
        if e.checkpoint_path:
            logger.error(f"Last checkpoint: {e.checkpoint_path}")
        sys.exit(EXIT_DIVERGED)
    except (DevSafeError, FileNotFoundError, ValueError) as e:
        logger.error(str(e))
        sys.exit(EXIT_ERROR)


if __name__ == "__main__":
    main()
