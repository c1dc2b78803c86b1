#!/usr/bin/env python3
"""
Desk-scale study

Runs every experiment arm of one configuration against a shared scenario and
base model:
- the penalty method with few and with many constraint samples per task
- the RM and WCCL baselines over their weight grids
- task heads on/off and a cosine-increasing beta (when study.ablations is set)

Each arm writes its runs and summary under <output.dir>/<arm>/.

Usage examples:
  python study.py --config configs/default.json
  python study.py --config configs/default.json --seeds 0,1 --override study.ablations=false
"""

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from tabulate import tabulate

import config
import devsafe
from retention.baselines import BaselineConfig
from retention.data import save_scenario
from retention.errors import DevSafeError, DivergenceError
from retention.experiment import SeedResult, base_model, load_experiment_scenario, seed_rows, summarize
from utils import format_duration, parse_seeds, setup_logging

logger = logging.getLogger(__name__)


def study_arms(experiment: config.ExperimentConfig) -> list[tuple[str, config.ExperimentConfig]]:
    """(arm name, experiment) for every arm of the study, in run order."""
    study = experiment.study
    penalty = replace(experiment, method='penalty', baseline=None)
    arms = [(f"penalty-n{count}", replace(penalty, constraint_samples=count)) for count in study.sample_counts]
    for alpha in study.rm_alphas:
        arms.append((f"rm-a{alpha:g}", replace(experiment, method='rm', baseline=BaselineConfig('rm', alpha))))
    for alpha in study.wccl_alphas:
        arms.append((f"wccl-a{alpha:g}", replace(experiment, method='wccl', baseline=BaselineConfig('wccl', alpha))))
    if study.ablations:
        heads = not experiment.model.heads
        arms.append((f"penalty-heads-{'on' if heads else 'off'}",
                     replace(penalty, model=replace(experiment.model, heads=heads))))
        solver = experiment.solver
        cosine = replace(solver, beta_schedule='cosine', beta_min=solver.beta_min or 0.0,
                         beta_max=solver.beta_max or solver.beta)
        arms.append(("penalty-beta-cosine", replace(penalty, solver=cosine)))
    return arms


def run_arm(name: str, experiment: config.ExperimentConfig, out: Path, w_old_path: Path) -> list[SeedResult]:
    paths = devsafe.output_paths(out / name)
    paths['w_old'] = w_old_path
    return devsafe.cmd_develop(replace(experiment, output_dir=str(out / name)), paths)


def print_study(results: dict[str, list[SeedResult]]) -> None:
    table_data = []
    for name, arm in results.items():
        rows = seed_rows(arm)
        group = summarize(rows)[0]
        negatives = sum(1 for row in rows if row['test_devsafety_acc'] < 0)
        table_data.append([
            name, group.count, f"{group.retention_ratio:.2f}", negatives,
            f"{group.devsafety_mean:.4f} ({group.devsafety_std:.4f})",
            f"{group.delta_acc_mean:.4f} ({group.delta_acc_std:.4f})",
        ])
    headers = ["Arm", "Seeds", "Retention ratio", "Negative", "DevSafety(acc)", "ΔAcc(Target)"]
    print(tabulate(table_data, headers=headers, tablefmt="github"))


def parse_arguments(argv: list[str] | None = None):
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        description='Run the desk-scale study',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__
    )
    parser.add_argument('-c', '--config', type=str, default=str(config.DEFAULT_CONFIG_PATH),
                        help='Experiment JSON document')
    parser.add_argument('-o', '--out', type=str, help='Output directory (overrides output.dir)')
    parser.add_argument('-s', '--seeds', type=str, help='Seeds, comma-separated or @filepath')
    parser.add_argument('--override', action='append', default=[], metavar='KEY=VALUE',
                        help='Set a config field by dotted path (repeatable)')
    parser.add_argument('--log-level', type=str, default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level')
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> None:
    """Run every arm of the study and print the comparison."""
    args = parse_arguments(argv)
    setup_logging(args.log_level)
    print("=== Starting Desk-Scale Study ===\n")

    start_time = time.time()
    try:
        overrides = list(args.override) + ([f"output.dir={args.out}"] if args.out else [])
        config.load_config(args.config, overrides)
        experiment = config.get_experiment()
        if args.seeds:
            experiment = replace(experiment, seeds=parse_seeds(args.seeds))
        out = Path(experiment.output_dir)

        scenario = load_experiment_scenario(experiment)
        if experiment.scenario_path is None:
            save_scenario(scenario, out / 'scenario')
            experiment = replace(experiment, scenario_path=str(out / 'scenario'), scenario_spec=None)
        w_old_path = out / 'w_old.json'
        base_model(experiment, scenario, w_old_path)

        results = {}
        arms = study_arms(experiment)
        for index, (name, arm) in enumerate(arms, start=1):
            print(f"\n=== [{index}/{len(arms)}] {name} ===\n")
            results[name] = run_arm(name, arm, out, w_old_path)
    except DivergenceError as e:
        logger.error(f"Run diverged: {e}")
        sys.exit(devsafe.EXIT_DIVERGED)
    except (DevSafeError, FileNotFoundError, ValueError) as e:
        logger.error(str(e))
        sys.exit(devsafe.EXIT_ERROR)

    total_time = int(time.time() - start_time)

    print("\n=== Study Complete ===\n")
    print_study(results)
    print(f"\nResults written under '{out}/'")
    print(f"\nTotal time: {format_duration(total_time)}\n")


if __name__ == "__main__":
    main()
