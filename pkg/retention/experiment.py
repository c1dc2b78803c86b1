"""
Experiment plumbing shared by the CLI and the study script.

A round develops one target class from a base model w_old: it builds the
target pair set, the retention constraints of every protected class and the
train/val/test evaluation sets, runs the configured method, picks the iterate
to keep and measures it on the test split. Seeds are independent workers;
multi-round runs chain each seed's selected model into the next round.
"""

import logging
import statistics
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

from .baselines import run_baseline
from .data import (Scenario, build_constraint_specs, build_eval_sets, generate_scenario, load_scenario,
                   make_base_model, target_pair_set, wccl_pair_sets)
from .errors import ConfigError, DivergenceError, ParseError
from .files import floats_to_hex, hex_to_floats, load_from_json, save_to_csv, save_to_json
from .metrics import delta_target_acc, dev_safety, make_evaluator, retention_ratio
from .model import ModelShape, ParamLayout, ParamVector, attach_heads
from .optimizer import RetentionProblem, RunResult, TrajectoryRecord, beta_schedule, run, select_iterate
from .parallel import run_parallel
from .rng import RandomStreams

if TYPE_CHECKING:
    from config import ExperimentConfig

logger = logging.getLogger(__name__)

PARAMS_FORMAT = "devsafe-params"
PARAMS_VERSION = 1

METRIC_COLUMNS = ('train_devsafety_ce', 'train_devsafety_acc', 'val_devsafety_ce', 'val_devsafety_acc',
                  'train_delta_acc', 'val_delta_acc')
SUMMARY_COLUMNS = ['method', 'round', 'target', 'seed', 'selected_step', 'test_devsafety_acc',
                   'test_devsafety_ce', 'test_delta_acc', 'retention_ratio']


def save_params(p: ParamVector, path: str | Path) -> None:
    """Write parameters as hex floats so that reloading is bit-exact."""
    save_to_json({
        'format': PARAMS_FORMAT,
        'version': PARAMS_VERSION,
        'shape': p.shape.to_dict(),
        'params': floats_to_hex(p.flat),
    }, path)


def load_params(path: str | Path) -> ParamVector:
    source = str(path)
    document = load_from_json(path)
    if document.get('format') != PARAMS_FORMAT:
        raise ParseError(source, "not a parameter file", field='format')
    if document.get('version') != PARAMS_VERSION:
        raise ParseError(source, f"unsupported version {document.get('version')}", field='version')
    try:
        shape = ModelShape.from_dict(document['shape'])
        flat = hex_to_floats(document['params'], source, 'params')
    except KeyError as e:
        raise ParseError(source, f"missing field {e}", field=str(e.args[0]))
    except TypeError as e:
        raise ParseError(source, f"bad shape: {e}", field='shape')
    return ParamVector(ParamLayout(shape), flat)


def load_experiment_scenario(experiment: 'ExperimentConfig') -> Scenario:
    if experiment.scenario_path is not None:
        return load_scenario(experiment.scenario_path)
    return generate_scenario(experiment.scenario_spec)


def base_model(experiment: 'ExperimentConfig', scenario: Scenario, path: str | Path | None = None) -> ParamVector:
    """Load w_old from `path` when it exists, otherwise train it (and save it there)."""
    if path is not None and Path(path).exists():
        logger.info(f"Loading base model from {path}")
        return load_params(path)
    p = make_base_model(scenario, experiment.model.shape(scenario.spec), experiment.base)
    if path is not None:
        save_params(p, path)
    return p


@dataclass
class RoundSetup:
    """Everything one development round needs besides the seed."""
    target: int
    tasks: list[int]
    problem: RetentionProblem
    evaluate: object
    test: object
    wccl_pairs: list | None


def round_tasks(scenario: Scenario, target: int, developed: Sequence[int] = ()) -> list[int]:
    """Classes to retain in a round: the protected classes and every earlier target, minus the current one."""
    return sorted((set(scenario.spec.protected_classes) | set(developed)) - {target})


def prepare_round(experiment: 'ExperimentConfig', scenario: Scenario, w_old: ParamVector, target: int,
                  layout: ParamLayout, developed: Sequence[int] = ()) -> RoundSetup:
    """
    Build the round that develops `target` from `w_old`.

    `developed` lists the targets of earlier rounds; their classes are
    retained like the protected ones.
    """
    tau0 = experiment.solver.tau0
    samples = experiment.constraint_samples
    tasks = round_tasks(scenario, target, developed)
    specs = build_constraint_specs(scenario, w_old, tasks, tau0, samples)
    problem = RetentionProblem(layout, target_pair_set(scenario, target), specs)
    train = build_eval_sets(scenario, 'train', tasks, target, tau0, samples)
    val = build_eval_sets(scenario, 'val', tasks, target, tau0)
    test = build_eval_sets(scenario, 'test', tasks, target, tau0)
    wccl_pairs = wccl_pair_sets(scenario, tasks, target, samples) if experiment.method == 'wccl' else None
    return RoundSetup(target, tasks, problem, make_evaluator(w_old, train, val), test, wccl_pairs)


@dataclass
class SeedResult:
    """Outcome of one (round, seed) run."""
    method: str
    round: int
    target: int
    seed: int
    tasks: list[int]
    trajectory: list[TrajectoryRecord]
    selected_step: int
    selected: ParamVector
    test_devsafety_acc: float
    test_devsafety_ce: float
    test_delta_acc: float

    @property
    def name(self) -> str:
        return run_name(self.method, self.round, self.seed)


def run_name(method: str, round_number: int, seed: int) -> str:
    return f"round{round_number}-{method}-seed{seed}"


def develop_round(experiment: 'ExperimentConfig', scenario: Scenario, w_old: ParamVector, target: int, seed: int,
                  round_number: int = 1, run_dir: str | Path | None = None, resume: bool = False,
                  developed: Sequence[int] = ()) -> SeedResult:
    """Run the configured method for one seed and keep the selected iterate."""
    initial = w_old
    if experiment.model.heads:
        initial = attach_heads(w_old, experiment.model.r, RandomStreams(seed)['init'])
    setup = prepare_round(experiment, scenario, w_old, target, initial.layout, developed)
    solver = replace(experiment.solver, seed=seed)
    name = run_name(experiment.method, round_number, seed)
    checkpoint = Path(run_dir) / f"{name}.ckpt.json" if run_dir is not None and solver.checkpoint_every else None

    if experiment.method == 'penalty':
        result: RunResult = run(setup.problem, solver, initial, evaluate=setup.evaluate,
                                checkpoint_path=checkpoint, resume=resume)
    else:
        result = run_baseline(experiment.baseline, solver, setup.problem, initial, setup.wccl_pairs,
                              evaluate=setup.evaluate, checkpoint_path=checkpoint, resume=resume)

    if result.trajectory:
        chosen = select_iterate(result.trajectory, experiment.selection_policy, experiment.selection_tol)
        step = chosen.step
        selected = setup.problem.to_params(result.snapshots[step])
    else:
        step, selected = 0, initial

    outcome = SeedResult(
        method=experiment.method, round=round_number, target=target, seed=seed, tasks=setup.tasks,
        trajectory=result.trajectory, selected_step=step, selected=selected,
        test_devsafety_acc=dev_safety(selected, w_old, setup.test, 'zero-one'),
        test_devsafety_ce=dev_safety(selected, w_old, setup.test, 'ce'),
        test_delta_acc=delta_target_acc(selected, w_old, setup.test),
    )
    if run_dir is not None:
        write_trajectory(Path(run_dir) / f"{name}.csv", outcome.trajectory, setup.tasks, experiment.wall_clock)
        save_params(selected, Path(run_dir) / f"{name}.params.json")
    logger.info(f"{name}: step {step} selected, DevSafety(acc)={outcome.test_devsafety_acc:.4f} "
                f"dAcc={outcome.test_delta_acc:.4f}")
    return outcome


def develop_rounds(experiment: 'ExperimentConfig', scenario: Scenario, w_old: ParamVector, targets: list[int],
                   seed: int, run_dir: str | Path | None = None, resume: bool = False) -> list[SeedResult]:
    """
    Chain rounds for one seed: round r+1 starts from round r's selected model
    and also retains the classes developed in rounds 1..r.
    """
    results = []
    current = w_old
    for number, target in enumerate(targets, start=1):
        outcome = develop_round(experiment, scenario, current, target, seed, number, run_dir, resume,
                                developed=targets[:number - 1])
        results.append(outcome)
        current = outcome.selected
    return results


def run_seeds(experiment: 'ExperimentConfig', scenario: Scenario, w_old: ParamVector, targets: list[int],
              seeds: list[int], run_dir: str | Path | None = None, resume: bool = False,
              max_workers: int | None = None) -> list[SeedResult]:
    """
    Run every seed in a worker and join.

    Results come back ordered by round, then seed. A diverged seed re-raises its
    DivergenceError after the join; any other failure raises the first error.
    """
    tasks = [{
        'func': develop_rounds,
        'args': (experiment, scenario, w_old, targets, seed, run_dir, resume),
        'context': {'name': f"seed {seed}"},
    } for seed in seeds]
    results, errors = run_parallel(tasks, max_workers)
    if errors:
        for name in sorted(errors):
            logger.error(f"{name} failed: {errors[name]}")
        diverged = [e for e in errors.values() if isinstance(e, DivergenceError)]
        raise diverged[0] if diverged else next(iter(errors.values()))
    collected = [outcome for seed in seeds for outcome in results[f"seed {seed}"]]
    return sorted(collected, key=lambda r: (r.round, seeds.index(r.seed)))


def trajectory_columns(tasks: list[int], wall_clock: bool = False) -> list[str]:
    columns = ['step', 'epoch', 'beta', 'eta', 'objective', 'penalty']
    columns += [f"h_{k}" for k in tasks]
    columns += list(METRIC_COLUMNS)
    columns += ['stationarity', 'violation', 'complementarity']
    columns += [f"weight_{k}" for k in tasks]
    if wall_clock:
        columns.append('wall_ms')
    return columns


def trajectory_rows(trajectory: list[TrajectoryRecord], wall_clock: bool = False) -> list[list]:
    rows = []
    for record in trajectory:
        row = [record.step, record.epoch, record.beta, record.eta, record.objective, record.penalty]
        row += list(record.h)
        row += [record.metrics.get(key, float('nan')) for key in METRIC_COLUMNS]
        row += [record.kkt.stationarity, record.kkt.violation, record.kkt.complementarity]
        row += list(record.effective_weights)
        if wall_clock:
            row.append(record.wall_ms)
        rows.append(row)
    return rows


def write_trajectory(path: str | Path, trajectory: list[TrajectoryRecord], tasks: list[int],
                     wall_clock: bool = False) -> None:
    save_to_csv(path, trajectory_columns(tasks, wall_clock), trajectory_rows(trajectory, wall_clock))


@dataclass(frozen=True)
class GroupSummary:
    method: str
    round: int
    target: int
    count: int
    retention_ratio: float
    devsafety_mean: float
    devsafety_std: float
    delta_acc_mean: float
    delta_acc_std: float


def summarize(rows: list[dict]) -> list[GroupSummary]:
    """
    Aggregate per-seed finals by (method, round).

    Rows carry `method`, `round`, `target`, `test_devsafety_acc` and
    `test_delta_acc`. Standard deviations are population deviations.
    """
    groups: dict[tuple[str, int], list[dict]] = {}
    for row in rows:
        groups.setdefault((row['method'], int(row['round'])), []).append(row)
    summaries = []
    for (method, round_number), members in groups.items():
        safety = [float(r['test_devsafety_acc']) for r in members]
        delta = [float(r['test_delta_acc']) for r in members]
        summaries.append(GroupSummary(
            method, round_number, int(members[0]['target']), len(members), retention_ratio(safety),
            statistics.fmean(safety), statistics.pstdev(safety),
            statistics.fmean(delta), statistics.pstdev(delta),
        ))
    return summaries


def seed_rows(results: list[SeedResult]) -> list[dict]:
    return [{
        'method': r.method, 'round': r.round, 'target': r.target, 'seed': r.seed,
        'selected_step': r.selected_step, 'test_devsafety_acc': r.test_devsafety_acc,
        'test_devsafety_ce': r.test_devsafety_ce, 'test_delta_acc': r.test_delta_acc,
    } for r in results]


def summary_table(rows: list[dict]) -> list[list]:
    """Per-seed rows followed by one `mean` and one `std` row per (method, round)."""
    table = [[row.get(column, '') for column in SUMMARY_COLUMNS] for row in rows]
    for group in summarize(rows):
        members = [r for r in rows if r['method'] == group.method and int(r['round']) == group.round]
        ce = [float(r['test_devsafety_ce']) for r in members]
        table.append([group.method, group.round, group.target, 'mean', '', group.devsafety_mean,
                      statistics.fmean(ce), group.delta_acc_mean, group.retention_ratio])
        table.append([group.method, group.round, group.target, 'std', '', group.devsafety_std,
                      statistics.pstdev(ce), group.delta_acc_std, ''])
    return table


def write_summary(path: str | Path, rows: list[dict]) -> list[list]:
    table = summary_table(rows)
    save_to_csv(path, SUMMARY_COLUMNS, table)
    return table


def read_seed_rows(headers: list[str], rows: list[list[str]], source: str = 'summary.csv') -> list[dict]:
    """Per-seed rows of a summary file (aggregate rows are skipped)."""
    if headers != SUMMARY_COLUMNS:
        raise ParseError(source, "unexpected summary columns", line=1)
    parsed = []
    for number, row in enumerate(rows, start=2):
        record = dict(zip(headers, row))
        if record['seed'] in ('mean', 'std'):
            continue
        try:
            parsed.append({
                'method': record['method'], 'round': int(record['round']), 'target': int(record['target']),
                'seed': int(record['seed']), 'selected_step': int(record['selected_step']),
                'test_devsafety_acc': float(record['test_devsafety_acc']),
                'test_devsafety_ce': float(record['test_devsafety_ce']),
                'test_delta_acc': float(record['test_delta_acc']),
            })
        except ValueError as e:
            raise ParseError(source, str(e), line=number)
    return parsed


def check_targets(scenario: Scenario, targets: list[int]) -> None:
    for target in targets:
        if target not in scenario.spec.target_classes:
            raise ConfigError('rounds', f"class {target} is not a target class of the scenario "
                                        f"{scenario.spec.target_classes}")


def final_beta(experiment: 'ExperimentConfig') -> float:
    """β at the last step, the multiplier scale used for KKT reports of finals."""
    return beta_schedule(experiment.solver.iterations, experiment.solver)
