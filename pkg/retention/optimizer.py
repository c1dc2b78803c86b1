"""
Penalty solver loop.

`run` executes the moving-average penalty method on any `Problem`:

    sample B, B_c and B_k
    update u1/u2 on B, then G1 with the updated averages
    update u_k on B_c, then G2 with the updated averages
    v ← (1−θ)v + θ(G1 + G2)
    w ← w − η v

Retention problems use the two-tower model; `GenericProblem` wraps plain
value/gradient callables so the same loop runs on analytic test instances.
"""

import logging
import math
import os
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .errors import ConfigError, DivergenceError, ParseError
from .estimators import (EstimatorState, constraint_gradient, pair_gradient, update_constraint_averages,
                         update_momentum, update_pair_averages)
from .files import check_fields, floats_to_hex, hex_to_floats, load_from_json, save_to_json
from .losses import (ConstraintSpec, PairSet, constraint_h, constraint_terms, grad_h, pair_terms, positive_part,
                     value_and_grad_F)
from .model import ParamLayout, ParamVector
from .rng import RandomStreams, sample_without_replacement

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "devsafe-checkpoint"
CHECKPOINT_VERSION = 1

# Penalty values beyond this magnitude abort the run.
DIVERGENCE_LIMIT = 1e12

SCHEDULES = ('constant', 'cosine')


@dataclass
class SolverConfig:
    """Inputs of the penalty solver. Batch sizes set to None mean "the full pool"."""
    iterations: int = 1000
    eta: float = 0.1
    eta_schedule: str = 'constant'
    eta_min: float = 0.0
    weight_decay: float = 0.0
    beta: float = 100.0
    beta_schedule: str = 'constant'
    beta_min: float | None = None
    beta_max: float | None = None
    gamma1: float = 0.8
    gamma2: float = 0.8
    theta: float = 0.1
    batch_size: int | None = None
    constraint_batch: int | None = None
    task_batch: int | None = 10
    text_negatives: int | None = None
    image_negatives: int | None = None
    tau: float = 0.05
    tau0: float = 0.05
    seed: int = 0
    log_every: int = 50
    iterations_per_epoch: int | None = None
    checkpoint_every: int = 0
    preset: dict | None = None

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = 'solver') -> None:
        def fail(name, message):
            raise ConfigError(f"{prefix}.{name}", message)

        def integer(name, minimum, optional=False):
            value = getattr(self, name)
            if value is None and optional:
                return
            if isinstance(value, bool) or not isinstance(value, int):
                fail(name, f"must be an integer, got {value!r}")
            if value < minimum:
                fail(name, f"must be >= {minimum}, got {value}")

        def real(name, positive=True, optional=False):
            value = getattr(self, name)
            if value is None and optional:
                return
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                fail(name, f"must be a finite number, got {value!r}")
            if positive and value <= 0:
                fail(name, f"must be > 0, got {value}")
            if not positive and value < 0:
                fail(name, f"must be >= 0, got {value}")

        integer('iterations', 0)
        integer('log_every', 1)
        integer('checkpoint_every', 0)
        integer('seed', 0)
        if self.seed >= 2**64:
            fail('seed', "must fit in 64 bits")
        for name in ('batch_size', 'constraint_batch', 'task_batch', 'text_negatives',
                     'image_negatives', 'iterations_per_epoch'):
            integer(name, 1, optional=True)
        for name in ('eta', 'beta', 'tau', 'tau0'):
            real(name)
        for name in ('eta_min', 'weight_decay'):
            real(name, positive=False)
        for name in ('gamma1', 'gamma2', 'theta'):
            real(name)
            if getattr(self, name) > 1:
                fail(name, f"must be in (0, 1], got {getattr(self, name)}")
        for name in ('eta_schedule', 'beta_schedule'):
            if getattr(self, name) not in SCHEDULES:
                fail(name, f"must be one of {SCHEDULES}, got {getattr(self, name)!r}")
        if self.eta_min > self.eta:
            fail('eta_min', f"must not exceed eta ({self.eta})")
        if self.beta_schedule == 'cosine':
            real('beta_min', positive=False)
            real('beta_max')
            if self.beta_min > self.beta_max:
                fail('beta_min', f"must not exceed beta_max ({self.beta_max})")
        else:
            real('beta_min', positive=False, optional=True)
            real('beta_max', optional=True)

    @classmethod
    def from_dict(cls, data: dict, prefix: str = 'solver') -> 'SolverConfig':
        check_fields(data, [f.name for f in fields(cls)], prefix)
        config = cls.__new__(cls)
        for f in fields(cls):
            default = f.default
            setattr(config, f.name, data.get(f.name, default))
        config.validate(prefix)
        if config.preset is not None:
            config = apply_preset(config, config.preset, prefix)
        return config

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    violation: float
    complementarity: float
    h: tuple[float, ...]
    multipliers: tuple[float, ...]


@dataclass
class TrajectoryRecord:
    """One logged iterate. `metrics` holds problem-specific evaluation values."""
    step: int
    epoch: int
    beta: float
    eta: float
    objective: float
    penalty: float
    h: tuple[float, ...]
    kkt: KKTReport
    effective_weights: tuple[float, ...]
    metrics: dict[str, float] = field(default_factory=dict)
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        def hexed(values):
            return floats_to_hex(values)
        return {
            'step': self.step, 'epoch': self.epoch,
            'beta': float(self.beta).hex(), 'eta': float(self.eta).hex(),
            'objective': float(self.objective).hex(), 'penalty': float(self.penalty).hex(),
            'h': hexed(self.h),
            'kkt': {
                'stationarity': float(self.kkt.stationarity).hex(),
                'violation': float(self.kkt.violation).hex(),
                'complementarity': float(self.kkt.complementarity).hex(),
                'multipliers': hexed(self.kkt.multipliers),
            },
            'effective_weights': hexed(self.effective_weights),
            'metrics': {key: float(value).hex() for key, value in self.metrics.items()},
            'wall_ms': float(self.wall_ms).hex(),
        }

    @classmethod
    def from_dict(cls, data: dict, source: str = '<memory>') -> 'TrajectoryRecord':
        h = tuple(hex_to_floats(data['h'], source, 'records.h'))
        kkt = data['kkt']
        return cls(
            step=int(data['step']), epoch=int(data['epoch']),
            beta=float.fromhex(data['beta']), eta=float.fromhex(data['eta']),
            objective=float.fromhex(data['objective']), penalty=float.fromhex(data['penalty']),
            h=h,
            kkt=KKTReport(
                stationarity=float.fromhex(kkt['stationarity']),
                violation=float.fromhex(kkt['violation']),
                complementarity=float.fromhex(kkt['complementarity']),
                h=h,
                multipliers=tuple(hex_to_floats(kkt['multipliers'], source, 'records.kkt')),
            ),
            effective_weights=tuple(hex_to_floats(data['effective_weights'], source, 'records.effective_weights')),
            metrics={key: float.fromhex(value) for key, value in data['metrics'].items()},
            wall_ms=float.fromhex(data['wall_ms']),
        )


@dataclass
class RunResult:
    final: Any
    trajectory: list[TrajectoryRecord]
    kkt: list[KKTReport]
    snapshots: dict[int, np.ndarray]
    checkpoint_path: str | None = None


class Problem(Protocol):
    """What the solver loop needs from a problem."""

    @property
    def dim(self) -> int: ...

    @property
    def n_items(self) -> int: ...

    @property
    def constraint_sizes(self) -> list[int]: ...

    def to_params(self, w: np.ndarray) -> Any: ...

    def to_flat(self, params: Any) -> np.ndarray: ...

    def check_config(self, config: SolverConfig) -> None: ...

    def pair_gradient(self, w: np.ndarray, state: EstimatorState, batch: np.ndarray,
                      rng: np.random.Generator, config: SolverConfig) -> np.ndarray: ...

    def constraint_terms(self, w: np.ndarray, tasks: np.ndarray, batches: list,
                         rng: np.random.Generator, config: SolverConfig): ...

    def full_objective(self, w: np.ndarray, config: SolverConfig) -> tuple[float, np.ndarray]: ...

    def full_constraints(self, w: np.ndarray, config: SolverConfig) -> tuple[np.ndarray, np.ndarray]: ...


def _negative_subsets(pairs: PairSet, batch: np.ndarray, size: int | None, rng: np.random.Generator):
    if size is None:
        return None
    return [sample_without_replacement(rng, pairs.pool_indices(i), size) for i in batch]


def _check_batch(name: str, size: int | None, available: int) -> None:
    if size is not None and size > available:
        raise ConfigError(f"solver.{name}", f"must be <= {available} (pool size), got {size}")


@dataclass
class RetentionProblem:
    """Target contrastive objective F with retention constraints h_k on the two-tower model."""
    layout: ParamLayout
    pairs: PairSet
    specs: list[ConstraintSpec]

    @property
    def dim(self) -> int:
        return self.layout.size

    @property
    def n_items(self) -> int:
        return self.pairs.n_pairs

    @property
    def constraint_sizes(self) -> list[int]:
        return [spec.n_k for spec in self.specs]

    def to_params(self, w: np.ndarray) -> ParamVector:
        return ParamVector(self.layout, w)

    def to_flat(self, params) -> np.ndarray:
        if isinstance(params, ParamVector):
            if params.layout != self.layout:
                raise ConfigError('initial', "parameter layout does not match the problem")
            return params.flat.copy()
        return np.asarray(params, dtype=np.float64).copy()

    def check_config(self, config: SolverConfig) -> None:
        _check_batch('batch_size', config.batch_size, self.n_items)
        _check_batch('constraint_batch', config.constraint_batch, len(self.specs))
        if self.specs:
            _check_batch('task_batch', config.task_batch, min(self.constraint_sizes))
        pool = self.pairs.min_pool_size()
        _check_batch('text_negatives', config.text_negatives, pool)
        _check_batch('image_negatives', config.image_negatives, pool)

    def pair_gradient(self, w, state, batch, rng, config):
        text_subsets = _negative_subsets(self.pairs, batch, config.text_negatives, rng)
        image_subsets = _negative_subsets(self.pairs, batch, config.image_negatives, rng)
        terms = pair_terms(self.to_params(w), self.pairs, batch, text_subsets, image_subsets, config.tau)
        update_pair_averages(state, batch, config.gamma1, terms.g1, terms.g2)
        return pair_gradient(state, terms)

    def constraint_terms(self, w, tasks, batches, rng, config):
        return constraint_terms(self.to_params(w), self.specs, tasks, batches)

    def full_objective(self, w, config):
        return value_and_grad_F(self.to_params(w), self.pairs, config.tau)

    def full_constraints(self, w, config):
        p = self.to_params(w)
        h = np.array([constraint_h(p, spec) for spec in self.specs])
        J = np.column_stack([grad_h(p, spec) for spec in self.specs]) if self.specs else np.zeros((self.dim, 0))
        return h, J


@dataclass
class StackedTerms:
    """Constraint values with explicit gradients; vjp is a weighted column sum."""
    tasks: np.ndarray
    values: np.ndarray
    grads: np.ndarray

    def vjp(self, coefs: np.ndarray) -> np.ndarray:
        return self.grads.T @ np.asarray(coefs, dtype=np.float64)


ValueGrad = Callable[[np.ndarray, np.random.Generator | None], tuple[float, np.ndarray]]


@dataclass
class GenericProblem:
    """
    min F(w) s.t. h_k(w) ≤ 0 over plain vectors.

    Each callable takes (w, rng) and returns (value, gradient); rng is None for
    exact evaluations and a generator when the solver samples, so callables
    may return stochastic estimates.
    """
    dimension: int
    objective: ValueGrad
    constraints: Sequence[ValueGrad] = ()

    @property
    def dim(self) -> int:
        return self.dimension

    @property
    def n_items(self) -> int:
        return 1

    @property
    def constraint_sizes(self) -> list[int]:
        return [1] * len(self.constraints)

    def to_params(self, w):
        return np.asarray(w, dtype=np.float64).copy()

    def to_flat(self, params):
        flat = np.asarray(params, dtype=np.float64).reshape(-1).copy()
        if flat.size != self.dimension:
            raise ConfigError('initial', f"expected {self.dimension} coordinates, got {flat.size}")
        return flat

    def check_config(self, config):
        _check_batch('constraint_batch', config.constraint_batch, len(self.constraints))

    def pair_gradient(self, w, state, batch, rng, config):
        _, grad = self.objective(w, rng)
        return np.asarray(grad, dtype=np.float64)

    def constraint_terms(self, w, tasks, batches, rng, config):
        evaluated = [self.constraints[k](w, rng) for k in tasks]
        values = np.array([value for value, _ in evaluated], dtype=np.float64)
        grads = np.array([np.asarray(grad, dtype=np.float64) for _, grad in evaluated])
        return StackedTerms(np.asarray(tasks), values, grads)

    def full_objective(self, w, config):
        value, grad = self.objective(w, None)
        return float(value), np.asarray(grad, dtype=np.float64)

    def full_constraints(self, w, config):
        if not self.constraints:
            return np.zeros(0), np.zeros((self.dim, 0))
        evaluated = [c(w, None) for c in self.constraints]
        h = np.array([value for value, _ in evaluated], dtype=np.float64)
        J = np.column_stack([np.asarray(grad, dtype=np.float64) for _, grad in evaluated])
        return h, J


class EpochSampler:
    """Per-epoch shuffled minibatches of {0..n−1}; a full-size batch is always 0..n−1."""

    def __init__(self, n: int, batch_size: int | None, rng: np.random.Generator):
        self.n = n
        self.batch_size = n if batch_size is None else min(batch_size, n)
        self.rng = rng
        self.order = np.arange(n)
        self.position = n

    def next_batch(self) -> np.ndarray:
        if self.batch_size >= self.n:
            return np.arange(self.n)
        if self.position + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.position = 0
        batch = np.sort(self.order[self.position:self.position + self.batch_size])
        self.position += self.batch_size
        return batch

    def get_state(self) -> dict:
        return {'order': self.order.tolist(), 'position': self.position}

    def set_state(self, state: dict) -> None:
        self.order = np.array(state['order'], dtype=np.int64)
        self.position = int(state['position'])


def beta_schedule(t: int, config: SolverConfig) -> float:
    """Constant β, or β_min + (β_max − β_min)(1 − cos(π t/T))/2 rising to β_max at t = T."""
    if config.beta_schedule == 'constant':
        return float(config.beta)
    if config.iterations == 0:
        return float(config.beta_min)
    fraction = min(t, config.iterations) / config.iterations
    return config.beta_min + (config.beta_max - config.beta_min) * (1.0 - math.cos(math.pi * fraction)) / 2.0


def eta_schedule(t: int, config: SolverConfig) -> float:
    """Constant η, or cosine decay from η to η_min over T iterations."""
    if config.eta_schedule == 'constant' or config.iterations == 0:
        return float(config.eta)
    fraction = min(t, config.iterations) / config.iterations
    return config.eta_min + (config.eta - config.eta_min) * (1.0 + math.cos(math.pi * fraction)) / 2.0


def kkt_from_values(grad_F: np.ndarray, h: np.ndarray, J: np.ndarray, beta: float) -> KKTReport:
    h = np.asarray(h, dtype=np.float64)
    m = h.size
    active = positive_part(h)
    multipliers = beta * active / m if m else np.zeros(0)
    residual = grad_F + J @ multipliers if m else grad_F
    return KKTReport(
        stationarity=float(np.linalg.norm(residual)),
        violation=float(np.linalg.norm(active)),
        complementarity=float(multipliers @ active) if m else 0.0,
        h=tuple(float(v) for v in h),
        multipliers=tuple(float(v) for v in multipliers),
    )


def kkt_report(p, problem: Problem, beta: float, config: SolverConfig) -> KKTReport:
    """
    KKT residual triple with λ = (β/m)[h]_+ from exact full-data gradients.

    `config` must be the run's solver configuration; F depends on its τ.
    """
    if not isinstance(config, SolverConfig):
        raise ConfigError('solver', "kkt_report needs the run's SolverConfig")
    w = problem.to_flat(p)
    _, grad_F = problem.full_objective(w, config)
    h, J = problem.full_constraints(w, config)
    return kkt_from_values(grad_F, h, J, beta)


def penalty_value(objective: float, h: np.ndarray, beta: float) -> float:
    if len(h) == 0:
        return float(objective)
    return float(objective) + float(np.sum(0.5 * beta * positive_part(h) ** 2)) / len(h)


def estimate_bound(state: EstimatorState, beta: float) -> float:
    """
    Per-step stand-in for |Φ| from the estimator state alone.

    The larger of ‖v‖ and the penalty term of the averaged ĥ; no extra
    forward pass. Logged steps also check the exact Φ.
    """
    values = [float(np.linalg.norm(state.v))]
    if state.u_c.size:
        values.append(penalty_value(0.0, state.u_c, beta))
    if not all(math.isfinite(v) for v in values):
        return math.inf
    return max(values)


def select_iterate(trajectory: list[TrajectoryRecord], policy: str = 'best-val', tol: float = 1e-3) -> TrajectoryRecord:
    """
    Pick the logged iterate to keep.

    `last` takes the final record. `best-val` prefers records with validation
    DevSafety(acc) ≥ 0 and training DevSafety(ce) ≥ −tol, then the largest
    validation ΔAcc(Target), earliest step on ties; without any such record it
    falls back to the largest validation DevSafety(acc).
    """
    if not trajectory:
        raise ConfigError('selection.policy', "no logged iterates to select from")
    if policy == 'last':
        return trajectory[-1]
    if policy != 'best-val':
        raise ConfigError('selection.policy', f"must be 'best-val' or 'last', got {policy!r}")
    keys = ('val_devsafety_acc', 'train_devsafety_ce', 'val_delta_acc')
    if not all(key in trajectory[0].metrics for key in keys):
        return trajectory[-1]
    safe = [r for r in trajectory
            if r.metrics['val_devsafety_acc'] >= 0 and r.metrics['train_devsafety_ce'] >= -tol]
    if safe:
        return max(safe, key=lambda r: (r.metrics['val_delta_acc'], -r.step))
    return max(trajectory, key=lambda r: (r.metrics['val_devsafety_acc'], -r.step))


def save_checkpoint(path: str | Path, step: int, w: np.ndarray, state: EstimatorState, streams: RandomStreams,
                    sampler: EpochSampler, records: list[TrajectoryRecord], snapshots: dict[int, np.ndarray]) -> None:
    """Write the full solver state; keys appear in this order in the file."""
    document = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'step': step,
        'params': floats_to_hex(w),
        'estimator': state.to_dict(),
        'streams': streams.get_state(),
        'sampler': sampler.get_state(),
        'records': [record.to_dict() for record in records],
        'snapshots': {str(k): floats_to_hex(v) for k, v in snapshots.items()},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + '.tmp')
    save_to_json(document, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, dim: int) -> dict:
    source = str(path)
    document = load_from_json(path)
    if document.get('format') != CHECKPOINT_FORMAT:
        raise ParseError(source, "not a solver checkpoint", field='format')
    if document.get('version') != CHECKPOINT_VERSION:
        raise ParseError(source, f"unsupported checkpoint version {document.get('version')}", field='version')
    try:
        params = hex_to_floats(document['params'], source, 'params')
        if params.size != dim:
            raise ParseError(source, f"checkpoint has {params.size} parameters, problem has {dim}", field='params')
        return {
            'step': int(document['step']),
            'params': params,
            'estimator': EstimatorState.from_dict(document['estimator'], source),
            'streams': document['streams'],
            'sampler': document['sampler'],
            'records': [TrajectoryRecord.from_dict(r, source) for r in document['records']],
            'snapshots': {int(k): hex_to_floats(v, source, 'snapshots') for k, v in document['snapshots'].items()},
        }
    except KeyError as e:
        raise ParseError(source, f"missing field {e}", field=str(e.args[0]))


def run(
    problem: Problem,
    config: SolverConfig,
    initial,
    evaluate: Callable[[Any], dict[str, float]] | None = None,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
) -> RunResult:
    """
    Run the penalty solver for `config.iterations` steps.

    Iterates are logged at step 0, every `log_every` steps and at the end.
    With `checkpoint_path` and `checkpoint_every` > 0 the state is saved
    periodically; `resume=True` continues from that file bit-exactly.
    Logged steps abort on a non-finite or exploding exact Φ, and every step
    applies the same limit to `estimate_bound`.
    """
    problem.check_config(config)
    T = config.iterations
    m = len(problem.constraint_sizes)
    per_epoch = config.iterations_per_epoch or math.ceil(problem.n_items / (config.batch_size or problem.n_items))
    streams = RandomStreams(config.seed)
    sampler = EpochSampler(problem.n_items, config.batch_size, streams['pairs'])
    state = EstimatorState.create(problem.n_items, m)
    w = problem.to_flat(initial)
    records: list[TrajectoryRecord] = []
    snapshots: dict[int, np.ndarray] = {}
    start = 0
    last_checkpoint = None

    if resume:
        if checkpoint_path is None or not Path(checkpoint_path).exists():
            raise ConfigError('checkpoint', f"no checkpoint to resume from at {checkpoint_path}")
        saved = load_checkpoint(checkpoint_path, problem.dim)
        start, w, state = saved['step'], saved['params'], saved['estimator']
        streams.set_state(saved['streams'])
        sampler.set_state(saved['sampler'])
        records, snapshots = saved['records'], saved['snapshots']
        last_checkpoint = str(checkpoint_path)
        logger.info(f"Resuming from step {start} ({checkpoint_path})")

    if T == 0:
        return RunResult(problem.to_params(w), [], [], {}, last_checkpoint)

    clock = time.perf_counter()

    def log_step(t: int) -> None:
        beta_t = beta_schedule(t, config)
        objective, grad_F = problem.full_objective(w, config)
        h, J = problem.full_constraints(w, config)
        penalty = penalty_value(objective, h, beta_t)
        if not math.isfinite(penalty) or abs(penalty) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"penalty objective {penalty:.3e} at step {t}", last_checkpoint)
        if hasattr(problem, 'effective_weights'):
            weights = problem.effective_weights(state, beta_t)
        else:
            weights = beta_t * positive_part(state.u_c) if m else np.zeros(0)
        records.append(TrajectoryRecord(
            step=t, epoch=t // per_epoch, beta=beta_t, eta=eta_schedule(t, config),
            objective=objective, penalty=penalty, h=tuple(float(v) for v in h),
            kkt=kkt_from_values(grad_F, h, J, beta_t),
            effective_weights=tuple(float(v) for v in weights),
            metrics=evaluate(problem.to_params(w)) if evaluate else {},
            wall_ms=(time.perf_counter() - clock) * 1000.0,
        ))
        snapshots[t] = w.copy()
        last = records[-1]
        logger.debug(f"step {t}: F={objective:.6f} Phi={penalty:.6f} violation={last.kkt.violation:.3e}")

    all_tasks = np.arange(m)
    for t in range(start, T):
        if t % config.log_every == 0:
            log_step(t)
        beta_t = beta_schedule(t, config)
        eta_t = eta_schedule(t, config)

        batch = sampler.next_batch()
        g1 = problem.pair_gradient(w, state, batch, streams['negatives'], config)
        g2 = None
        if m:
            rng = streams['constraints']
            tasks = all_tasks if config.constraint_batch is None else \
                sample_without_replacement(rng, all_tasks, config.constraint_batch)
            batches = [None if config.task_batch is None or config.task_batch >= problem.constraint_sizes[k]
                       else sample_without_replacement(rng, np.arange(problem.constraint_sizes[k]), config.task_batch)
                       for k in tasks]
            terms = problem.constraint_terms(w, tasks, batches, rng, config)
            update_constraint_averages(state, tasks, config.gamma2, terms.values)
            g2 = constraint_gradient(state, terms, beta_t, tasks.size, w.size)
        update_momentum(state, g1, g2, config.theta)

        if config.weight_decay:
            w = w - eta_t * config.weight_decay * w - eta_t * state.v
        else:
            w = w - eta_t * state.v
        state.t = t + 1
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"non-finite iterate at step {t + 1}", last_checkpoint)
        bound = estimate_bound(state, beta_t)
        if not math.isfinite(bound) or bound > DIVERGENCE_LIMIT:
            raise DivergenceError(f"estimated penalty or gradient {bound:.3e} at step {t + 1}", last_checkpoint)

        if checkpoint_path is not None and config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, t + 1, w, state, streams, sampler, records, snapshots)
            last_checkpoint = str(checkpoint_path)

    if not records or records[-1].step != T:
        log_step(T)
    logger.info(f"Solver finished {T} iterations: F={records[-1].objective:.6f} "
                f"violation={records[-1].kkt.violation:.3e}")
    return RunResult(problem.to_params(w), records, [r.kkt for r in records], snapshots, last_checkpoint)


@dataclass(frozen=True)
class SurrogateConstants:
    """User-supplied stand-ins for the smoothness and variance constants of the convergence analysis."""
    L_g: float
    L_grad_g: float
    L_h: float
    L_grad_h: float
    sigma_g: float
    sigma_grad_g: float
    sigma_h: float
    sigma_grad_h: float
    c_g: float
    C_g: float

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or not value > 0:
                raise ConfigError(f"preset.{f.name}", f"must be > 0, got {value!r}")


@dataclass(frozen=True)
class TheoremPreset:
    beta: float
    theta: float
    gamma: float
    eta: float
    iterations: int
    L_f: float
    L_grad_f: float
    L_F: float
    L_H: float
    C_grad_g: float
    C_grad_h: float
    C_F: float


def theorem_preset(epsilon: float, delta: float, constants: SurrogateConstants, tau: float,
                   batch: int, text_negatives: int, image_negatives: int,
                   constraint_batch: int, task_batch: int, n_pairs: int, m: int) -> TheoremPreset:
    """
    Hyperparameters from the convergence theorem for target accuracy ε and
    feasibility level δ: β = 1/(εδ), then θ, γ1 = γ2 = γ and η as the
    minimum of the stated bounds, and an iteration count from the final
    averaged bound.
    """
    for name, value in (('epsilon', epsilon), ('delta', delta), ('tau', tau)):
        if not value > 0:
            raise ConfigError(f"preset.{name}", f"must be > 0, got {value}")
    for name, value in (('batch_size', batch), ('text_negatives', text_negatives),
                        ('image_negatives', image_negatives), ('constraint_batch', constraint_batch),
                        ('task_batch', task_batch), ('n_pairs', n_pairs), ('m', m)):
        if value < 1:
            raise ConfigError(f"preset.{name}", f"must be >= 1, got {value}")
    c = constants
    eps, dlt = float(epsilon), float(delta)

    beta = 1.0 / (eps * dlt)
    L_f = tau / c.c_g
    L_grad_f = tau / c.c_g ** 2
    L_F = 2.0 * (c.L_grad_g * L_f + L_grad_f * c.L_g ** 2)
    L_H = 2.0 * c.L_grad_h + c.L_h ** 2
    C_grad_g = c.sigma_grad_g + c.L_g
    C_grad_h = c.sigma_grad_h + c.L_h

    theta = min(
        eps ** 4 * dlt ** 2 * min(constraint_batch, task_batch) / (672.0 * (c.sigma_grad_h ** 2 + c.L_h ** 2)),
        eps ** 2 * min(batch, text_negatives, image_negatives) / (1344.0 * L_f ** 2 * (c.sigma_grad_g ** 2 + c.L_g ** 2)),
    )
    gamma = min(
        5.0 * n_pairs * theta / (3.0 * batch),
        5.0 * m * theta / (3.0 * constraint_batch),
        eps ** 4 * dlt ** 2 * task_batch / (26880.0 * c.sigma_h ** 2 * C_grad_h ** 2),
    )
    eta = min(
        1.0 / (12.0 * (L_F + beta * L_H)),
        theta / (8.0 * math.sqrt(3.0) * L_F),
        theta / (8.0 * math.sqrt(3.0) * L_H * beta),
        gamma * batch / (40.0 * math.sqrt(6.0) * c.L_g * L_f * C_grad_g * n_pairs),
        gamma * constraint_batch / (40.0 * math.sqrt(6.0) * beta * c.L_h * C_grad_h * m),
    )
    C_F = max(tau * abs(math.log(c.c_g ** 2)), tau * abs(math.log(c.C_g ** 2)))
    iterations = math.ceil(max(
        24.0 * C_F / (eta * eps ** 2),
        192.0 * (c.L_g ** 2 + c.sigma_grad_g ** 2) * L_f ** 2 / (theta * eps ** 2),
        1920.0 * L_f ** 2 * C_grad_g ** 2 * c.sigma_g ** 2 / (batch * gamma * eps ** 2),
    ))
    return TheoremPreset(beta, theta, gamma, eta, iterations, L_f, L_grad_f, L_F, L_H, C_grad_g, C_grad_h, C_F)


PRESET_FIELDS = ('epsilon', 'delta', 'n_pairs', 'm', 'constants', 'max_iterations')


def apply_preset(config: SolverConfig, preset: dict, prefix: str = 'solver') -> SolverConfig:
    """
    Replace β, θ, γ1, γ2, η and T with the theorem schedule.

    Batch sizes must be explicit. `max_iterations` (optional) caps T, since
    the theoretical count is usually astronomically large.
    """
    check_fields(preset, PRESET_FIELDS, f"{prefix}.preset")
    for name in ('batch_size', 'text_negatives', 'image_negatives', 'constraint_batch', 'task_batch'):
        if getattr(config, name) is None:
            raise ConfigError(f"{prefix}.{name}", "must be set explicitly when a preset is used")
    try:
        constants = SurrogateConstants(**preset['constants'])
        result = theorem_preset(
            preset['epsilon'], preset['delta'], constants, config.tau, config.batch_size,
            config.text_negatives, config.image_negatives, config.constraint_batch,
            config.task_batch, preset['n_pairs'], preset['m'])
    except KeyError as e:
        raise ConfigError(f"{prefix}.preset.{e.args[0]}", "required field missing")
    except TypeError as e:
        raise ConfigError(f"{prefix}.preset.constants", str(e))
    gamma = min(result.gamma, 1.0)
    if gamma < result.gamma:
        logger.warning(f"Theorem gamma {result.gamma:.3e} exceeds 1; using 1")
    iterations = result.iterations
    cap = preset.get('max_iterations')
    if cap is not None and iterations > cap:
        logger.warning(f"Theorem iteration count {iterations} capped at {cap}")
        iterations = cap
    data = config.to_dict()
    data.update(beta=result.beta, beta_schedule='constant', theta=min(result.theta, 1.0), gamma1=gamma,
                gamma2=gamma, eta=result.eta, eta_min=0.0, iterations=int(iterations), preset=None)
    return SolverConfig(**data)
