"""
Weighting baselines: Regularization Method (RM), Weighted Combination of
Contrastive Losses (WCCL) and plain finetuning.

RM adds α times the mean protected-task cross-entropy to the target
objective. WCCL mixes a contrastive loss per protected task with the target
contrastive loss. Both run on the solver loop of `optimizer.run` with the
penalty gradient switched off; trajectories keep reporting the target F and
the retention constraints h_k so they compare directly with the penalty
method.
"""

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, EstimatorError
from .estimators import update_pair_averages
from .files import check_fields
from .losses import (ConstraintSpec, PairSet, ce_terms, constraint_terms, objective_F, pair_terms,
                     value_and_grad_F)
from .model import ParamVector
from .optimizer import RetentionProblem, RunResult, SolverConfig, _negative_subsets, run
from .rng import sample_without_replacement

logger = logging.getLogger(__name__)

BASELINE_KINDS = ('rm', 'wccl', 'finetune')


@dataclass
class BaselineConfig:
    kind: str = 'rm'
    alpha: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = 'baseline') -> None:
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"{prefix}.kind", f"must be one of {BASELINE_KINDS}, got {self.kind!r}")
        if isinstance(self.alpha, bool) or not isinstance(self.alpha, (int, float)) or not math.isfinite(self.alpha):
            raise ConfigError(f"{prefix}.alpha", f"must be a finite number, got {self.alpha!r}")
        if self.kind == 'rm' and self.alpha < 0:
            raise ConfigError(f"{prefix}.alpha", f"RM weight must be >= 0, got {self.alpha}")
        if self.kind == 'wccl' and not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"{prefix}.alpha", f"WCCL weight must be in [0, 1], got {self.alpha}")

    @classmethod
    def from_dict(cls, data: dict, prefix: str = 'baseline') -> 'BaselineConfig':
        check_fields(data, [f.name for f in fields(cls)], prefix)
        config = cls.__new__(cls)
        config.kind = data.get('kind', 'rm')
        config.alpha = data.get('alpha', 1.0)
        config.validate(prefix)
        return config


def mean_ce(p: ParamVector, spec: ConstraintSpec) -> float:
    return float(np.mean(ce_terms(p, spec.X, spec.labels, spec.class_texts, spec.tau0).values))


def rm_objective(p: ParamVector, pairs: PairSet, specs: list[ConstraintSpec], alpha: float, tau: float = 0.05) -> float:
    """F + α·(1/m)·Σ_k mean ℓ_ce(w, D_k); the reference losses of w_old do not enter."""
    if alpha < 0:
        raise ConfigError('baseline.alpha', f"RM weight must be >= 0, got {alpha}")
    value = objective_F(p, pairs, tau)
    if not specs or alpha == 0:
        return value
    return value + alpha * sum(mean_ce(p, spec) for spec in specs) / len(specs)


def rm_grad(p: ParamVector, pairs: PairSet, specs: list[ConstraintSpec], alpha: float, tau: float = 0.05) -> np.ndarray:
    _, gradient = value_and_grad_F(p, pairs, tau)
    if not specs or alpha == 0:
        return gradient
    return gradient + constraint_terms(p, specs).vjp(np.full(len(specs), alpha / len(specs)))


def wccl_objective(p: ParamVector, task_pair_sets: list[PairSet], target_pairs: PairSet, alpha: float,
                   tau: float = 0.05) -> float:
    """α·mean_k F(D_k) + (1−α)·F(D); a term with zero weight is not evaluated."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError('baseline.alpha', f"WCCL weight must be in [0, 1], got {alpha}")
    value = 0.0
    if alpha > 0:
        if not task_pair_sets:
            raise EstimatorError("WCCL needs at least one protected-task pair set")
        value += alpha * sum(objective_F(p, pairs, tau) for pairs in task_pair_sets) / len(task_pair_sets)
    if alpha < 1:
        value += (1.0 - alpha) * objective_F(p, target_pairs, tau)
    return value


def wccl_grad(p: ParamVector, task_pair_sets: list[PairSet], target_pairs: PairSet, alpha: float,
              tau: float = 0.05) -> np.ndarray:
    gradient = np.zeros(p.layout.size)
    if alpha > 0:
        for pairs in task_pair_sets:
            gradient += (alpha / len(task_pair_sets)) * value_and_grad_F(p, pairs, tau)[1]
    if alpha < 1:
        gradient += (1.0 - alpha) * value_and_grad_F(p, target_pairs, tau)[1]
    return gradient


@dataclass
class WeightedProblem:
    """
    Weighted sum of contrastive objectives, optionally plus the RM cross-entropy term.

    `components` are (pair set, total weight) entries; the solver samples B
    over the concatenation of their pairs and every component keeps its own
    slice of the u1/u2 averages. `report` supplies the target F and the
    retention constraints for logging.
    """
    report: RetentionProblem
    components: list[tuple[PairSet, float]]
    rm_alpha: float = 0.0
    task_weights: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.components:
            raise EstimatorError("a weighted problem needs at least one pair set")
        sizes = [pairs.n_pairs for pairs, _ in self.components]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        if self.task_weights is None:
            self.task_weights = np.full(len(self.report.specs), float(self.rm_alpha))

    @property
    def layout(self):
        return self.report.layout

    @property
    def dim(self) -> int:
        return self.report.dim

    @property
    def n_items(self) -> int:
        return int(self._offsets[-1])

    @property
    def constraint_sizes(self) -> list[int]:
        return []

    def to_params(self, w):
        return self.report.to_params(w)

    def to_flat(self, params):
        return self.report.to_flat(params)

    def check_config(self, config: SolverConfig) -> None:
        if config.batch_size is not None and config.batch_size > self.n_items:
            raise ConfigError('solver.batch_size', f"must be <= {self.n_items} (pool size), got {config.batch_size}")
        for pairs, _ in self.components:
            pool = pairs.min_pool_size()
            for name in ('text_negatives', 'image_negatives'):
                size = getattr(config, name)
                if size is not None and size > pool:
                    raise ConfigError(f"solver.{name}", f"must be <= {pool} (pool size), got {size}")
        if self.rm_alpha:
            if config.constraint_batch is not None and config.constraint_batch > len(self.report.specs):
                raise ConfigError('solver.constraint_batch', "exceeds the number of protected tasks")

    def effective_weights(self, state, beta: float) -> np.ndarray:
        return self.task_weights.copy()

    def pair_gradient(self, w, state, batch, rng, config):
        p = self.to_params(w)
        gradient = np.zeros(self.dim)
        n_total = self.n_items
        for c, (pairs, weight) in enumerate(self.components):
            start, stop = self._offsets[c], self._offsets[c + 1]
            local = batch[(batch >= start) & (batch < stop)] - start
            if local.size == 0 or weight == 0:
                continue
            text_subsets = _negative_subsets(pairs, local, config.text_negatives, rng)
            image_subsets = _negative_subsets(pairs, local, config.image_negatives, rng)
            terms = pair_terms(p, pairs, local, text_subsets, image_subsets, config.tau)
            index = local + start
            update_pair_averages(state, index, config.gamma1, terms.g1, terms.g2)
            coef = config.tau * n_total * weight / pairs.n_pairs / batch.size
            gradient += terms.vjp(coef / state.u1[index], coef / state.u2[index])
        if self.rm_alpha:
            specs = self.report.specs
            tasks = np.arange(len(specs))
            if config.constraint_batch is not None:
                tasks = sample_without_replacement(rng, tasks, config.constraint_batch)
            batches = [None if config.task_batch is None or config.task_batch >= specs[k].n_k
                       else sample_without_replacement(rng, np.arange(specs[k].n_k), config.task_batch)
                       for k in tasks]
            terms = constraint_terms(p, specs, tasks, batches)
            gradient += terms.vjp(np.full(tasks.size, self.rm_alpha / tasks.size))
        return gradient

    def constraint_terms(self, w, tasks, batches, rng, config):
        raise EstimatorError("weighted baselines carry no penalty constraints")

    def full_objective(self, w, config):
        return self.report.full_objective(w, config)

    def full_constraints(self, w, config):
        return self.report.full_constraints(w, config)


def build_problem(config: BaselineConfig, retention: RetentionProblem,
                  wccl_task_pairs: list[PairSet] | None = None) -> WeightedProblem:
    if config.kind == 'finetune':
        return WeightedProblem(retention, [(retention.pairs, 1.0)], 0.0)
    if config.kind == 'rm':
        return WeightedProblem(retention, [(retention.pairs, 1.0)], float(config.alpha))
    if not wccl_task_pairs:
        raise ConfigError('baseline.kind', "WCCL needs protected-task pair sets")
    alpha = float(config.alpha)
    m = len(wccl_task_pairs)
    components = [(pairs, alpha / m) for pairs in wccl_task_pairs]
    components.append((retention.pairs, 1.0 - alpha))
    components = [(pairs, weight) for pairs, weight in components if weight > 0]
    task_weights = np.full(len(retention.specs), alpha / m)
    return WeightedProblem(retention, components, 0.0, task_weights)


def run_baseline(
    config: BaselineConfig,
    solver: SolverConfig,
    retention: RetentionProblem,
    w_old: ParamVector,
    wccl_task_pairs: list[PairSet] | None = None,
    evaluate=None,
    checkpoint_path=None,
    resume: bool = False,
) -> RunResult:
    """Run a baseline from w_old on the solver loop without the penalty gradient."""
    problem = build_problem(config, retention, wccl_task_pairs)
    logger.info(f"Running baseline {config.kind} (alpha={config.alpha}) for {solver.iterations} iterations")
    return run(problem, solver, w_old, evaluate=evaluate, checkpoint_path=checkpoint_path, resume=resume)
