"""
Developmental-safety metrics and constraint-Jacobian diagnostics.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, PreconditionError, ShapeError
from .losses import ConstraintSpec, ce_terms, grad_h
from .model import ParamVector, batch_logits, head_block_names

logger = logging.getLogger(__name__)

LOSSES = ('zero-one', 'ce')

# Slack allowed when comparing the two sides of the eigenvalue-gain bound.
LEMMA2_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class EvalSets:
    """Held-out samples S_k per protected task, the target-task samples and the class texts."""
    tasks: tuple[int, ...]
    protected: tuple[np.ndarray, ...]
    target_task: int
    target: np.ndarray
    class_texts: np.ndarray
    tau0: float = 0.05
    disjoint_from_training: bool = True

    def __post_init__(self):
        if len(self.tasks) != len(self.protected):
            raise ShapeError("one held-out set per protected task is required")


@dataclass(frozen=True)
class TaskLosses:
    zero_one: np.ndarray
    ce: np.ndarray
    target_acc: float


def _accuracy(p: ParamVector, X: np.ndarray, label: int, class_texts: np.ndarray) -> float:
    scores = batch_logits(p, X, class_texts)
    # argmax takes the lowest index on ties
    return float(np.mean(np.argmax(scores, axis=1) == label))


def task_losses(p: ParamVector, sets: EvalSets) -> TaskLosses:
    """Per-task zero-one and ce losses on S_k plus target accuracy."""
    zero_one, ce = [], []
    for task, X in zip(sets.tasks, sets.protected):
        if len(X) == 0:
            raise MetricError(f"held-out set for task {task} is empty")
        zero_one.append(1.0 - _accuracy(p, X, task, sets.class_texts))
        labels = np.full(len(X), task)
        ce.append(float(np.mean(ce_terms(p, X, labels, sets.class_texts, sets.tau0).values)))
    target_acc = _accuracy(p, sets.target, sets.target_task, sets.class_texts) if len(sets.target) else math.nan
    return TaskLosses(np.array(zero_one), np.array(ce), target_acc)


def _safety(old: np.ndarray, new: np.ndarray) -> float:
    if old.size == 0:
        raise MetricError("no protected tasks to measure")
    return float(np.min(old - new))


def dev_safety(w_new: ParamVector, w_old: ParamVector, eval_sets: EvalSets, loss: str = 'zero-one') -> float:
    """min_k (L_k(w_old, S_k) − L_k(w_new, S_k)); the zero-one form is DevSafety(acc)."""
    if loss not in LOSSES:
        raise MetricError(f"loss must be one of {LOSSES}, got {loss!r}")
    old = task_losses(w_old, eval_sets)
    new = task_losses(w_new, eval_sets)
    key = 'zero_one' if loss == 'zero-one' else 'ce'
    return _safety(getattr(old, key), getattr(new, key))


def retention_ratio(runs: Sequence[float]) -> float:
    """Fraction of runs whose DevSafety(acc) is non-negative."""
    if len(runs) == 0:
        raise MetricError("retention ratio of an empty run list")
    return sum(1 for value in runs if value >= 0) / len(runs)


def delta_target_acc(w_new: ParamVector, w_old: ParamVector, eval_sets: EvalSets) -> float:
    if len(eval_sets.target) == 0:
        raise MetricError("target evaluation set is empty")
    return (_accuracy(w_new, eval_sets.target, eval_sets.target_task, eval_sets.class_texts)
            - _accuracy(w_old, eval_sets.target, eval_sets.target_task, eval_sets.class_texts))


def make_evaluator(w_old: ParamVector, train: EvalSets, val: EvalSets) -> Callable[[ParamVector], dict[str, float]]:
    """Trajectory metrics for a candidate model, with w_old's losses computed once."""
    old_train = task_losses(w_old, train)
    old_val = task_losses(w_old, val)

    def evaluate(p: ParamVector) -> dict[str, float]:
        new_train = task_losses(p, train)
        new_val = task_losses(p, val)
        return {
            'train_devsafety_ce': _safety(old_train.ce, new_train.ce),
            'train_devsafety_acc': _safety(old_train.zero_one, new_train.zero_one),
            'val_devsafety_ce': _safety(old_val.ce, new_val.ce),
            'val_devsafety_acc': _safety(old_val.zero_one, new_val.zero_one),
            'train_delta_acc': new_train.target_acc - old_train.target_acc,
            'val_delta_acc': new_val.target_acc - old_val.target_acc,
        }

    return evaluate


@dataclass(frozen=True)
class Lemma1Inputs:
    n: tuple[int, ...]
    m: int
    delta: float
    C: float
    alpha: float

    def __post_init__(self):
        if self.m < 1 or len(self.n) != self.m:
            raise MetricError(f"need one sample count per task (m = {self.m}, got {len(self.n)})")
        if any(n < 1 for n in self.n):
            raise MetricError("sample counts must be >= 1")
        if not 0 < self.delta < 1:
            raise MetricError(f"confidence delta must be in (0, 1), got {self.delta}")
        if self.C < 0:
            raise MetricError(f"Rademacher constant C must be >= 0, got {self.C}")
        if not 0 < self.alpha <= 0.5:
            raise MetricError(f"Rademacher rate alpha must be in (0, 0.5], got {self.alpha}")


def lemma1_bound(inputs: Lemma1Inputs) -> np.ndarray:
    """Per-task generalization slack 4C/n_k^α + 2√(ln(2m/δ)/(2n_k))."""
    n = np.asarray(inputs.n, dtype=np.float64)
    log_term = math.log(2.0 * inputs.m / inputs.delta)
    return 4.0 * inputs.C / n ** inputs.alpha + 2.0 * np.sqrt(log_term / (2.0 * n))


def sigma_min_from_jacobian(J: np.ndarray) -> float:
    """σ_min of a d×m Jacobian via the eigenvalues of its m×m Gram matrix."""
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 2 or J.shape[1] == 0:
        raise MetricError("constraint Jacobian has no columns (m = 0)")
    smallest = float(np.linalg.eigvalsh(J.T @ J)[0])
    return math.sqrt(max(smallest, 0.0))


def constraint_jacobian(p: ParamVector, specs: list[ConstraintSpec]) -> np.ndarray:
    if not specs:
        raise MetricError("no constraints (m = 0)")
    return np.column_stack([grad_h(p, spec) for spec in specs])


def constraint_jacobian_sigma_min(p: ParamVector, specs: list[ConstraintSpec], heads: str = 'off') -> float:
    """
    Smallest singular value of [∇h_1, ..., ∇h_m].

    With heads='on' the gradient includes the U_k/V_k blocks (the model must
    carry task heads); with heads='off' only the (u, W) coordinates are used.
    """
    if heads not in ('on', 'off'):
        raise MetricError(f"heads must be 'on' or 'off', got {heads!r}")
    if heads == 'on' and not p.shape.heads_enabled:
        raise PreconditionError("model has no task heads; attach them before measuring with heads on")
    J = constraint_jacobian(p, specs)
    if heads == 'off':
        J = J[~p.layout.head_mask()]
    return sigma_min_from_jacobian(J)


@dataclass(frozen=True)
class Lemma2Result:
    lhs: float
    rhs: float
    holds: bool
    base_lambda_min: float
    gains: tuple[float, ...]


def lemma2_bound(base_jacobian: np.ndarray, head_grads: Sequence[np.ndarray], V: Sequence[np.ndarray]) -> Lemma2Result:
    """
    Eigenvalue gain from task heads at U_k = 0.

    `base_jacobian` is the d×m Jacobian of h over the shared coordinates,
    `head_grads[k]` the block ∇_W h_k and `V[k]` the head factor V_k. Giving
    constraint k its own head W + U_k V_kᵀ appends the coordinates of U_k,
    where only column k is nonzero (∇_{U_k} ĥ_k = ∇_W h_k V_k; ∇_{V_k} ĥ_k
    vanishes at U_k = 0). The augmented Jacobian is assembled explicitly and
    its smallest Gram eigenvalue compared with
    λ_min(∇hᵀ∇h) + min_k ‖∇_W h_k V_k‖_F².
    """
    J = np.asarray(base_jacobian, dtype=np.float64)
    m = J.shape[1]
    if len(head_grads) != m or len(V) != m:
        raise ShapeError("one head gradient and one V_k per constraint are required")
    blocks = [np.asarray(A, dtype=np.float64) @ np.asarray(Vk, dtype=np.float64) for A, Vk in zip(head_grads, V)]
    sizes = [block.size for block in blocks]
    extra = np.zeros((sum(sizes), m))
    start = 0
    for k, block in enumerate(blocks):
        extra[start:start + block.size, k] = block.reshape(-1)
        start += block.size
    augmented = np.vstack([J, extra])

    base = float(np.linalg.eigvalsh(J.T @ J)[0])
    lhs = float(np.linalg.eigvalsh(augmented.T @ augmented)[0])
    gains = tuple(float(np.sum(block * block)) for block in blocks)
    rhs = base + min(gains)
    return Lemma2Result(lhs, rhs, lhs >= rhs - LEMMA2_TOL, base, gains)


def lemma2_check(p: ParamVector, specs: list[ConstraintSpec]) -> Lemma2Result:
    """Evaluate the eigenvalue-gain bound at a model whose task heads are all zero."""
    if not p.shape.heads_enabled:
        raise PreconditionError("lemma2_check needs a model with task heads")
    if not p.heads_are_zero():
        raise PreconditionError("task heads must satisfy U_k V_kᵀ = 0 for every k")
    shared = p.without_heads()
    J = constraint_jacobian(shared, specs)
    head_grads = [shared.layout.view(J[:, k], 'head_W') for k in range(len(specs))]
    V = [p.block(head_block_names(spec.task)[1]) for spec in specs]
    result = lemma2_bound(J, head_grads, V)
    logger.debug(f"eigenvalue gain check: lhs={result.lhs:.6e} rhs={result.rhs:.6e}")
    return result


def effective_weights(state, beta: float) -> np.ndarray:
    """β[u_k]_+ per protected task; `state` is an estimator state or the u_k vector itself."""
    u_c = getattr(state, 'u_c', state)
    return beta * np.maximum(np.asarray(u_c, dtype=np.float64), 0.0)
