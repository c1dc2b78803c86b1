"""
Moving-average estimator state of the penalty solver.

u1/u2 track the inner functions g_{1i}, g_{2i} of every target pair, u_c
tracks each constraint h_k, and v is the momentum estimate of ∇Φ. Entries are
initialized lazily: the first time an index is sampled its average is set to
the fresh estimate instead of being mixed with a placeholder. The update
functions mutate the state they are given and return it.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EstimatorError, InvariantError, ParseError
from .files import floats_to_hex, hex_to_floats
from .losses import ConstraintTerms, PairTerms, constraint_terms, pair_terms, positive_part

logger = logging.getLogger(__name__)


def check_rate(name: str, value: float) -> float:
    if not 0.0 < value <= 1.0:
        raise ConfigError(name, f"must be in (0, 1], got {value}")
    return float(value)


@dataclass
class EstimatorState:
    u1: np.ndarray
    u2: np.ndarray
    u_c: np.ndarray
    v: np.ndarray | None = None
    t: int = 0
    seen1: np.ndarray = field(default=None)
    seen2: np.ndarray = field(default=None)
    seen_c: np.ndarray = field(default=None)

    def __post_init__(self):
        self.u1 = np.asarray(self.u1, dtype=np.float64).copy()
        self.u2 = np.asarray(self.u2, dtype=np.float64).copy()
        self.u_c = np.asarray(self.u_c, dtype=np.float64).copy()
        if self.u1.shape != self.u2.shape:
            raise EstimatorError("u1 and u2 must have the same length")
        for name in ('seen1', 'seen2'):
            if getattr(self, name) is None:
                setattr(self, name, np.ones(self.u1.size, dtype=bool))
        if self.seen_c is None:
            self.seen_c = np.ones(self.u_c.size, dtype=bool)

    @classmethod
    def create(cls, n_pairs: int, n_constraints: int) -> 'EstimatorState':
        """Fresh state with every average uninitialized."""
        return cls(
            u1=np.ones(n_pairs), u2=np.ones(n_pairs), u_c=np.zeros(n_constraints),
            seen1=np.zeros(n_pairs, dtype=bool), seen2=np.zeros(n_pairs, dtype=bool),
            seen_c=np.zeros(n_constraints, dtype=bool),
        )

    @property
    def n_pairs(self) -> int:
        return int(self.u1.size)

    @property
    def n_constraints(self) -> int:
        return int(self.u_c.size)

    def copy(self) -> 'EstimatorState':
        return EstimatorState(
            self.u1, self.u2, self.u_c, None if self.v is None else self.v.copy(), self.t,
            self.seen1.copy(), self.seen2.copy(), self.seen_c.copy())

    def to_dict(self) -> dict:
        return {
            't': self.t,
            'u1': floats_to_hex(self.u1),
            'u2': floats_to_hex(self.u2),
            'u_c': floats_to_hex(self.u_c),
            'seen1': self.seen1.astype(int).tolist(),
            'seen2': self.seen2.astype(int).tolist(),
            'seen_c': self.seen_c.astype(int).tolist(),
            'v': None if self.v is None else floats_to_hex(self.v),
        }

    @classmethod
    def from_dict(cls, data: dict, source: str = '<memory>') -> 'EstimatorState':
        try:
            return cls(
                u1=hex_to_floats(data['u1'], source, 'estimator.u1'),
                u2=hex_to_floats(data['u2'], source, 'estimator.u2'),
                u_c=hex_to_floats(data['u_c'], source, 'estimator.u_c'),
                v=None if data['v'] is None else hex_to_floats(data['v'], source, 'estimator.v'),
                t=int(data['t']),
                seen1=np.array(data['seen1'], dtype=bool),
                seen2=np.array(data['seen2'], dtype=bool),
                seen_c=np.array(data['seen_c'], dtype=bool),
            )
        except KeyError as e:
            raise ParseError(source, f"missing estimator field {e}", field=f"estimator.{e.args[0]}")


def _mix(values: np.ndarray, seen: np.ndarray, index: np.ndarray, fresh: np.ndarray, gamma: float) -> None:
    old = values[index]
    mixed = (1.0 - gamma) * old + gamma * fresh
    values[index] = np.where(seen[index], mixed, fresh)
    seen[index] = True


def update_pair_averages(state: EstimatorState, batch, gamma1: float, g1_values, g2_values) -> EstimatorState:
    """u_{·i} ← (1−γ1)·u_{·i} + γ1·ĝ_{·i} for i in the batch; other pairs untouched."""
    gamma1 = check_rate('gamma1', gamma1)
    batch = np.asarray(batch, dtype=np.int64)
    g1_values = np.asarray(g1_values, dtype=np.float64)
    g2_values = np.asarray(g2_values, dtype=np.float64)
    if g1_values.shape != batch.shape or g2_values.shape != batch.shape:
        raise EstimatorError("one ĝ value per sampled pair is required")
    _mix(state.u1, state.seen1, batch, g1_values, gamma1)
    _mix(state.u2, state.seen2, batch, g2_values, gamma1)
    return state


def update_constraint_averages(state: EstimatorState, tasks, gamma2: float, h_values) -> EstimatorState:
    """u_k ← (1−γ2)·u_k + γ2·ĥ_k for k in B_c."""
    gamma2 = check_rate('gamma2', gamma2)
    tasks = np.asarray(tasks, dtype=np.int64)
    h_values = np.asarray(h_values, dtype=np.float64)
    if h_values.shape != tasks.shape:
        raise EstimatorError("one ĥ value per sampled constraint is required")
    _mix(state.u_c, state.seen_c, tasks, h_values, gamma2)
    return state


def pair_gradient(state: EstimatorState, terms: PairTerms) -> np.ndarray:
    """G1 from already evaluated ĝ terms, using the current u1/u2."""
    batch = terms.positions
    u1 = state.u1[batch]
    u2 = state.u2[batch]
    if np.any(u1 <= 0) or np.any(u2 <= 0) or not np.all(state.seen1[batch] & state.seen2[batch]):
        raise InvariantError("u1/u2 must be initialized and positive on the sampled pairs")
    return (terms.tau / batch.size) * terms.vjp(1.0 / u1, 1.0 / u2)


def constraint_gradient(state: EstimatorState, terms: ConstraintTerms, beta: float, size: int, dim: int) -> np.ndarray:
    """
    G2 from already evaluated ĥ terms: (1/|B_c|) Σ β[u_k]_+ ∇ĥ_k.

    Returns zeros of length `dim` without a backward pass when no weight is positive.
    """
    if size == 0:
        raise EstimatorError("empty constraint batch")
    weights = beta * positive_part(state.u_c[terms.tasks]) / size
    if not np.any(weights):
        return np.zeros(dim)
    return terms.vjp(weights)


def G1(state: EstimatorState, p, pairs, batch, text_subsets=None, image_subsets=None, tau: float = 0.05) -> np.ndarray:
    """(τ/|B|) Σ_{i∈B} (∇ĝ_{1i}/u_{1i} + ∇ĝ_{2i}/u_{2i})."""
    return pair_gradient(state, pair_terms(p, pairs, batch, text_subsets, image_subsets, tau))


def G2(state: EstimatorState, p, specs, tasks, batches=None, beta: float = 1.0) -> np.ndarray:
    """(1/|B_c|) Σ_{k∈B_c} β[u_k]_+ ∇ĥ_k; exactly zero when every u_k ≤ 0."""
    tasks = np.asarray(tasks, dtype=np.int64)
    if tasks.size == 0:
        raise EstimatorError("empty constraint batch")
    if not np.any(beta * positive_part(state.u_c[tasks])):
        return np.zeros(p.layout.size)
    return constraint_gradient(state, constraint_terms(p, specs, tasks, batches), beta, tasks.size, p.layout.size)


def update_momentum(state: EstimatorState, g1: np.ndarray, g2: np.ndarray | None, theta: float) -> EstimatorState:
    """v ← (1−θ)·v + θ·(G1 + G2); the first call sets v = G1 + G2."""
    theta = check_rate('theta', theta)
    step = np.asarray(g1, dtype=np.float64) if g2 is None else np.asarray(g1) + np.asarray(g2)
    if state.v is None:
        state.v = step.copy()
    else:
        state.v = (1.0 - theta) * state.v + theta * step
    return state
