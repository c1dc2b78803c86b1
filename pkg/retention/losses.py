"""
Losses and retention constraints with analytic gradients.

Contrastive terms follow the compositional form
    g_{1i}(w) = mean_{t_j ∈ T_i^-} exp((⟨E1(x_i), E2(t_j)⟩ − ⟨E1(x_i), E2(t_i)⟩)/τ)
    g_{2i}(w) = mean_{x_j ∈ I_i^-} exp((⟨E2(t_i), E1(x_j)⟩ − ⟨E2(t_i), E1(x_i)⟩)/τ)
with the pair loss τ·log g_{1i} + τ·log g_{2i}. Pair texts always go through
the shared head W; only class texts t̂_k use task heads.

`pair_terms` and `constraint_terms` evaluate a batch once and return an
object whose `vjp` assembles any weighted sum of per-item gradients with a
single backward pass; the exact full-data gradients and the stochastic
estimators are both built from them.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import EstimatorError, ShapeError
from .model import ParamVector, embed_class_texts, embed_images, embed_texts, logits, predict

logger = logging.getLogger(__name__)

# Floor applied to g before taking logs.
G_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class PairSet:
    """
    Image-text registry plus the anchor pairs of a contrastive objective.

    Row `anchors[i]` of (images, texts) is the positive pair (x_i, t_i). The
    negative pools of pair i are the registry rows in `pool` (all rows when
    None); with `groups` set, rows sharing the anchor's group are removed from
    its pools except the anchor itself.
    """
    images: np.ndarray
    texts: np.ndarray
    anchors: np.ndarray
    groups: np.ndarray | None = None
    pool: np.ndarray | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        texts = np.asarray(self.texts, dtype=np.float64)
        anchors = np.asarray(self.anchors, dtype=np.int64)
        if images.ndim != 2 or texts.ndim != 2 or images.shape[0] != texts.shape[0]:
            raise ShapeError(f"registry images {images.shape} and texts {texts.shape} do not align")
        if anchors.ndim != 1 or anchors.size == 0:
            raise ShapeError("a pair set needs at least one anchor pair")
        if np.any(anchors < 0) or np.any(anchors >= images.shape[0]):
            raise ShapeError("anchor index outside the registry")
        in_pool = np.ones(images.shape[0], dtype=bool)
        if self.pool is not None:
            in_pool[:] = False
            in_pool[np.asarray(self.pool, dtype=np.int64)] = True
            if not np.all(in_pool[anchors]):
                raise ShapeError("every anchor must belong to its own negative pools")
        object.__setattr__(self, 'images', images)
        object.__setattr__(self, 'texts', texts)
        object.__setattr__(self, 'anchors', anchors)
        object.__setattr__(self, '_in_pool', in_pool)
        if self.groups is not None:
            groups = np.asarray(self.groups, dtype=np.int64)
            if groups.shape != (images.shape[0],):
                raise ShapeError("groups must give one id per registry row")
            object.__setattr__(self, 'groups', groups)

    @property
    def n_pairs(self) -> int:
        return int(self.anchors.size)

    @property
    def registry_size(self) -> int:
        return int(self.images.shape[0])

    def pool_mask(self, positions: np.ndarray) -> np.ndarray:
        """Boolean (len(positions), N) membership of each pair's pools."""
        rows = self.anchors[positions]
        mask = np.broadcast_to(self._in_pool, (rows.size, self.registry_size)).copy()
        if self.groups is not None:
            mask &= self.groups[None, :] != self.groups[rows][:, None]
            mask[np.arange(rows.size), rows] = True
        return mask

    def pool_indices(self, position: int) -> np.ndarray:
        return np.flatnonzero(self.pool_mask(np.array([position]))[0])

    def pool_size(self, position: int) -> int:
        return int(self.pool_mask(np.array([position]))[0].sum())

    def min_pool_size(self) -> int:
        return int(self.pool_mask(np.arange(self.n_pairs)).sum(axis=1).min())


@dataclass(frozen=True)
class PairContext:
    """Pair i of a `PairSet` with its pools T_i^- and I_i^-."""
    pairs: PairSet
    index: int

    @property
    def text_pool(self) -> np.ndarray:
        return self.pairs.pool_indices(self.index)

    @property
    def image_pool(self) -> np.ndarray:
        return self.pairs.pool_indices(self.index)


def _selection_weights(pairs: PairSet, positions: np.ndarray, subsets) -> np.ndarray:
    """Row-stochastic weights over registry rows: uniform over each pair's subset."""
    mask = pairs.pool_mask(positions)
    if subsets is None:
        return mask / mask.sum(axis=1, keepdims=True)
    weights = np.zeros(mask.shape)
    if len(subsets) != positions.size:
        raise EstimatorError(f"got {len(subsets)} negative subsets for {positions.size} pairs")
    for row, subset in enumerate(subsets):
        subset = np.asarray(subset, dtype=np.int64)
        if subset.size == 0:
            raise EstimatorError(f"empty negative subset for pair {int(positions[row])}")
        if not np.all(mask[row, subset]):
            raise EstimatorError(f"negative subset of pair {int(positions[row])} leaves its pool")
        weights[row, subset] = 1.0 / subset.size
    return weights


@dataclass
class PairTerms:
    """ĝ_{1i}, ĝ_{2i} for a batch of pairs and their weighted gradient assembly."""
    positions: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    tau: float
    _cache: tuple = field(repr=False)

    def vjp(self, c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
        """Flat gradient of Σ_i c1_i ĝ_{1i} + c2_i ĝ_{2i}."""
        img, txt, rows, X1, X2 = self._cache
        E, Fm = img.values, txt.values
        Ea, Fa = E[rows], Fm[rows]
        gE = np.zeros_like(E)
        gF = np.zeros_like(Fm)

        K1 = np.asarray(c1, dtype=np.float64)[:, None] * X1 / self.tau
        r1 = K1.sum(axis=1)
        np.add.at(gE, rows, K1 @ Fm - r1[:, None] * Fa)
        gF += K1.T @ Ea
        np.add.at(gF, rows, -r1[:, None] * Ea)

        K2 = np.asarray(c2, dtype=np.float64)[:, None] * X2 / self.tau
        r2 = K2.sum(axis=1)
        np.add.at(gF, rows, K2 @ E - r2[:, None] * Ea)
        gE += K2.T @ Fa
        np.add.at(gE, rows, -r2[:, None] * Fa)

        return img.vjp(gE) + txt.vjp(gF)

    def losses(self) -> np.ndarray:
        """Per-pair τ·log ĝ1 + τ·log ĝ2."""
        return self.tau * (np.log(np.maximum(self.g1, G_FLOOR)) + np.log(np.maximum(self.g2, G_FLOOR)))


def pair_terms(
    p: ParamVector,
    pairs: PairSet,
    positions: np.ndarray | None = None,
    text_subsets=None,
    image_subsets=None,
    tau: float = 0.05,
) -> PairTerms:
    """
    Evaluate ĝ1/ĝ2 for the pairs at `positions` (all pairs when None).

    Subsets are per-pair arrays of registry rows inside the pair's pool; None
    means the full pool (the exact g).
    """
    if tau <= 0:
        raise ShapeError(f"temperature tau must be > 0, got {tau}")
    positions = np.arange(pairs.n_pairs) if positions is None else np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        raise EstimatorError("empty pair batch")
    w1 = _selection_weights(pairs, positions, text_subsets)
    w2 = _selection_weights(pairs, positions, image_subsets)

    img = embed_images(p, pairs.images)
    txt = embed_texts(p, pairs.texts)
    E, Fm = img.values, txt.values
    rows = pairs.anchors[positions]
    positive = np.sum(E[rows] * Fm[rows], axis=1)

    X1 = np.exp((E[rows] @ Fm.T - positive[:, None]) / tau) * w1
    X2 = np.exp((Fm[rows] @ E.T - positive[:, None]) / tau) * w2
    return PairTerms(positions, X1.sum(axis=1), X2.sum(axis=1), tau, (img, txt, rows, X1, X2))


def g1(p: ParamVector, ctx: PairContext, subset: np.ndarray | None = None, tau: float = 0.05) -> float:
    subsets = None if subset is None else [subset]
    return float(pair_terms(p, ctx.pairs, [ctx.index], text_subsets=subsets, tau=tau).g1[0])


def g2(p: ParamVector, ctx: PairContext, subset: np.ndarray | None = None, tau: float = 0.05) -> float:
    subsets = None if subset is None else [subset]
    return float(pair_terms(p, ctx.pairs, [ctx.index], image_subsets=subsets, tau=tau).g2[0])


def contrastive_pair_loss(p: ParamVector, ctx: PairContext, tau: float = 0.05) -> float:
    """τ·log g_{1i} + τ·log g_{2i} over the full pools."""
    return float(pair_terms(p, ctx.pairs, [ctx.index], tau=tau).losses()[0])


def objective_F(p: ParamVector, pairs: PairSet, tau: float = 0.05) -> float:
    """Mean contrastive pair loss over every anchor pair."""
    return float(np.mean(pair_terms(p, pairs, tau=tau).losses()))


def grad_F(p: ParamVector, pairs: PairSet, tau: float = 0.05) -> np.ndarray:
    terms = pair_terms(p, pairs, tau=tau)
    n = pairs.n_pairs
    return (tau / n) * terms.vjp(1.0 / terms.g1, 1.0 / terms.g2)


def value_and_grad_F(p: ParamVector, pairs: PairSet, tau: float = 0.05) -> tuple[float, np.ndarray]:
    terms = pair_terms(p, pairs, tau=tau)
    n = pairs.n_pairs
    value = float(np.mean(terms.losses()))
    return value, (tau / n) * terms.vjp(1.0 / terms.g1, 1.0 / terms.g2)


@dataclass
class ClassifyTerms:
    """Per-sample cross-entropy values and their weighted gradient assembly."""
    values: np.ndarray
    scores: np.ndarray
    _cache: tuple = field(repr=False)

    def vjp(self, coefs: np.ndarray) -> np.ndarray:
        img, cls, probs, onehot, tau0 = self._cache
        dS = np.asarray(coefs, dtype=np.float64)[:, None] * (probs - onehot) / tau0
        return img.vjp(dS @ cls.values) + cls.vjp(dS.T @ img.values)


def ce_terms(p: ParamVector, X: np.ndarray, y: np.ndarray, class_texts: np.ndarray, tau0: float) -> ClassifyTerms:
    if tau0 <= 0:
        raise ShapeError(f"temperature tau0 must be > 0, got {tau0}")
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    img = embed_images(p, X)
    cls = embed_class_texts(p, class_texts)
    if y.size != img.values.shape[0]:
        raise ShapeError(f"got {y.size} labels for {img.values.shape[0]} samples")
    if np.any(y < 0) or np.any(y >= cls.values.shape[0]):
        raise ShapeError(f"label out of range [0, {cls.values.shape[0]})")
    scores = img.values @ cls.values.T
    z = scores / tau0
    values = np.maximum(logsumexp(z, axis=1) - z[np.arange(y.size), y], 0.0)
    onehot = np.zeros_like(z)
    onehot[np.arange(y.size), y] = 1.0
    return ClassifyTerms(values, scores, (img, cls, softmax(z, axis=1), onehot, tau0))


def ce_loss(p: ParamVector, x: np.ndarray, y: int, class_texts: np.ndarray, tau0: float) -> float:
    """Softmax cross-entropy of one sample over logits/τ0."""
    return float(ce_terms(p, np.asarray(x)[None, :], [y], class_texts, tau0).values[0])


def zero_one_loss(p: ParamVector, x: np.ndarray, y: int, class_texts: np.ndarray) -> int:
    return int(predict(logits(p, x, class_texts)) != y)


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """
    Retention constraint h_k(w) = L_k(w, D_k) − L_k(w_old, D_k).

    `reference_losses` are the per-sample ℓ_ce(w_old, x, k), computed once when
    the ConstraintSpec is built and never recomputed.
    """
    task: int
    X: np.ndarray
    class_texts: np.ndarray
    reference_losses: np.ndarray
    tau0: float

    @classmethod
    def build(cls, w_old: ParamVector, task: int, X: np.ndarray, class_texts: np.ndarray, tau0: float) -> 'ConstraintSpec':
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise EstimatorError(f"constraint data for task {task} is empty")
        labels = np.full(X.shape[0], task, dtype=np.int64)
        reference = ce_terms(w_old, X, labels, class_texts, tau0).values.copy()
        reference.setflags(write=False)
        return cls(task, X, np.asarray(class_texts, dtype=np.float64), reference, tau0)

    @property
    def n_k(self) -> int:
        return int(self.X.shape[0])

    @property
    def labels(self) -> np.ndarray:
        return np.full(self.n_k, self.task, dtype=np.int64)


def _check_subset(spec: ConstraintSpec, subset) -> np.ndarray | None:
    if subset is None:
        return None
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise EstimatorError(f"empty minibatch for constraint task {spec.task}")
    if np.any(subset < 0) or np.any(subset >= spec.n_k):
        raise EstimatorError(f"minibatch index outside D_{spec.task}")
    return subset


def constraint_h(p: ParamVector, spec: ConstraintSpec, subset=None) -> float:
    """Mean live ce minus cached reference ce over `subset` (all of D_k when None)."""
    subset = _check_subset(spec, subset)
    X = spec.X if subset is None else spec.X[subset]
    reference = spec.reference_losses if subset is None else spec.reference_losses[subset]
    live = ce_terms(p, X, np.full(X.shape[0], spec.task), spec.class_texts, spec.tau0).values
    return float(np.mean(live - reference))


def grad_h(p: ParamVector, spec: ConstraintSpec, subset=None) -> np.ndarray:
    subset = _check_subset(spec, subset)
    X = spec.X if subset is None else spec.X[subset]
    terms = ce_terms(p, X, np.full(X.shape[0], spec.task), spec.class_texts, spec.tau0)
    return terms.vjp(np.full(X.shape[0], 1.0 / X.shape[0]))


@dataclass
class ConstraintTerms:
    """ĥ_k for a set of constraints evaluated in one batch."""
    tasks: np.ndarray
    values: np.ndarray
    _cache: tuple = field(repr=False)

    def vjp(self, coefs: np.ndarray) -> np.ndarray:
        """Flat gradient of Σ_j coefs_j ĥ_{tasks_j}."""
        terms, owners, counts = self._cache
        per_sample = np.asarray(coefs, dtype=np.float64)[owners] / counts[owners]
        return terms.vjp(per_sample)


def constraint_terms(
    p: ParamVector,
    specs: list[ConstraintSpec],
    tasks: np.ndarray | None = None,
    batches: list | None = None,
) -> ConstraintTerms:
    """
    Evaluate ĥ for `tasks` (indices into `specs`) with per-task minibatches.

    All selected samples share one forward pass; `batches[j]` is the minibatch
    of tasks[j] (None for all of D_k).
    """
    tasks = np.arange(len(specs)) if tasks is None else np.asarray(tasks, dtype=np.int64)
    if tasks.size == 0:
        raise EstimatorError("empty constraint batch")
    batches = [None] * tasks.size if batches is None else batches
    blocks_X, blocks_y, blocks_ref, owners = [], [], [], []
    for j, (k, subset) in enumerate(zip(tasks, batches)):
        spec = specs[k]
        subset = _check_subset(spec, subset)
        X = spec.X if subset is None else spec.X[subset]
        blocks_X.append(X)
        blocks_y.append(np.full(X.shape[0], spec.task))
        blocks_ref.append(spec.reference_losses if subset is None else spec.reference_losses[subset])
        owners.append(np.full(X.shape[0], j))
    owners = np.concatenate(owners)
    counts = np.bincount(owners, minlength=tasks.size).astype(np.float64)
    terms = ce_terms(p, np.vstack(blocks_X), np.concatenate(blocks_y), specs[0].class_texts, specs[0].tau0)
    diffs = terms.values - np.concatenate(blocks_ref)
    values = np.bincount(owners, weights=diffs, minlength=tasks.size) / counts
    return ConstraintTerms(tasks, values, (terms, owners, counts))


def positive_part(values) -> np.ndarray:
    return np.maximum(np.asarray(values, dtype=np.float64), 0.0)


def penalty_Phi(p: ParamVector, pairs: PairSet, specs: list[ConstraintSpec], beta: float, tau: float = 0.05) -> float:
    """F + (1/m) Σ_k (β/2)·[h_k]_+²."""
    if beta < 0:
        raise ShapeError(f"beta must be >= 0, got {beta}")
    value = objective_F(p, pairs, tau)
    if not specs:
        return value
    h = np.array([constraint_h(p, spec) for spec in specs])
    return value + float(np.sum(0.5 * beta * positive_part(h) ** 2)) / len(specs)


def grad_Phi(p: ParamVector, pairs: PairSet, specs: list[ConstraintSpec], beta: float, tau: float = 0.05) -> np.ndarray:
    """∇F + (β/m) Σ_k [h_k]_+ ∇h_k, with every constraint in one backward pass."""
    gradient = grad_F(p, pairs, tau)
    if not specs:
        return gradient
    h = np.array([constraint_h(p, spec) for spec in specs])
    weights = beta * positive_part(h) / len(specs)
    if not np.any(weights):
        return gradient
    return gradient + constraint_terms(p, specs).vjp(weights)
