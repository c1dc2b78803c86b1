"""
Desk-scale two-tower encoder.

The image tower is a linear map (or one hidden layer) followed by
normalization. The text tower is a linear backbone Ē2(u, t) = B·t followed by
a head: the shared head W, or the task head W + U_k V_kᵀ when task-dependent
heads are enabled. All parameters live in one flat float64 vector whose block
order is fixed by `ParamLayout`; gradients use the same layout.

Backpropagation is written out by hand: affine layers, the optional tanh, and
the normalization map y = z/‖z‖ whose Jacobian is (I − y yᵀ)/‖z‖.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DegenerateInputError, ShapeError

logger = logging.getLogger(__name__)

ACTIVATIONS = ('identity', 'tanh')

# Pre-normalization vectors shorter than this are rejected.
MIN_NORM = 1e-30

NO_TASK = -1


@dataclass(frozen=True)
class ModelShape:
    """Dimensions of the two-tower model."""
    d_x: int
    d_t: int
    d_1: int
    d_2: int
    num_tasks: int
    d_h: int = 0
    r: int = 1
    heads_enabled: bool = False
    activation: str = 'identity'

    def __post_init__(self):
        for name in ('d_x', 'd_t', 'd_1', 'd_2', 'num_tasks'):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_h < 0:
            raise ShapeError(f"d_h must be >= 0, got {self.d_h}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.heads_enabled and not 1 <= self.r < min(self.d_1, self.d_2):
            raise ShapeError(
                f"rank r must satisfy 1 <= r < min(d_1, d_2) = {min(self.d_1, self.d_2)}, got {self.r}")

    @property
    def d_emb(self) -> int:
        return self.d_2

    def to_dict(self) -> dict:
        return {
            'd_x': self.d_x, 'd_t': self.d_t, 'd_h': self.d_h, 'd_1': self.d_1,
            'd_2': self.d_2, 'r': self.r, 'num_tasks': self.num_tasks,
            'heads_enabled': self.heads_enabled, 'activation': self.activation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelShape':
        return cls(**data)


def head_block_names(k: int) -> tuple[str, str]:
    return f"head_U{k}", f"head_V{k}"


@dataclass(frozen=True)
class ParamLayout:
    """Fixed flattening order of the parameter blocks."""
    shape: ModelShape

    @cached_property
    def blocks(self) -> tuple[tuple[str, tuple[int, int]], ...]:
        s = self.shape
        blocks = []
        if s.d_h > 0:
            blocks.append(('img_hidden', (s.d_h, s.d_x)))
            blocks.append(('img_out', (s.d_emb, s.d_h)))
        else:
            blocks.append(('img_out', (s.d_emb, s.d_x)))
        blocks.append(('txt', (s.d_1, s.d_t)))
        blocks.append(('head_W', (s.d_2, s.d_1)))
        if s.heads_enabled:
            for k in range(s.num_tasks):
                blocks.append((head_block_names(k)[0], (s.d_2, s.r)))
            for k in range(s.num_tasks):
                blocks.append((head_block_names(k)[1], (s.d_1, s.r)))
        return tuple(blocks)

    @cached_property
    def offsets(self) -> dict[str, tuple[int, int, tuple[int, int]]]:
        offsets = {}
        start = 0
        for name, (rows, cols) in self.blocks:
            offsets[name] = (start, start + rows * cols, (rows, cols))
            start += rows * cols
        return offsets

    @cached_property
    def size(self) -> int:
        return sum(rows * cols for _, (rows, cols) in self.blocks)

    def slice(self, name: str) -> slice:
        start, stop, _ = self.offsets[name]
        return slice(start, stop)

    def view(self, flat: np.ndarray, name: str) -> np.ndarray:
        start, stop, block_shape = self.offsets[name]
        return flat[start:stop].reshape(block_shape)

    def head_mask(self) -> np.ndarray:
        """Boolean mask of the U_k/V_k coordinates (all False without heads)."""
        mask = np.zeros(self.size, dtype=bool)
        for name, _ in self.blocks:
            if name.startswith('head_U') or name.startswith('head_V'):
                mask[self.slice(name)] = True
        return mask

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """
    Immutable flat parameter state.

    Block views returned by the accessors are read-only; build a modified
    vector with `with_flat` or `with_blocks`.
    """
    layout: ParamLayout
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64, copy=True).reshape(-1)
        if flat.size != self.layout.size:
            raise ShapeError(f"flat vector has {flat.size} entries, layout expects {self.layout.size}")
        flat.setflags(write=False)
        object.__setattr__(self, 'flat', flat)

    @property
    def shape(self) -> ModelShape:
        return self.layout.shape

    def block(self, name: str) -> np.ndarray:
        return self.layout.view(self.flat, name)

    @property
    def head_W(self) -> np.ndarray:
        return self.block('head_W')

    @property
    def backbone_txt(self) -> np.ndarray:
        return self.block('txt')

    @property
    def heads_U(self) -> tuple[np.ndarray, ...] | None:
        if not self.shape.heads_enabled:
            return None
        return tuple(self.block(head_block_names(k)[0]) for k in range(self.shape.num_tasks))

    @property
    def heads_V(self) -> tuple[np.ndarray, ...] | None:
        if not self.shape.heads_enabled:
            return None
        return tuple(self.block(head_block_names(k)[1]) for k in range(self.shape.num_tasks))

    def with_flat(self, flat: np.ndarray) -> 'ParamVector':
        return ParamVector(self.layout, flat)

    def with_blocks(self, **blocks: np.ndarray) -> 'ParamVector':
        flat = self.flat.copy()
        for name, value in blocks.items():
            start, stop, block_shape = self.layout.offsets[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != block_shape:
                raise ShapeError(f"block {name} expects shape {block_shape}, got {value.shape}")
            flat[start:stop] = value.reshape(-1)
        return ParamVector(self.layout, flat)

    def heads_are_zero(self) -> bool:
        """True when every task head reduces to W (U_k V_kᵀ = 0 for all k)."""
        if not self.shape.heads_enabled:
            return True
        return all(not np.any(U @ V.T) for U, V in zip(self.heads_U, self.heads_V))

    def without_heads(self) -> 'ParamVector':
        """Drop the U_k/V_k blocks; the (u, W) coordinates are kept as they are."""
        if not self.shape.heads_enabled:
            return self
        layout = ParamLayout(_replace_heads(self.shape, False))
        return ParamVector(layout, self.flat[~self.layout.head_mask()])


def _replace_heads(shape: ModelShape, enabled: bool, r: int | None = None) -> ModelShape:
    data = shape.to_dict()
    data['heads_enabled'] = enabled
    if r is not None:
        data['r'] = r
    return ModelShape.from_dict(data)


def flatten(p: ParamVector) -> np.ndarray:
    return p.flat.copy()


def unflatten(layout: ParamLayout | ModelShape, flat: np.ndarray) -> ParamVector:
    if isinstance(layout, ModelShape):
        layout = ParamLayout(layout)
    return ParamVector(layout, flat)


def init_params(shape: ModelShape, rng: np.random.Generator) -> ParamVector:
    """
    Random initial parameters.

    Dense blocks are Gaussian with variance 1/fan_in. Each U_k starts at zero
    and each V_k is uniform on (−1/√d_1, 1/√d_1), so every task head equals W
    at initialization.
    """
    layout = ParamLayout(shape)
    flat = layout.zeros()
    for name, (rows, cols) in layout.blocks:
        if name.startswith('head_U'):
            continue
        if name.startswith('head_V'):
            bound = 1.0 / np.sqrt(shape.d_1)
            values = rng.uniform(-bound, bound, size=(rows, cols))
        else:
            values = rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))
        flat[layout.slice(name)] = values.reshape(-1)
    return ParamVector(layout, flat)


def attach_heads(p: ParamVector, r: int, rng: np.random.Generator) -> ParamVector:
    """Return `p` extended with zero U_k and random V_k (leaves every output unchanged)."""
    if p.shape.heads_enabled:
        return p
    layout = ParamLayout(_replace_heads(p.shape, True, r))
    flat = layout.zeros()
    flat[~layout.head_mask()] = p.flat
    bound = 1.0 / np.sqrt(p.shape.d_1)
    for k in range(p.shape.num_tasks):
        name = head_block_names(k)[1]
        flat[layout.slice(name)] = rng.uniform(-bound, bound, size=p.shape.d_1 * r)
    return ParamVector(layout, flat)


def _activate(a: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(a) if activation == 'tanh' else a


def _normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < MIN_NORM):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(f"pre-normalization vector {bad} has norm {norms[bad]:.3e}")
    return z / norms[:, None], norms


def _normalize_backward(y: np.ndarray, norms: np.ndarray, gy: np.ndarray) -> np.ndarray:
    radial = np.sum(y * gy, axis=1)
    return (gy - y * radial[:, None]) / norms[:, None]


def _as_batch(inputs: np.ndarray, dim: int, what: str) -> np.ndarray:
    batch = np.asarray(inputs, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ShapeError(f"{what} features must have dimension {dim}, got shape {np.shape(inputs)}")
    return batch


@dataclass
class EncodedBatch:
    """Unit embeddings of a batch plus the pullback to flat parameter gradients."""
    values: np.ndarray
    _backward: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def vjp(self, cotangent: np.ndarray) -> np.ndarray:
        """Flat gradient of Σ ⟨cotangent_i, values_i⟩ with respect to the parameters."""
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != self.values.shape:
            raise ShapeError(f"cotangent shape {cotangent.shape} != embedding shape {self.values.shape}")
        return self._backward(cotangent)


def embed_images(p: ParamVector, X: np.ndarray) -> EncodedBatch:
    """Encode a batch of image features (rows of X)."""
    s = p.shape
    X = _as_batch(X, s.d_x, 'image')
    layout = p.layout
    out = p.block('img_out')
    if s.d_h > 0:
        hidden = p.block('img_hidden')
        a = X @ hidden.T
        h = _activate(a, s.activation)
        z = h @ out.T
    else:
        z = X @ out.T
    y, norms = _normalize(z)

    def backward(gy: np.ndarray) -> np.ndarray:
        grad = layout.zeros()
        gz = _normalize_backward(y, norms, gy)
        if s.d_h > 0:
            grad[layout.slice('img_out')] = (gz.T @ h).reshape(-1)
            gh = gz @ out
            if s.activation == 'tanh':
                gh = gh * (1.0 - h * h)
            grad[layout.slice('img_hidden')] = (gh.T @ X).reshape(-1)
        else:
            grad[layout.slice('img_out')] = (gz.T @ X).reshape(-1)
        return grad

    return EncodedBatch(y, backward)


def _task_array(tasks, n: int, shape: ModelShape) -> np.ndarray:
    if tasks is None:
        return np.full(n, NO_TASK, dtype=np.int64)
    tasks = np.asarray([NO_TASK if t is None else t for t in np.atleast_1d(tasks)], dtype=np.int64)
    if tasks.size == 1 and n > 1:
        tasks = np.full(n, tasks[0], dtype=np.int64)
    if tasks.size != n:
        raise ShapeError(f"got {tasks.size} task indices for {n} texts")
    if shape.heads_enabled and np.any(tasks >= shape.num_tasks):
        raise ShapeError(f"task index out of range (num_tasks = {shape.num_tasks})")
    if np.any(tasks < NO_TASK):
        raise ShapeError("task indices must be >= 0 (or None)")
    if not shape.heads_enabled:
        tasks = np.full(n, NO_TASK, dtype=np.int64)
    return tasks


def embed_texts(p: ParamVector, T: np.ndarray, tasks=None) -> EncodedBatch:
    """
    Encode a batch of text features.

    `tasks` is None (shared head for every row), a single index, or one index
    per row; None entries select the shared head W.
    """
    s = p.shape
    T = _as_batch(T, s.d_t, 'text')
    task_ids = _task_array(tasks, T.shape[0], s)
    layout = p.layout
    B = p.block('txt')
    W = p.block('head_W')
    e = T @ B.T
    z = e @ W.T
    groups = []
    if s.heads_enabled:
        for k in np.unique(task_ids[task_ids >= 0]):
            rows = np.flatnonzero(task_ids == k)
            U = p.block(head_block_names(k)[0])
            V = p.block(head_block_names(k)[1])
            ev = e[rows] @ V
            z[rows] += ev @ U.T
            groups.append((int(k), rows, U, V, ev))
    y, norms = _normalize(z)

    def backward(gy: np.ndarray) -> np.ndarray:
        grad = layout.zeros()
        gz = _normalize_backward(y, norms, gy)
        grad[layout.slice('head_W')] = (gz.T @ e).reshape(-1)
        ge = gz @ W
        for k, rows, U, V, ev in groups:
            gzu = gz[rows] @ U
            ge[rows] += gzu @ V.T
            u_name, v_name = head_block_names(k)
            grad[layout.slice(u_name)] = (gz[rows].T @ ev).reshape(-1)
            grad[layout.slice(v_name)] = (e[rows].T @ gzu).reshape(-1)
        grad[layout.slice('txt')] = (ge.T @ T).reshape(-1)
        return grad

    return EncodedBatch(y, backward)


def encode_image(p: ParamVector, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single feature vector, got shape {x.shape}")
    return embed_images(p, x).values[0]


def encode_text(p: ParamVector, t: np.ndarray, task: int | None = None) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1:
        raise ShapeError(f"expected a single feature vector, got shape {t.shape}")
    return embed_texts(p, t, task).values[0]


def class_text_tasks(num_classes: int) -> np.ndarray:
    """Class text t̂_k is encoded with head k."""
    return np.arange(num_classes)


def embed_class_texts(p: ParamVector, class_texts: np.ndarray) -> EncodedBatch:
    class_texts = _as_batch(class_texts, p.shape.d_t, 'class text')
    if class_texts.shape[0] != p.shape.num_tasks:
        raise ShapeError(
            f"expected {p.shape.num_tasks} class texts, got {class_texts.shape[0]}")
    return embed_texts(p, class_texts, class_text_tasks(class_texts.shape[0]))


def batch_logits(p: ParamVector, X: np.ndarray, class_texts: np.ndarray) -> np.ndarray:
    """Score matrix s[i, k] = ⟨E1(x_i), E2(t̂_k, k)⟩."""
    images = embed_images(p, X).values
    texts = embed_class_texts(p, class_texts).values
    return images @ texts.T


def logits(p: ParamVector, x: np.ndarray, class_texts: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single feature vector, got shape {x.shape}")
    return batch_logits(p, x, class_texts)[0]


def predict(logit_vector: np.ndarray) -> int:
    """Index of the largest logit; ties go to the lowest index."""
    logit_vector = np.asarray(logit_vector)
    if logit_vector.ndim != 1 or logit_vector.size == 0:
        raise ShapeError("predict needs a nonempty logit vector")
    return int(np.argmax(logit_vector))


def grad_embedding_wrt_params(
    p: ParamVector,
    inputs: np.ndarray,
    tower: str,
    task: int | None = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """
    Pullback of one embedding.

    Returns g ↦ dL/dp (flat) for any cotangent g = dL/d(embedding).
    """
    if tower == 'image':
        encoded = embed_images(p, inputs)
    elif tower == 'text':
        encoded = embed_texts(p, inputs, task)
    else:
        raise ShapeError(f"tower must be 'image' or 'text', got {tower!r}")
    if encoded.values.shape[0] != 1:
        raise ShapeError("grad_embedding_wrt_params expects a single input vector")

    def pullback(g: np.ndarray) -> np.ndarray:
        return encoded.vjp(np.asarray(g, dtype=np.float64).reshape(1, -1))

    return pullback
