"""
Synthetic development scenarios.

A scenario holds labeled image features for every class (train/val/test),
image-text pairs of the target classes, a shared pool of negative pairs drawn
from the other classes, and one text feature vector t̂_k per class. Image
features are isotropic Gaussian clusters around orthogonal prototypes;
text features are noisy copies of per-class text prototypes.

On disk a scenario is a directory with `manifest.json`, `images.csv` and
`texts.csv` (header `id,split,tag,label,f0..f{d-1}`).
"""

import logging
import math
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, GenerationError, ParseError
from .files import check_fields, format_float, load_from_json, read_csv, save_to_csv, save_to_json
from .losses import ConstraintSpec, PairSet, ce_terms
from .metrics import EvalSets
from .model import ModelShape, ParamVector, batch_logits, embed_class_texts, init_params
from .rng import RandomStreams

logger = logging.getLogger(__name__)

SCENARIO_FORMAT = "devsafe-scenario"
SCENARIO_VERSION = 1

SPLITS = ('train', 'val', 'test', 'all')
TAGS = ('protected', 'target', 'pair', 'external', 'negative', 'class')

# Generation self-check: nearest-prototype accuracy on protected training data.
MIN_PROTOTYPE_ACCURACY = 0.9


@dataclass
class ScenarioSpec:
    d_x: int = 16
    d_t: int = 16
    num_classes: int = 6
    target_classes: list[int] = field(default_factory=lambda: [5])
    train_per_class: int = 1000
    val_per_class: int = 200
    test_per_class: int = 200
    target_train: int = 100
    target_pairs: int = 57
    external_pairs: int = 0
    negatives_factor: int = 10
    separation: float = 1.0
    noise: float = 0.6
    text_noise: float = 0.3
    external_text_noise: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = 'scenario.generate') -> None:
        def fail(name, message):
            raise ConfigError(f"{prefix}.{name}", message)

        for name in ('d_x', 'd_t', 'num_classes', 'train_per_class', 'val_per_class', 'test_per_class',
                     'target_train', 'target_pairs', 'negatives_factor'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                fail(name, f"must be an integer >= 1, got {value!r}")
        if isinstance(self.external_pairs, bool) or not isinstance(self.external_pairs, int) or self.external_pairs < 0:
            fail('external_pairs', f"must be an integer >= 0, got {self.external_pairs!r}")
        for name in ('separation', 'noise', 'text_noise', 'external_text_noise'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value) or value < 0:
                fail(name, f"must be a finite number >= 0, got {value!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            fail('seed', f"must be a 64-bit unsigned integer, got {self.seed!r}")
        if not self.target_classes:
            fail('target_classes', "must name at least one class")
        if len(set(self.target_classes)) != len(self.target_classes):
            fail('target_classes', "must not repeat a class")
        for label in self.target_classes:
            if not isinstance(label, int) or not 0 <= label < self.num_classes:
                fail('target_classes', f"class {label!r} outside 0..{self.num_classes - 1}")
        if len(self.target_classes) >= self.num_classes:
            fail('target_classes', "at least one class must stay protected")

    @property
    def protected_classes(self) -> list[int]:
        return [k for k in range(self.num_classes) if k not in self.target_classes]

    @classmethod
    def from_dict(cls, data: dict, prefix: str = 'scenario.generate') -> 'ScenarioSpec':
        check_fields(data, [f.name for f in fields(cls)], prefix)
        spec = cls.__new__(cls)
        for f in fields(cls):
            default = f.default if f.default is not MISSING else f.default_factory()
            setattr(spec, f.name, data.get(f.name, default))
        spec.validate(prefix)
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    split: str
    tag: str
    label: int
    features: np.ndarray


@dataclass(eq=False)
class SampleTable:
    """Column-wise sample records of one modality."""
    ids: list[str]
    splits: np.ndarray
    tags: np.ndarray
    labels: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(self.ids[i], str(self.splits[i]), str(self.tags[i]), int(self.labels[i]), self.features[i])

    def mask(self, split: str | None = None, tag: str | None = None, label: int | None = None) -> np.ndarray:
        keep = np.ones(len(self.ids), dtype=bool)
        if split is not None:
            keep &= self.splits == split
        if tag is not None:
            keep &= self.tags == tag
        if label is not None:
            keep &= self.labels == label
        return keep

    def select(self, split: str | None = None, tag: str | None = None, label: int | None = None) -> np.ndarray:
        return np.flatnonzero(self.mask(split, tag, label))


@dataclass(eq=False)
class Scenario:
    spec: ScenarioSpec
    images: SampleTable
    texts: SampleTable

    @property
    def class_texts(self) -> np.ndarray:
        rows = self.texts.select(tag='class')
        return self.texts.features[rows[np.argsort(self.texts.labels[rows], kind='stable')]]


def _orthogonal_prototypes(rng: np.random.Generator, count: int, dim: int, scale: float) -> np.ndarray:
    if dim < count:
        raise GenerationError(f"need dimension >= {count} for {count} separated prototypes, got {dim}")
    q, r = np.linalg.qr(rng.normal(size=(dim, count)))
    q = q * np.sign(np.diag(r))
    return scale * q.T


class _TableBuilder:
    def __init__(self, dim: int):
        self.dim = dim
        self.ids, self.splits, self.tags, self.labels, self.rows = [], [], [], [], []
        self.counters: dict[str, int] = {}

    def add(self, split: str, tag: str, label: int, features: np.ndarray, ident: str | None = None) -> str:
        if ident is None:
            index = self.counters.get(tag, 0)
            self.counters[tag] = index + 1
            ident = f"{tag}-{index:06d}"
        self.ids.append(ident)
        self.splits.append(split)
        self.tags.append(tag)
        self.labels.append(label)
        self.rows.append(np.asarray(features, dtype=np.float64))
        return ident

    def build(self) -> SampleTable:
        features = np.array(self.rows).reshape(len(self.rows), self.dim)
        return SampleTable(self.ids, np.array(self.splits, dtype=object), np.array(self.tags, dtype=object),
                           np.array(self.labels, dtype=np.int64), features)


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    """
    Build a scenario deterministically from `spec.seed`.

    The self-check only asks that the protected classes be separable by their
    image prototypes. It says nothing about what a given model shape can
    learn; that bar is `BaseConfig.calibration`, enforced by make_base_model.

    Raises:
        GenerationError: if the prototypes cannot be separated or the
            nearest-prototype accuracy on protected training data is below 0.9
    """
    if spec.separation <= 0:
        raise GenerationError("class separation must be > 0")
    streams = RandomStreams(spec.seed, ('prototypes', 'samples', 'pairs', 'negatives'))
    image_protos = _orthogonal_prototypes(streams['prototypes'], spec.num_classes, spec.d_x, spec.separation)
    text_protos = _orthogonal_prototypes(streams['prototypes'], spec.num_classes, spec.d_t, spec.separation)
    image_sigma = spec.noise / math.sqrt(spec.d_x)
    text_sigma = spec.text_noise / math.sqrt(spec.d_t)

    def image(label: int, rng: np.random.Generator) -> np.ndarray:
        return image_protos[label] + image_sigma * rng.normal(size=spec.d_x)

    def text(label: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
        return text_protos[label] + sigma * rng.normal(size=spec.d_t)

    images = _TableBuilder(spec.d_x)
    texts = _TableBuilder(spec.d_t)
    rng = streams['samples']
    counts = {'train': spec.train_per_class, 'val': spec.val_per_class, 'test': spec.test_per_class}
    for label in range(spec.num_classes):
        is_target = label in spec.target_classes
        tag = 'target' if is_target else 'protected'
        for split, count in counts.items():
            if split == 'train' and is_target:
                count = spec.target_train
            for _ in range(count):
                images.add(split, tag, label, image(label, rng))

    rng = streams['pairs']
    n_pairs = 0
    for label in spec.target_classes:
        for tag, count, sigma in (('pair', spec.target_pairs, text_sigma),
                                  ('external', spec.external_pairs, spec.external_text_noise / math.sqrt(spec.d_t))):
            for _ in range(count):
                ident = images.add('train', tag, label, image(label, rng))
                texts.add('train', tag, label, text(label, sigma, rng), ident)
                n_pairs += 1

    rng = streams['negatives']
    for _ in range(spec.negatives_factor * n_pairs):
        label = int(rng.integers(spec.num_classes))
        ident = images.add('train', 'negative', label, image(label, rng))
        texts.add('train', 'negative', label, text(label, text_sigma, rng), ident)

    for label in range(spec.num_classes):
        texts.add('all', 'class', label, text_protos[label], f"class-{label:06d}")

    scenario = Scenario(spec, images.build(), texts.build())
    accuracy = nearest_prototype_accuracy(scenario, image_protos)
    if accuracy < MIN_PROTOTYPE_ACCURACY:
        raise GenerationError(
            f"nearest-prototype accuracy {accuracy:.3f} < {MIN_PROTOTYPE_ACCURACY}; raise separation or lower noise")
    logger.info(f"Generated scenario: {len(scenario.images)} images, {len(scenario.texts)} texts, "
                f"{n_pairs} target pairs, prototype accuracy {accuracy:.3f}")
    return scenario


def nearest_prototype_accuracy(scenario: Scenario, prototypes: np.ndarray) -> float:
    rows = scenario.images.select(split='train', tag='protected')
    X = scenario.images.features[rows]
    distances = ((X[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(distances, axis=1) == scenario.images.labels[rows]))


def _write_table(path: Path, table: SampleTable) -> None:
    dim = table.features.shape[1]
    headers = ['id', 'split', 'tag', 'label'] + [f"f{j}" for j in range(dim)]
    rows = [[table.ids[i], table.splits[i], table.tags[i], int(table.labels[i])]
            + [format_float(v) for v in table.features[i]] for i in range(len(table))]
    save_to_csv(path, headers, rows)


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        'format': SCENARIO_FORMAT,
        'version': SCENARIO_VERSION,
        'spec': scenario.spec.to_dict(),
        'counts': {'images': len(scenario.images), 'texts': len(scenario.texts)},
    }
    save_to_json(manifest, path / 'manifest.json')
    _write_table(path / 'images.csv', scenario.images)
    _write_table(path / 'texts.csv', scenario.texts)
    logger.info(f"Saved scenario to {path}")


def _read_table(path: Path, dim: int, seen: set[str]) -> SampleTable:
    source = str(path)
    if not path.exists():
        raise ParseError(source, "file not found")
    headers, rows = read_csv(path)
    expected = ['id', 'split', 'tag', 'label'] + [f"f{j}" for j in range(dim)]
    for j, name in enumerate(expected):
        if j >= len(headers) or headers[j] != name:
            raise ParseError(source, f"expected column {name!r} at position {j}", line=1, field=name)
    if len(headers) != len(expected):
        raise ParseError(source, f"unexpected column {headers[len(expected)]!r}", line=1, field=headers[len(expected)])
    builder = _TableBuilder(dim)
    for number, row in enumerate(rows, start=2):
        if len(row) != len(expected):
            raise ParseError(source, f"expected {len(expected)} fields, got {len(row)}", line=number)
        ident, split, tag, label = row[:4]
        if ident in seen:
            raise ParseError(source, f"duplicate id {ident!r}", line=number, field='id')
        seen.add(ident)
        if split not in SPLITS:
            raise ParseError(source, f"unknown split {split!r}", line=number, field='split')
        if tag not in TAGS:
            raise ParseError(source, f"unknown tag {tag!r}", line=number, field='tag')
        try:
            label_value = int(label)
        except ValueError:
            raise ParseError(source, f"label {label!r} is not an integer", line=number, field='label')
        values = []
        for j, text in enumerate(row[4:]):
            try:
                values.append(float(text))
            except ValueError:
                raise ParseError(source, f"value {text!r} is not a number", line=number, field=f"f{j}")
        builder.add(split, tag, label_value, np.array(values), ident)
    return builder.build()


def load_scenario(path: str | Path) -> Scenario:
    """Read a scenario directory written by `save_scenario`."""
    path = Path(path)
    manifest_path = path / 'manifest.json'
    if not manifest_path.exists():
        raise ParseError(str(manifest_path), "file not found")
    manifest = load_from_json(manifest_path)
    if manifest.get('format') != SCENARIO_FORMAT:
        raise ParseError(str(manifest_path), "not a scenario manifest", field='format')
    if manifest.get('version') != SCENARIO_VERSION:
        raise ParseError(str(manifest_path), f"unsupported version {manifest.get('version')}", field='version')
    try:
        spec = ScenarioSpec.from_dict(manifest['spec'], prefix='manifest.spec')
    except KeyError:
        raise ParseError(str(manifest_path), "missing field", field='spec')
    except ConfigError as e:
        raise ParseError(str(manifest_path), str(e), field=e.field)
    seen: set[str] = set()
    images = _read_table(path / 'images.csv', spec.d_x, seen)
    texts = _read_table(path / 'texts.csv', spec.d_t, set())
    scenario = Scenario(spec, images, texts)
    if len(texts.select(tag='class')) != spec.num_classes:
        raise ParseError(str(path / 'texts.csv'), f"expected {spec.num_classes} class texts", field='tag')
    return scenario


@dataclass
class BaseConfig:
    """Training of the base model w_old."""
    iterations: int = 300
    eta: float = 0.5
    tau0: float = 0.05
    seed: int = 0
    calibration: float = 0.9

    def __post_init__(self):
        self.validate()

    def validate(self, prefix: str = 'base') -> None:
        if isinstance(self.iterations, bool) or not isinstance(self.iterations, int) or self.iterations < 0:
            raise ConfigError(f"{prefix}.iterations", f"must be an integer >= 0, got {self.iterations!r}")
        for name in ('eta', 'tau0'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ConfigError(f"{prefix}.{name}", f"must be > 0, got {value!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"{prefix}.seed", f"must be a 64-bit unsigned integer, got {self.seed!r}")
        if not 0 <= self.calibration <= 1:
            raise ConfigError(f"{prefix}.calibration", f"must be in [0, 1], got {self.calibration}")

    @classmethod
    def from_dict(cls, data: dict, prefix: str = 'base') -> 'BaseConfig':
        check_fields(data, [f.name for f in fields(cls)], prefix)
        config = cls.__new__(cls)
        for f in fields(cls):
            setattr(config, f.name, data.get(f.name, f.default))
        config.validate(prefix)
        return config


def base_training_ids(scenario: Scenario) -> list[str]:
    """Ids of the samples the base model is trained on: protected-class training images only."""
    return [scenario.images.ids[i] for i in scenario.images.select(split='train', tag='protected')]


def make_base_model(scenario: Scenario, shape: ModelShape, config: BaseConfig) -> ParamVector:
    """
    Train w_old on protected-class training images; target classes are never seen.

    The image output layer is first corrected by least squares so that class
    means land on their class-text embeddings, then full-batch cross-entropy
    descent runs for `config.iterations` steps.

    The calibration bar is the check that w_old is usable for this shape: a
    scenario can pass its prototype self-check and still be out of reach of a
    narrow model.

    Raises:
        GenerationError: if the protected training accuracy stays below the calibration bar
    """
    if shape.num_tasks != scenario.spec.num_classes:
        raise ConfigError('model.num_tasks', f"must equal the scenario's class count {scenario.spec.num_classes}")
    if shape.d_x != scenario.spec.d_x or shape.d_t != scenario.spec.d_t:
        raise ConfigError('model', "feature dimensions do not match the scenario")
    rows = scenario.images.select(split='train', tag='protected')
    X = scenario.images.features[rows]
    y = scenario.images.labels[rows]
    class_texts = scenario.class_texts
    p = init_params(shape, RandomStreams(config.seed)['init'])

    # least-squares warm start of the output layer
    if shape.d_h > 0:
        hidden = X @ p.block('img_hidden').T
        features = np.tanh(hidden) if shape.activation == 'tanh' else hidden
    else:
        features = X
    classes = np.unique(y)
    means = np.array([features[y == k].mean(axis=0) for k in classes])
    goals = embed_class_texts(p, class_texts).values[classes] * np.linalg.norm(means @ p.block('img_out').T, axis=1).mean()
    out = p.block('img_out')
    correction, *_ = np.linalg.lstsq(means, goals - means @ out.T, rcond=None)
    p = p.with_blocks(img_out=out + correction.T)

    n = len(y)
    for step in range(config.iterations):
        terms = ce_terms(p, X, y, class_texts, config.tau0)
        p = p.with_flat(p.flat - config.eta * terms.vjp(np.full(n, 1.0 / n)))
        if step % 100 == 0:
            logger.debug(f"base step {step}: ce={terms.values.mean():.6f}")

    accuracy = float(np.mean(np.argmax(batch_logits(p, X, class_texts), axis=1) == y))
    logger.info(f"Base model: protected train accuracy {accuracy:.3f} after {config.iterations} steps")
    if accuracy < config.calibration:
        raise GenerationError(
            f"base model reaches {accuracy:.3f} protected train accuracy, below the {config.calibration} bar")
    return p


def target_pair_set(scenario: Scenario, target: int) -> PairSet:
    """Target pairs D (plus external pairs) followed by the negatives whose class is not the target."""
    images, texts = scenario.images, scenario.texts
    pairs = np.concatenate([images.select(tag='pair', label=target), images.select(tag='external', label=target)])
    negatives = np.flatnonzero(images.mask(tag='negative') & (images.labels != target))
    rows = np.concatenate([pairs, negatives])
    if pairs.size == 0:
        raise GenerationError(f"scenario has no pairs for target class {target}")
    text_rows = _matching_text_rows(scenario, rows)
    return PairSet(images.features[rows], texts.features[text_rows], np.arange(pairs.size))


def _matching_text_rows(scenario: Scenario, image_rows: np.ndarray) -> np.ndarray:
    index = {ident: i for i, ident in enumerate(scenario.texts.ids)}
    try:
        return np.array([index[scenario.images.ids[i]] for i in image_rows], dtype=np.int64)
    except KeyError as e:
        raise ParseError('texts.csv', f"no text for image {e.args[0]}", field='id')


def constraint_rows(scenario: Scenario, task: int, split: str = 'train', max_samples: int | None = None) -> np.ndarray:
    """Labeled image rows of class `task` in `split`; the first `max_samples` when capped."""
    tag = 'target' if task in scenario.spec.target_classes else 'protected'
    rows = scenario.images.select(split=split, tag=tag, label=task)
    return rows if max_samples is None else rows[:max_samples]


def build_constraint_specs(scenario: Scenario, w_old: ParamVector, tasks: list[int], tau0: float,
                           max_samples: int | None = None) -> list[ConstraintSpec]:
    class_texts = scenario.class_texts
    specs = []
    for task in tasks:
        rows = constraint_rows(scenario, task, 'train', max_samples)
        specs.append(ConstraintSpec.build(w_old, task, scenario.images.features[rows], class_texts, tau0))
    return specs


def build_eval_sets(scenario: Scenario, split: str, tasks: list[int], target: int, tau0: float,
                    max_samples: int | None = None) -> EvalSets:
    """Held-out (or, for split='train', constraint) sets for the protected tasks and the target."""
    images = scenario.images
    protected = tuple(images.features[constraint_rows(scenario, task, split, max_samples)] for task in tasks)
    target_rows = constraint_rows(scenario, target, split)
    return EvalSets(tuple(tasks), protected, target, images.features[target_rows], scenario.class_texts, tau0,
                    disjoint_from_training=split != 'train')


def wccl_pair_sets(scenario: Scenario, tasks: list[int], target: int, max_samples: int | None = None) -> list[PairSet]:
    """
    One pair set per protected task over a unified registry.

    Protected samples pair with their class text t̂_k; the registry also holds
    the target pairs and the negatives. The pools of a task-k anchor are all
    registry rows outside D_k, plus the anchor itself.
    """
    base = target_pair_set(scenario, target)
    class_texts = scenario.class_texts
    blocks_X, blocks_T, groups = [base.images], [base.texts], [np.zeros(base.registry_size, dtype=np.int64)]
    anchors = []
    start = base.registry_size
    for index, task in enumerate(tasks):
        rows = constraint_rows(scenario, task, 'train', max_samples)
        blocks_X.append(scenario.images.features[rows])
        blocks_T.append(np.repeat(class_texts[task][None, :], rows.size, axis=0))
        groups.append(np.full(rows.size, index + 1, dtype=np.int64))
        anchors.append(np.arange(start, start + rows.size))
        start += rows.size
    registry_X = np.vstack(blocks_X)
    registry_T = np.vstack(blocks_T)
    registry_groups = np.concatenate(groups)
    return [PairSet(registry_X, registry_T, a, registry_groups) for a in anchors]

