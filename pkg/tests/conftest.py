"""Shared fixtures: a small scenario, its base model and random parameter vectors."""

import numpy as np
import pytest

import config
from retention.data import BaseConfig, ScenarioSpec, generate_scenario, make_base_model
from retention.losses import ConstraintSpec, PairSet
from retention.model import ModelShape, ParamVector, init_params
from retention.rng import RandomStreams


def small_spec(**overrides) -> ScenarioSpec:
    data = dict(d_x=8, d_t=8, num_classes=4, target_classes=[3], train_per_class=40, val_per_class=20,
                test_per_class=20, target_train=10, target_pairs=6, external_pairs=0, negatives_factor=2,
                noise=0.3, text_noise=0.2, seed=0)
    data.update(overrides)
    return ScenarioSpec(**data)


def random_params(shape: ModelShape, seed: int = 0, head_scale: float = 0.3) -> ParamVector:
    """Random parameters whose task heads are nonzero."""
    rng = np.random.default_rng(seed)
    p = init_params(shape, rng)
    if not shape.heads_enabled:
        return p
    flat = p.flat.copy()
    mask = p.layout.head_mask()
    flat[mask] = head_scale * rng.normal(size=int(mask.sum()))
    return p.with_flat(flat)


@pytest.fixture(autouse=True)
def fresh_config():
    config.reset_config()
    yield
    config.reset_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def shape():
    return ModelShape(d_x=5, d_t=4, d_1=4, d_2=3, num_tasks=3, d_h=3, r=1, heads_enabled=True, activation='tanh')


@pytest.fixture
def flat_shape():
    return ModelShape(d_x=5, d_t=4, d_1=4, d_2=3, num_tasks=3)


@pytest.fixture
def params(shape):
    return random_params(shape, seed=7)


@pytest.fixture
def pair_set():
    rng = np.random.default_rng(11)
    return PairSet(rng.normal(size=(8, 5)), rng.normal(size=(8, 4)), np.arange(5))


@pytest.fixture
def class_texts():
    return np.random.default_rng(5).normal(size=(3, 4))


@pytest.fixture
def constraint_specs(params, class_texts):
    """Two constraints whose reference model differs from `params`."""
    reference = random_params(params.shape, seed=99)
    rng = np.random.default_rng(3)
    return [ConstraintSpec.build(reference, task, rng.normal(size=(6, 5)), class_texts, 0.5) for task in (0, 2)]


@pytest.fixture(scope='session')
def scenario():
    return generate_scenario(small_spec())


@pytest.fixture(scope='session')
def model_shape():
    return ModelShape(d_x=8, d_t=8, d_1=6, d_2=6, num_tasks=4, r=2)


@pytest.fixture(scope='session')
def w_old(scenario, model_shape):
    return make_base_model(scenario, model_shape, BaseConfig(iterations=100, eta=0.5, calibration=0.0))


@pytest.fixture
def streams():
    return RandomStreams(42)
