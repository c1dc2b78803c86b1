"""
Configuration module for devsafe experiments.

One JSON document describes an experiment. `load_config` reads it, applies
`--override key=value` pairs, validates every section strictly (unknown
fields are errors named by their dotted path) and caches the result; the
getters return typed views of the cached document.
"""

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from retention.baselines import BaselineConfig
from retention.data import BaseConfig, ScenarioSpec
from retention.errors import ConfigError
from retention.files import check_fields
from retention.model import ACTIVATIONS, ModelShape
from retention.optimizer import SolverConfig

DEFAULT_CONFIG_PATH = Path(__file__).parent / "configs" / "default.json"

METHODS = ('penalty', 'rm', 'wccl', 'finetune')
SELECTION_POLICIES = ('best-val', 'last')
TOP_LEVEL = ('scenario', 'model', 'base', 'method', 'solver', 'baseline', 'seeds', 'constraint_samples',
             'rounds', 'selection', 'output', 'study')

_config: dict[str, Any] = {}
_experiment: 'ExperimentConfig | None' = None


@dataclass
class ModelConfig:
    d_h: int = 0
    d_1: int = 16
    d_2: int = 16
    r: int = 2
    heads: bool = False
    activation: str = 'identity'

    def shape(self, spec: ScenarioSpec, heads: bool = False) -> ModelShape:
        return ModelShape(d_x=spec.d_x, d_t=spec.d_t, d_1=self.d_1, d_2=self.d_2, num_tasks=spec.num_classes,
                          d_h=self.d_h, r=self.r, heads_enabled=heads, activation=self.activation)


@dataclass
class StudyConfig:
    sample_counts: list[int] = field(default_factory=lambda: [100, 4000])
    rm_alphas: list[float] = field(default_factory=lambda: [0.1, 1.0, 10.0])
    wccl_alphas: list[float] = field(default_factory=lambda: [0.5, 0.9, 0.99])
    ablations: bool = True


@dataclass
class ExperimentConfig:
    scenario_path: str | None
    scenario_spec: ScenarioSpec | None
    model: ModelConfig
    base: BaseConfig
    method: str
    solver: SolverConfig
    baseline: BaselineConfig | None
    seeds: list[int]
    constraint_samples: int | None
    rounds: list[int] | None
    selection_policy: str
    selection_tol: float
    output_dir: str
    wall_clock: bool
    study: StudyConfig


def apply_overrides(document: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """
    Apply `dotted.path=value` overrides in place.

    The value is parsed as JSON when possible and kept as a bare string otherwise.
    """
    for override in overrides:
        key, sep, text = override.partition('=')
        if not sep or not key:
            raise ConfigError('override', f"expected key=value, got {override!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = key.split('.')
        node = document
        for depth, part in enumerate(parts[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError('.'.join(parts[:depth + 1]), "is not a section")
            node = child
        node[parts[-1]] = value
    return document


def _dataclass_from(cls, data: Any, prefix: str):
    check_fields(data, [f.name for f in fields(cls)], prefix)
    return cls(**data)


def _int_list(value: Any, name: str, minimum: int = 0) -> list[int]:
    if not isinstance(value, list) or not value:
        raise ConfigError(name, "must be a nonempty list of integers")
    for item in value:
        if isinstance(item, bool) or not isinstance(item, int) or item < minimum:
            raise ConfigError(name, f"entries must be integers >= {minimum}, got {item!r}")
    return value


def validate(document: dict[str, Any]) -> ExperimentConfig:
    """Build the typed experiment view; raises ConfigError naming the offending field."""
    check_fields(document, TOP_LEVEL, 'config')

    scenario = check_fields(document.get('scenario', {}), ('path', 'generate'), 'scenario')
    if ('path' in scenario) == ('generate' in scenario):
        raise ConfigError('scenario', "set exactly one of 'path' or 'generate'")
    scenario_path = scenario.get('path')
    if scenario_path is not None and not isinstance(scenario_path, str):
        raise ConfigError('scenario.path', "must be a string")
    scenario_spec = ScenarioSpec.from_dict(scenario['generate']) if 'generate' in scenario else None

    model_data = document.get('model', {})
    model = _dataclass_from(ModelConfig, model_data, 'model')
    for name in ('d_1', 'd_2', 'r'):
        value = getattr(model, name)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise ConfigError(f"model.{name}", f"must be an integer >= 1, got {value!r}")
    if isinstance(model.d_h, bool) or not isinstance(model.d_h, int) or model.d_h < 0:
        raise ConfigError('model.d_h', f"must be an integer >= 0, got {model.d_h!r}")
    if model.activation not in ACTIVATIONS:
        raise ConfigError('model.activation', f"must be one of {ACTIVATIONS}")
    if not isinstance(model.heads, bool):
        raise ConfigError('model.heads', "must be true or false")
    if model.heads and not model.r < min(model.d_1, model.d_2):
        raise ConfigError('model.r', f"must be < min(d_1, d_2) = {min(model.d_1, model.d_2)}")

    base = BaseConfig.from_dict(document.get('base', {}))
    method = document.get('method', 'penalty')
    if method not in METHODS:
        raise ConfigError('method', f"must be one of {METHODS}, got {method!r}")
    solver = SolverConfig.from_dict(document.get('solver', {}))

    baseline_data = document.get('baseline', {})
    check_fields(baseline_data, ('alpha',), 'baseline')
    baseline = None
    if method != 'penalty':
        baseline = BaselineConfig.from_dict({'kind': method, 'alpha': baseline_data.get('alpha', 0.0 if method == 'finetune' else 1.0)})

    seeds = _int_list(document.get('seeds', [0, 1, 2, 3, 4]), 'seeds')
    constraint_samples = document.get('constraint_samples')
    if constraint_samples is not None:
        _int_list([constraint_samples], 'constraint_samples', 1)
    rounds = document.get('rounds')
    if rounds is not None:
        _int_list(rounds, 'rounds')

    selection = check_fields(document.get('selection', {}), ('policy', 'tol'), 'selection')
    policy = selection.get('policy', 'best-val')
    if policy not in SELECTION_POLICIES:
        raise ConfigError('selection.policy', f"must be one of {SELECTION_POLICIES}, got {policy!r}")
    tol = selection.get('tol', 1e-3)
    if isinstance(tol, bool) or not isinstance(tol, (int, float)) or tol < 0:
        raise ConfigError('selection.tol', f"must be a number >= 0, got {tol!r}")

    output = check_fields(document.get('output', {}), ('dir', 'wall_clock'), 'output')
    output_dir = output.get('dir', 'results')
    wall_clock = output.get('wall_clock', False)
    if not isinstance(wall_clock, bool):
        raise ConfigError('output.wall_clock', "must be true or false")

    study = _dataclass_from(StudyConfig, document.get('study', {}), 'study')
    _int_list(study.sample_counts, 'study.sample_counts', 1)
    for alpha in study.rm_alphas:
        BaselineConfig.from_dict({'kind': 'rm', 'alpha': alpha}, 'study.rm_alphas')
    for alpha in study.wccl_alphas:
        BaselineConfig.from_dict({'kind': 'wccl', 'alpha': alpha}, 'study.wccl_alphas')

    return ExperimentConfig(scenario_path, scenario_spec, model, base, method, solver, baseline, seeds,
                            constraint_samples, rounds, policy, float(tol), output_dir, wall_clock, study)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict[str, Any]:
    """Load, override, validate and cache the experiment document."""
    global _config, _experiment
    if _config and path is None and not overrides:
        return _config

    config_path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    try:
        document = json.loads(config_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(
            f"Configuration file not found: {config_path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in config file: {e}")
    if not isinstance(document, dict):
        raise ConfigError('config', "top level must be a JSON object")
    apply_overrides(document, overrides or [])
    _experiment = validate(document)
    _config = document
    return _config


def reset_config() -> None:
    """Forget the cached document."""
    global _config, _experiment
    _config = {}
    _experiment = None


def get_experiment() -> ExperimentConfig:
    """Get the validated experiment view of the loaded configuration."""
    load_config()
    return _experiment


def get_scenario_spec() -> ScenarioSpec | None:
    return get_experiment().scenario_spec


def get_model_shape(spec: ScenarioSpec, heads: bool = False) -> ModelShape:
    return get_experiment().model.shape(spec, heads)


def get_base_config() -> BaseConfig:
    return get_experiment().base


def get_solver_config() -> SolverConfig:
    return get_experiment().solver


def get_baseline_config() -> BaselineConfig | None:
    return get_experiment().baseline
