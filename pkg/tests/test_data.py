import numpy as np
import pytest

from retention.data import (BaseConfig, ScenarioSpec, base_training_ids, build_constraint_specs, build_eval_sets,
                            constraint_rows, generate_scenario, load_scenario, make_base_model, save_scenario,
                            target_pair_set, wccl_pair_sets)
from retention.errors import ConfigError, GenerationError, ParseError
from retention.losses import constraint_h
from retention.model import ModelShape
from tests.conftest import small_spec


def scenario_bytes(path):
    return {name: (path / name).read_bytes() for name in ('manifest.json', 'images.csv', 'texts.csv')}


def rewrite_line(path, number, transform):
    lines = path.read_text(encoding='utf-8').split('\n')
    lines[number - 1] = transform(lines[number - 1])
    path.write_text('\n'.join(lines), encoding='utf-8')


class TestGeneration:

    def test_same_seed_same_files(self, tmp_path):
        save_scenario(generate_scenario(small_spec(seed=5)), tmp_path / 'a')
        save_scenario(generate_scenario(small_spec(seed=5)), tmp_path / 'b')
        assert scenario_bytes(tmp_path / 'a') == scenario_bytes(tmp_path / 'b')

    def test_seed_changes_samples(self):
        first = generate_scenario(small_spec(seed=5))
        second = generate_scenario(small_spec(seed=6))
        assert not np.array_equal(first.images.features, second.images.features)

    def test_noise_free_samples_sit_on_prototypes(self):
        scenario = generate_scenario(small_spec(noise=0.0, text_noise=0.0))
        images = scenario.images
        for label in range(4):
            rows = images.select(label=label)
            np.testing.assert_array_equal(images.features[rows], np.repeat(images.features[rows[:1]], rows.size, 0))

    def test_counts(self, scenario):
        images = scenario.images
        assert len(images.select(split='train', tag='protected')) == 3 * 40
        assert len(images.select(split='train', tag='target')) == 10
        assert len(images.select(tag='pair')) == 6
        assert len(images.select(tag='negative')) == 2 * 6
        assert scenario.class_texts.shape == (4, 8)
        np.testing.assert_array_equal(scenario.texts.labels[scenario.texts.select(tag='class')], [0, 1, 2, 3])

    def test_pairs_share_ids_across_modalities(self, scenario):
        pair_ids = [scenario.images.ids[i] for i in scenario.images.select(tag='pair')]
        text_ids = [scenario.texts.ids[i] for i in scenario.texts.select(tag='pair')]
        assert pair_ids == text_ids

    def test_unseparated_prototypes(self):
        with pytest.raises(GenerationError):
            generate_scenario(small_spec(separation=0.0))
        with pytest.raises(GenerationError):
            generate_scenario(small_spec(d_x=3))

    def test_overlapping_classes_fail_the_self_check(self):
        with pytest.raises(GenerationError):
            generate_scenario(small_spec(noise=20.0))

    @pytest.mark.parametrize('overrides', [
        {'target_classes': [0, 1, 2, 3]}, {'target_classes': [3, 3]}, {'target_classes': [4]},
        {'train_per_class': 0}, {'noise': -1.0}, {'seed': -1}, {'external_pairs': -2},
    ])
    def test_invalid_spec(self, overrides):
        with pytest.raises(ConfigError):
            small_spec(**overrides)

    def test_protected_classes(self):
        assert small_spec(target_classes=[1, 3]).protected_classes == [0, 2]


class TestPersistence:

    def test_load_restores_every_float(self, scenario, tmp_path):
        save_scenario(scenario, tmp_path / 's')
        again = load_scenario(tmp_path / 's')
        np.testing.assert_array_equal(again.images.features, scenario.images.features)
        np.testing.assert_array_equal(again.texts.features, scenario.texts.features)
        assert again.images.ids == scenario.images.ids
        assert again.spec == scenario.spec

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ParseError):
            load_scenario(tmp_path)

    def test_bad_label_names_the_line(self, scenario, tmp_path):
        save_scenario(scenario, tmp_path / 's')
        rewrite_line(tmp_path / 's' / 'images.csv', 3, lambda line: line.replace(',0,', ',zero,', 1))
        with pytest.raises(ParseError) as info:
            load_scenario(tmp_path / 's')
        assert info.value.line == 3
        assert info.value.field == 'label'

    def test_bad_header(self, scenario, tmp_path):
        save_scenario(scenario, tmp_path / 's')
        rewrite_line(tmp_path / 's' / 'texts.csv', 1, lambda line: line.replace('f0', 'g0'))
        with pytest.raises(ParseError) as info:
            load_scenario(tmp_path / 's')
        assert info.value.field == 'f0'

    def test_duplicate_id(self, scenario, tmp_path):
        save_scenario(scenario, tmp_path / 's')
        path = tmp_path / 's' / 'images.csv'
        lines = path.read_text(encoding='utf-8').split('\n')
        lines.insert(2, lines[1])
        path.write_text('\n'.join(lines), encoding='utf-8')
        with pytest.raises(ParseError) as info:
            load_scenario(tmp_path / 's')
        assert info.value.field == 'id'

    def test_unknown_spec_field(self, scenario, tmp_path):
        save_scenario(scenario, tmp_path / 's')
        manifest = tmp_path / 's' / 'manifest.json'
        manifest.write_text(manifest.read_text().replace('"d_x"', '"dim_x"'), encoding='utf-8')
        with pytest.raises(ParseError):
            load_scenario(tmp_path / 's')


class TestBaseModel:

    def test_training_ids_exclude_targets_and_held_out_data(self, scenario):
        ids = set(base_training_ids(scenario))
        images = scenario.images
        for i in np.flatnonzero(images.labels == 3):
            assert images.ids[i] not in ids
        for split in ('val', 'test'):
            assert not ids & {images.ids[i] for i in images.select(split=split)}
        assert len(ids) == 3 * 40

    def test_shape_must_match_scenario(self, scenario):
        with pytest.raises(ConfigError):
            make_base_model(scenario, ModelShape(d_x=8, d_t=8, d_1=6, d_2=6, num_tasks=3), BaseConfig(iterations=0))
        with pytest.raises(ConfigError):
            make_base_model(scenario, ModelShape(d_x=7, d_t=8, d_1=6, d_2=6, num_tasks=4), BaseConfig(iterations=0))

    def test_calibration_bar_catches_an_untrainable_shape(self, scenario):
        # a one-dimensional embedding ranks class texts in one order, so at most
        # two of the three protected classes can win an argmax
        narrow = ModelShape(d_x=8, d_t=8, d_1=6, d_2=1, num_tasks=4)
        with pytest.raises(GenerationError):
            make_base_model(scenario, narrow, BaseConfig(iterations=20, eta=0.5, calibration=0.9))
        assert make_base_model(scenario, narrow, BaseConfig(iterations=0, calibration=0.0)).shape == narrow

    def test_deterministic(self, scenario, model_shape, w_old):
        again = make_base_model(scenario, model_shape, BaseConfig(iterations=100, eta=0.5, calibration=0.0))
        np.testing.assert_array_equal(again.flat, w_old.flat)

    @pytest.mark.parametrize('overrides', [{'iterations': -1}, {'eta': 0.0}, {'calibration': 1.5}])
    def test_invalid_config(self, overrides):
        with pytest.raises(ConfigError):
            BaseConfig(**overrides)


class TestBuilders:

    def test_target_pairs_come_first(self, scenario):
        pairs = target_pair_set(scenario, 3)
        assert pairs.n_pairs == 6
        np.testing.assert_array_equal(pairs.anchors, np.arange(6))
        negatives = scenario.images.select(tag='negative')
        assert pairs.registry_size == 6 + int(np.sum(scenario.images.labels[negatives] != 3))

    def test_no_pairs_for_class(self, scenario):
        with pytest.raises(GenerationError):
            target_pair_set(scenario, 0)

    def test_constraints_are_feasible_at_the_base_model(self, scenario, w_old):
        specs = build_constraint_specs(scenario, w_old, [0, 1, 2], 0.05, max_samples=15)
        assert [spec.n_k for spec in specs] == [15, 15, 15]
        assert all(constraint_h(w_old, spec) == 0.0 for spec in specs)

    def test_constraint_rows_cap(self, scenario):
        rows = constraint_rows(scenario, 1, 'train')
        np.testing.assert_array_equal(constraint_rows(scenario, 1, 'train', 5), rows[:5])
        assert len(constraint_rows(scenario, 3, 'train')) == 10

    def test_eval_sets(self, scenario):
        held_out = build_eval_sets(scenario, 'test', [0, 2], 3, 0.05)
        assert held_out.disjoint_from_training
        assert [len(X) for X in held_out.protected] == [20, 20]
        assert len(held_out.target) == 20
        assert not build_eval_sets(scenario, 'train', [0, 2], 3, 0.05).disjoint_from_training

    def test_wccl_pools_leave_out_their_own_task(self, scenario):
        sets = wccl_pair_sets(scenario, [0, 1], 3, max_samples=4)
        assert len(sets) == 2
        first = sets[0]
        assert first.n_pairs == 4
        pool = set(first.pool_indices(0).tolist())
        own = set(first.anchors.tolist())
        assert own & pool == {int(first.anchors[0])}
        assert set(sets[1].anchors.tolist()) <= pool
        np.testing.assert_array_equal(first.texts[first.anchors[0]], scenario.class_texts[0])
