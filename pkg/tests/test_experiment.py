import json

import numpy as np
import pytest

import config
import devsafe
import study
from retention.errors import ConfigError, DivergenceError, ParseError
from retention.experiment import (SUMMARY_COLUMNS, check_targets, develop_rounds, load_params, read_seed_rows,
                                  round_tasks, run_name, run_seeds, save_params, summarize, summary_table,
                                  write_summary)
from retention.files import read_csv
from retention.model import attach_heads, init_params
from retention.optimizer import TrajectoryRecord
from retention.rng import RandomStreams
from tests.conftest import random_params, small_spec


def experiment_document(out_dir, **sections) -> dict:
    document = {
        'scenario': {'generate': small_spec().to_dict()},
        'model': {'d_1': 6, 'd_2': 6, 'r': 2},
        'base': {'iterations': 50, 'eta': 0.5, 'calibration': 0.0},
        'solver': {'iterations': 0, 'eta': 0.05, 'beta': 10, 'task_batch': 5, 'log_every': 2},
        'seeds': [0, 1],
        'constraint_samples': 10,
        'output': {'dir': str(out_dir)},
    }
    document.update(sections)
    return document


def write_document(tmp_path, document) -> str:
    path = tmp_path / 'experiment.json'
    path.write_text(json.dumps(document))
    return str(path)


def load(tmp_path, overrides=None, **sections) -> config.ExperimentConfig:
    path = write_document(tmp_path, experiment_document(tmp_path / 'out', **sections))
    config.load_config(path, overrides)
    return config.get_experiment()


def seed_row(method='penalty', round_number=1, seed=0, acc=0.0, ce=0.0, delta=0.0) -> dict:
    return {'method': method, 'round': round_number, 'target': 3, 'seed': seed, 'selected_step': 0,
            'test_devsafety_acc': acc, 'test_devsafety_ce': ce, 'test_delta_acc': delta}


class TestNamesAndFiles:

    def test_run_name(self):
        assert run_name('rm', 2, 7) == 'round2-rm-seed7'

    def test_params_reload_bit_exact(self, shape, tmp_path):
        p = random_params(shape, seed=3)
        save_params(p, tmp_path / 'p.json')
        again = load_params(tmp_path / 'p.json')
        np.testing.assert_array_equal(again.flat, p.flat)
        assert again.shape == p.shape

    def test_params_file_checks(self, shape, tmp_path):
        path = tmp_path / 'p.json'
        save_params(random_params(shape), path)
        document = json.loads(path.read_text())
        document['format'] = 'checkpoint'
        path.write_text(json.dumps(document))
        with pytest.raises(ParseError) as info:
            load_params(path)
        assert info.value.field == 'format'


class TestSummary:

    def test_groups_and_population_std(self):
        rows = [seed_row(seed=0, acc=0.1, delta=0.2), seed_row(seed=1, acc=-0.1, delta=0.4),
                seed_row(method='rm', seed=0, acc=0.0, delta=0.1)]
        penalty, rm = summarize(rows)
        assert (penalty.method, penalty.count) == ('penalty', 2)
        assert penalty.retention_ratio == 0.5
        assert penalty.devsafety_mean == pytest.approx(0.0, abs=1e-15)
        assert penalty.devsafety_std == pytest.approx(0.1)
        assert penalty.delta_acc_mean == pytest.approx(0.3)
        assert rm.retention_ratio == 1.0 and rm.devsafety_std == 0.0

    def test_table_appends_mean_and_std(self):
        rows = [seed_row(seed=0, acc=0.2, ce=0.4), seed_row(seed=1, acc=0.0, ce=0.0)]
        table = summary_table(rows)
        assert len(table) == 4
        mean, std = table[2], table[3]
        assert mean[3] == 'mean' and std[3] == 'std'
        assert mean[SUMMARY_COLUMNS.index('test_devsafety_acc')] == pytest.approx(0.1)
        assert mean[SUMMARY_COLUMNS.index('test_devsafety_ce')] == pytest.approx(0.2)
        assert mean[SUMMARY_COLUMNS.index('retention_ratio')] == 1.0
        assert std[SUMMARY_COLUMNS.index('test_devsafety_acc')] == pytest.approx(0.1)

    def test_written_summary_reads_back(self, tmp_path):
        rows = [seed_row(seed=4, acc=1 / 3, ce=-0.25, delta=0.1), seed_row(seed=9, acc=-1e-3)]
        write_summary(tmp_path / 'summary.csv', rows)
        headers, table = read_csv(tmp_path / 'summary.csv')
        assert read_seed_rows(headers, table) == rows

    def test_bad_summary(self):
        with pytest.raises(ParseError):
            read_seed_rows(['method'], [])
        row = ['penalty', '1', '3', '0', '0', 'high', '0', '0', '']
        with pytest.raises(ParseError) as info:
            read_seed_rows(SUMMARY_COLUMNS, [row])
        assert info.value.line == 2


class TestDevelop:

    def test_zero_iterations_keep_the_base_model(self, tmp_path):
        experiment = load(tmp_path)
        paths = devsafe.output_paths(experiment.output_dir)
        results = devsafe.cmd_develop(experiment, paths)
        assert [r.seed for r in results] == [0, 1]
        for result in results:
            assert result.trajectory == [] and result.selected_step == 0
            assert result.test_devsafety_acc == 0.0
            assert result.test_devsafety_ce == 0.0
            assert result.test_delta_acc == 0.0
        assert summarize(devsafe.seed_rows(results))[0].retention_ratio == 1.0
        for name in ('w_old', 'summary_csv', 'summary_xlsx'):
            assert paths[name].exists()
        assert (paths['runs'] / 'round1-penalty-seed0.params.json').exists()

    def test_worker_count_does_not_change_results(self, tmp_path):
        experiment = load(tmp_path, ['solver.iterations=4'])
        scenario = devsafe.load_experiment_scenario(experiment)
        w_old = devsafe.base_model(experiment, scenario)
        serial = run_seeds(experiment, scenario, w_old, [3], [0, 1], max_workers=1)
        parallel = run_seeds(experiment, scenario, w_old, [3], [0, 1], max_workers=2)
        for a, b in zip(serial, parallel):
            assert a.seed == b.seed
            assert [r.step for r in a.trajectory] == [0, 2, 4]
            np.testing.assert_array_equal(a.selected.flat, b.selected.flat)
            assert a.test_devsafety_acc == b.test_devsafety_acc

    def test_trajectory_file_columns(self, tmp_path):
        experiment = load(tmp_path, ['solver.iterations=2', 'seeds=[5]'])
        devsafe.cmd_develop(experiment, devsafe.output_paths(experiment.output_dir))
        headers, rows = read_csv(tmp_path / 'out' / 'runs' / 'round1-penalty-seed5.csv')
        assert headers[:6] == ['step', 'epoch', 'beta', 'eta', 'objective', 'penalty']
        assert 'h_0' in headers and 'weight_2' in headers and 'h_3' not in headers
        assert 'wall_ms' not in headers
        assert [row[0] for row in rows] == ['0', '2']

    def test_rounds_chain_selected_models(self, tmp_path):
        experiment = load(tmp_path, ['solver.iterations=2', 'model.heads=true'])
        scenario = devsafe.load_experiment_scenario(experiment)
        w_old = devsafe.base_model(experiment, scenario)
        first, second = develop_rounds(experiment, scenario, w_old, [3, 3], seed=0)
        assert (first.round, second.round) == (1, 2)
        assert first.selected.shape.heads_enabled
        # the second round starts from the first round's model, heads included
        assert second.selected.layout.dim == first.selected.layout.dim

    def test_later_rounds_retain_earlier_targets(self, tmp_path):
        experiment = load(tmp_path, ['solver.iterations=2'],
                          scenario={'generate': small_spec(target_classes=[2, 3]).to_dict()})
        scenario = devsafe.load_experiment_scenario(experiment)
        assert round_tasks(scenario, 2) == [0, 1]
        assert round_tasks(scenario, 3, [2]) == [0, 1, 2]
        assert round_tasks(scenario, 2, [2]) == [0, 1]

        w_old = devsafe.base_model(experiment, scenario)
        first, second = develop_rounds(experiment, scenario, w_old, [2, 3], seed=0)
        assert first.tasks == [0, 1]
        assert second.tasks == [0, 1, 2]
        assert all(len(r.h) == 3 for r in second.trajectory)

    def test_heads_start_at_zero(self, tmp_path):
        experiment = load(tmp_path, ['model.heads=true'])
        scenario = devsafe.load_experiment_scenario(experiment)
        w_old = devsafe.base_model(experiment, scenario)
        result = develop_rounds(experiment, scenario, w_old, [3], seed=0)[0]
        expected = attach_heads(w_old, 2, RandomStreams(0)['init'])
        np.testing.assert_array_equal(result.selected.flat, expected.flat)
        assert result.test_devsafety_acc == 0.0

    def test_baseline_methods_run(self, tmp_path):
        for method in ('rm', 'wccl', 'finetune'):
            experiment = load(tmp_path, ['solver.iterations=2', f"method={method}", 'seeds=[0]'])
            result = devsafe.cmd_develop(experiment, devsafe.output_paths(experiment.output_dir))[0]
            assert result.method == method
            assert (tmp_path / 'out' / 'runs' / f"round1-{method}-seed0.csv").exists()

    def test_unknown_target(self, scenario):
        with pytest.raises(ConfigError) as info:
            check_targets(scenario, [3, 0])
        assert info.value.field == 'rounds'

    def test_base_model_is_reused(self, tmp_path):
        experiment = load(tmp_path)
        scenario = devsafe.load_experiment_scenario(experiment)
        path = tmp_path / 'w_old.json'
        trained = devsafe.base_model(experiment, scenario, path)
        config.load_config(write_document(tmp_path, experiment_document(tmp_path / 'out', base={'iterations': 0})))
        reloaded = devsafe.base_model(config.get_experiment(), scenario, path)
        np.testing.assert_array_equal(reloaded.flat, trained.flat)


class TestCommandLine:

    def test_arguments(self):
        args = devsafe.parse_arguments(['develop', '--seeds', '0,1', '--override', 'solver.beta=5',
                                        '--override', 'method=rm', '--resume'])
        assert args.verb == 'develop'
        assert args.override == ['solver.beta=5', 'method=rm']
        assert args.resume
        assert args.config == str(config.DEFAULT_CONFIG_PATH)

    def test_unknown_verb(self):
        with pytest.raises(SystemExit):
            devsafe.parse_arguments(['deploy'])

    def test_eigenvalue_gain_cell_messages(self, shape, flat_shape, params, constraint_specs):
        flat = init_params(flat_shape, np.random.default_rng(0))
        assert devsafe.eigenvalue_gain_cell(flat, constraint_specs) == 'n/a (no heads)'
        assert devsafe.eigenvalue_gain_cell(params, constraint_specs) == 'n/a (heads nonzero)'
        zero_heads = init_params(shape, np.random.default_rng(6))
        assert devsafe.eigenvalue_gain_cell(zero_heads, constraint_specs).endswith(': yes')

    def test_develop_then_report_and_kkt(self, tmp_path, capsys):
        path = write_document(tmp_path, experiment_document(tmp_path / 'ignored'))
        out = tmp_path / 'cli'
        devsafe.main(['develop', '--config', path, '--out', str(out), '--seeds', '2', '--log-level', 'WARNING'])
        assert (out / 'runs' / 'round1-penalty-seed2.params.json').exists()
        capsys.readouterr()

        devsafe.main(['report', '--config', path, '--out', str(out), '--seeds', '2'])
        report = capsys.readouterr().out
        assert 'Retention ratio' in report and 'penalty' in report

        devsafe.main(['kkt', '--config', path, '--out', str(out), '--seeds', '2'])
        assert 'Stationarity' in capsys.readouterr().out

    def test_generate_writes_scenario(self, tmp_path, capsys):
        path = write_document(tmp_path, experiment_document(tmp_path / 'gen'))
        devsafe.main(['generate', '--config', path])
        assert (tmp_path / 'gen' / 'scenario' / 'manifest.json').exists()
        assert 'protected' in capsys.readouterr().out

    def test_generate_needs_a_spec(self, tmp_path):
        document = experiment_document(tmp_path / 'out', scenario={'path': str(tmp_path / 'scenario')})
        with pytest.raises(SystemExit) as info:
            devsafe.main(['generate', '--config', write_document(tmp_path, document)])
        assert info.value.code == devsafe.EXIT_ERROR

    def test_missing_config_exits_with_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            devsafe.main(['develop', '--config', str(tmp_path / 'absent.json')])
        assert info.value.code == devsafe.EXIT_ERROR

    def test_invalid_config_exits_with_error(self, tmp_path):
        path = write_document(tmp_path, experiment_document(tmp_path / 'out', method='sgd'))
        with pytest.raises(SystemExit) as info:
            devsafe.main(['develop', '--config', path])
        assert info.value.code == devsafe.EXIT_ERROR

    def test_divergence_has_its_own_exit_code(self, tmp_path, monkeypatch):
        def diverge(args, experiment):
            raise DivergenceError("penalty objective inf at step 3", 'run.ckpt.json')

        monkeypatch.setattr(devsafe, 'dispatch', diverge)
        path = write_document(tmp_path, experiment_document(tmp_path / 'out'))
        with pytest.raises(SystemExit) as info:
            devsafe.main(['develop', '--config', path])
        assert info.value.code == devsafe.EXIT_DIVERGED


class TestStudy:

    def test_arms(self, tmp_path):
        experiment = load(tmp_path)
        names = [name for name, _ in study.study_arms(experiment)]
        assert names == ['penalty-n100', 'penalty-n4000', 'rm-a0.1', 'rm-a1', 'rm-a10', 'wccl-a0.5',
                         'wccl-a0.9', 'wccl-a0.99', 'penalty-heads-on', 'penalty-beta-cosine']

    def test_arm_settings(self, tmp_path):
        experiment = load(tmp_path, ['study.ablations=false', 'study.sample_counts=[7]'])
        arms = dict(study.study_arms(experiment))
        assert len(arms) == 7
        assert arms['penalty-n7'].constraint_samples == 7
        assert arms['rm-a10'].baseline.alpha == 10
        assert arms['wccl-a0.9'].method == 'wccl'

    def test_cosine_arm(self, tmp_path):
        arms = dict(study.study_arms(load(tmp_path)))
        solver = arms['penalty-beta-cosine'].solver
        assert solver.beta_schedule == 'cosine'
        assert (solver.beta_min, solver.beta_max) == (0.0, 10)


def selected_record(result) -> TrajectoryRecord:
    return next(record for record in result.trajectory if record.step == result.selected_step)


@pytest.mark.slow
class TestDeskScale:

    def test_default_configuration(self, tmp_path):
        config.load_config(overrides=[f"output.dir={tmp_path}", 'seeds=[0]'])
        experiment = config.get_experiment()
        results = devsafe.cmd_develop(experiment, devsafe.output_paths(experiment.output_dir))
        assert len(results) == 1
        assert results[0].trajectory[-1].step == experiment.solver.iterations

    def test_retention_experiment(self, tmp_path):
        config.load_config(overrides=[f"output.dir={tmp_path}", 'scenario.generate.train_per_class=4000'])
        experiment = config.get_experiment()
        scenario = devsafe.load_experiment_scenario(experiment)
        w_old_path = tmp_path / 'w_old.json'
        devsafe.base_model(experiment, scenario, w_old_path)
        arms = [(name, arm) for name, arm in study.study_arms(experiment) if name.startswith(('penalty-n', 'rm-'))]
        results = {name: study.run_arm(name, arm, tmp_path, w_old_path) for name, arm in arms}
        few, many = results['penalty-n100'], results['penalty-n4000']
        assert len(few) == len(many) == 5

        for result in few + many:
            assert selected_record(result).metrics['train_devsafety_ce'] >= -experiment.selection_tol
        few_summary = summarize(devsafe.seed_rows(few))[0]
        assert summarize(devsafe.seed_rows(many))[0].retention_ratio >= few_summary.retention_ratio
        assert few_summary.delta_acc_mean > 0

        rm_cells = [r for name in ('rm-a0.1', 'rm-a1', 'rm-a10') for r in results[name]]
        rm_negative = sum(r.test_devsafety_acc < 0 for r in rm_cells)
        penalty_negative = sum(r.test_devsafety_acc < 0 for r in few)
        assert rm_negative >= 1
        assert penalty_negative < rm_negative

    def test_effective_weights_decay(self, tmp_path):
        experiment = load(tmp_path, ['solver.iterations=400', 'solver.eta=0.05', 'solver.beta=100',
                                     'solver.gamma1=1', 'solver.gamma2=1', 'solver.theta=1',
                                     'solver.task_batch=null', 'solver.log_every=5', 'seeds=[0]'])
        scenario = devsafe.load_experiment_scenario(experiment)
        w_old = devsafe.base_model(experiment, scenario)
        result = develop_rounds(experiment, scenario, w_old, [3], seed=0)[0]
        weights = np.array([record.effective_weights for record in result.trajectory])
        peaks = weights.max(axis=0)
        assert peaks.max() > 0
        # slack at the end, with a margin over the O(1/β) infeasibility of active ones
        satisfied = (np.array(result.trajectory[-1].h) < -1e-3) & (peaks > 0)
        assert satisfied.any()
        assert np.all(weights[-1][satisfied] <= 0.01 * peaks[satisfied])

    def test_multiround_configuration(self, tmp_path):
        config.load_config(config.DEFAULT_CONFIG_PATH.parent / 'multiround.json',
                           [f"output.dir={tmp_path}", 'seeds=[0,1]'])
        experiment = config.get_experiment()
        results = devsafe.cmd_develop(experiment, devsafe.output_paths(experiment.output_dir), multiround=True)
        assert [(r.round, r.target) for r in results] == [(1, 4), (1, 4), (2, 5), (2, 5)]
        for result in results:
            assert selected_record(result).metrics['train_devsafety_ce'] >= -experiment.selection_tol
            if result.round == 2:
                assert result.tasks == [0, 1, 2, 3, 4]
