import collections
import json
import numpy as np
import os
import pandas as pd
import pytest

import kdnnp.common.config as C
import kdnnp.common.utils as utils
import kdnnp.driver
import kdnnp.potentials.nnp as nnp
from kdnnp.data.dataset import Dataset, EmptyDataset, Provenance
from kdnnp.data.system import build_lattice
from kdnnp.potentials.oracle import OracleSpec, relax_reference

from conftest import CONFIG_PATH, INT_CONFIG_PATH, tiny_model

DISTILL_ARTIFACTS = [
    'config.yaml', 'teacher_data.xyz', 'teacher_data_failures.csv',
    'teacher.kdnnp', 'teacher_history.csv', 'soft_targets.xyz',
    'soft_targets_failures.csv', 'soft_train.xyz', 'soft_valid.xyz',
    'student_soft.kdnnp', 'student_soft_history.csv', 'selection.csv',
    'selection_map.csv', 'hard_targets.xyz', 'hard_train.xyz',
    'hard_valid.xyz', 'student_finetuned.kdnnp', 'valid_truth.xyz',
    'production_T80.xyz', 'thermo_T80.csv', 'msd_T80.csv', 'diffusion.csv',
    'energy_hist_valid.csv', 'energy_hist_valid_summary.csv', 'mae.csv',
    'report.txt', 'stage_times.csv', 'manifest.json']

ANALYZE_OUTPUTS = ['energy_hist_valid.csv', 'energy_hist_valid_summary.csv',
                   'msd_T80.csv', 'diffusion.csv']


class NaNPotential(object):
    def energy_forces(self, system):
        return np.nan, np.zeros_like(system.positions)


@pytest.fixture(scope="module")
def distilled(module_workspace):
    """One end-to-end distillation on the integration config."""
    driver = kdnnp.driver.Driver(INT_CONFIG_PATH,
                                 os.path.join(module_workspace, "run"))
    driver.distill()
    return driver


def read_manifest(out_dir):
    with open(os.path.join(out_dir, 'manifest.json')) as fh:
        return json.load(fh)


def test_distill_artifacts(distilled):
    for name in DISTILL_ARTIFACTS:
        assert os.path.exists(distilled.path(name)), name


def test_distill_report(distilled):
    report = distilled.report
    assert report['run.seed'] == 7
    assert report['teacher.n_params'] > report['student.n_params']
    assert report['teacher_data.n_frames'] > 0
    assert report['soft_targets.n_frames'] == len(
        distilled.load_dataset('soft_targets'))
    assert report['selection.n_selected'] == 8
    assert report['selection.min_pairwise_distance'] > 0
    assert report['hard_targets.n_frames'] == 8
    for name in ('teacher', 'student_soft', 'student_finetuned'):
        assert report['{}.e_mae_vs_oracle'.format(name)] >= 0
        assert report['{}.f_mae_vs_oracle'.format(name)] >= 0
    assert 'student_soft.e_mae_vs_teacher' in report
    assert 'teacher.e_mae_vs_teacher_truth' in report
    assert 'production.T80.diffusion_cm2_s' in report
    assert report['production.T80.mean_temperature'] > 0

    truth = distilled.load_dataset('valid_truth')
    n_valid = sum(report['energy_hist_valid.{}.n'.format(
        kdnnp.driver.temperature_tag(t))] for t in truth.temperatures)
    assert n_valid == len(truth)


@pytest.mark.parametrize("name,provenance", [
    ('teacher_data', Provenance.TeacherTruth),
    ('soft_targets', Provenance.SoftTeacher),
    ('soft_train', Provenance.SoftTeacher),
    ('soft_valid', Provenance.SoftTeacher),
    ('hard_targets', Provenance.HardOracle),
    ('valid_truth', Provenance.HardOracle)])
def test_provenance_audit(distilled, name, provenance):
    dataset = distilled.load_dataset(name)
    assert len(dataset) > 0
    assert all(frame.provenance is provenance for frame in dataset)


def test_hard_targets_are_relabeled_soft_frames(distilled):
    selected = distilled.load_selection()
    assert len(set(selected)) == len(selected) == 8
    soft_train = distilled.load_dataset('soft_train')
    hard = distilled.load_dataset('hard_targets')
    truth = distilled.ground_truth
    for index, frame in zip(selected, hard):
        source = soft_train[index:index + 1].frames[0]
        assert np.array_equal(frame.system.positions,
                              source.system.positions)
        energy, forces = truth.energy_forces(frame.system)
        assert frame.energy == pytest.approx(energy, rel=1e-12, abs=1e-12)
        assert np.allclose(frame.forces, forces, rtol=1e-12, atol=1e-12)


def test_finetuning_keeps_the_descriptor(distilled):
    soft = distilled.load_model('student_soft')
    finetuned = distilled.load_model('student_finetuned')
    descriptor = soft.segment('descriptor')
    assert np.array_equal(soft.weights[descriptor],
                          finetuned.weights[descriptor])


def test_manifest(distilled):
    manifest = read_manifest(distilled.out_dir)
    assert manifest['seed'] == 7
    assert manifest['config_sha256'] == distilled.config.digest()
    listed = {item['path']: item['sha256'] for item in manifest['artifacts']}
    assert 'manifest.json' not in listed
    assert listed['stage_times.csv'] is None
    for name in DISTILL_ARTIFACTS[:-2]:
        assert listed[name] is not None, name


def test_distill_is_deterministic(distilled, workspace):
    other = kdnnp.driver.Driver(INT_CONFIG_PATH, workspace)
    other.distill()
    assert read_manifest(workspace) == read_manifest(distilled.out_dir)


def test_report_round_trip(distilled):
    path = distilled.path('report.txt')
    with open(path) as fh:
        text = fh.read()
    assert kdnnp.driver.RunReport.load(path).to_text() == text


def test_analyze_is_reproducible(distilled):
    before = {name: utils.file_sha256(distilled.path(name))
              for name in ANALYZE_OUTPUTS}
    summary = distilled.analyze()
    assert 'production.T80.diffusion_cm2_s' in summary
    for name in ANALYZE_OUTPUTS:
        assert utils.file_sha256(distilled.path(name)) == before[name], name


def test_stage_runs_on_its_own(distilled):
    fresh = kdnnp.driver.Driver(INT_CONFIG_PATH, distilled.out_dir)
    assert fresh.screen() == distilled.load_selection()


def test_missing_artifact(workspace):
    driver = kdnnp.driver.Driver(INT_CONFIG_PATH, workspace)
    with pytest.raises(kdnnp.driver.StageError) as exc:
        driver.train_student()
    assert exc.value.stage == 'train_student'
    assert isinstance(exc.value.cause, kdnnp.driver.MissingArtifact)
    assert os.path.exists(os.path.join(workspace, 'stage_times.csv'))


def test_scratch_baselines(distilled):
    _, report = distilled.scratch_baseline(1)
    assert report['scratch_x1.n_hard_targets'] == 8
    assert 'scratch_x1.e_mae_vs_oracle' in report
    assert not os.path.exists(distilled.path('hard_targets_scratch_x1.xyz'))

    _, report = distilled.scratch_baseline(2)
    assert report['scratch_x2.n_hard_targets'] == 16
    assert os.path.exists(distilled.path('scratch_x2.kdnnp'))
    # Greedy selection extends the budget-K picks.
    assert distilled.load_selection('selection_scratch_x2')[:8] == \
        distilled.load_selection()


def test_baseline_finetuned_teacher_kd(distilled):
    _, report = distilled.baseline_finetuned_teacher_kd()
    for name in ('hard_targets_random.xyz', 'teacher_finetuned.kdnnp',
                 'soft_targets_finetuned.xyz', 'soft_finetuned_train.xyz',
                 'student_baseline_kd.kdnnp', 'soft_truth_pretrained.xyz',
                 'soft_truth_finetuned.xyz', 'energy_hist_soft.csv'):
        assert os.path.exists(distilled.path(name)), name
    assert report['hard_targets_random.n_frames'] == 8
    for name in ('teacher_finetuned', 'student_baseline_kd'):
        assert '{}.e_mae_vs_oracle'.format(name) in report
    for group in ('pretrained', 'finetuned'):
        for key in ('n', 'mean', 'std', 'sem', 'p95'):
            assert 'energy_hist_soft.{}.{}'.format(group, key) in report

    hist = pd.read_csv(distilled.path('energy_hist_soft.csv'))
    edges = [group.bin_left.tolist() for _, group in hist.groupby('group')]
    assert edges[0] == edges[1]

    lowest = [frame.temperature_tag for frame in
              distilled.load_dataset('soft_truth_finetuned')]
    assert set(lowest) == {80.0}


def test_driver_timing_report(distilled):
    summary = distilled.timing_report()
    assert summary['model'].tolist() == ['teacher', 'student']
    assert summary['speedup_vs_teacher'].iloc[0] == 1.0
    assert len(pd.read_csv(distilled.path('timing.csv'))) == 4
    listed = {item['path']: item['sha256']
              for item in read_manifest(distilled.out_dir)['artifacts']}
    assert listed['timing.csv'] is None
    assert listed['timing_summary.csv'] is None


def test_run_report(workspace):
    report = kdnnp.driver.RunReport()
    report['b.value'] = 0.1 + 0.2
    report['a.count'] = np.int64(3)
    report['c.path'] = 'selection.csv'
    assert report.to_text() == ("a.count = 3\nb.value = 0.30000000000000004\n"
                                "c.path = selection.csv\n")
    loaded = kdnnp.driver.RunReport.load(
        report.save(os.path.join(workspace, 'report.txt')))
    assert loaded.values == collections.OrderedDict(
        sorted(report.values.items()))
    assert isinstance(loaded['a.count'], int)
    assert loaded['b.value'] == 0.1 + 0.2


@pytest.mark.parametrize("temperature,tag", [(80.0, 'T80'), (100, 'T100'),
                                             (112.5, 'T112.5')])
def test_temperature_tag(temperature, tag):
    assert kdnnp.driver.temperature_tag(temperature) == tag


def test_timing_report(integration_config):
    models = collections.OrderedDict([
        ('teacher', tiny_model(fitting_layers=(16, 16))),
        ('student', tiny_model())])
    trials_df, summary_df = kdnnp.driver.timing_report(
        models, [32], integration_config, n_steps=3, trials=2)
    assert list(trials_df.columns) == ['model', 'n_atoms', 'n_params',
                                       'trial', 'seconds_per_step']
    assert len(trials_df) == 4
    assert (trials_df.seconds_per_step > 0).all()
    assert list(summary_df.columns) == ['model', 'n_atoms', 'n_params',
                                        'mean_seconds_per_step',
                                        'speedup_vs_teacher']
    assert summary_df.n_params.tolist() == [models['teacher'].n_params,
                                            models['student'].n_params]


def test_sample_md_plan(integration_config, argon):
    systems = [build_lattice(['Ar'], 32, 1.40)]
    dataset, failures = kdnnp.driver.sample_md_plan(
        systems, argon, integration_config, 'soft_targets', 0,
        Provenance.HardOracle)
    assert isinstance(dataset, Dataset)
    assert len(dataset) == 20
    assert len(failures) == 0
    assert [frame.temperature_tag for frame in dataset] == \
        [80.0] * 10 + [100.0] * 10
    assert all(frame.provenance is Provenance.HardOracle
               for frame in dataset)


def test_sample_md_plan_records_failures(integration_config):
    systems = [build_lattice(['Ar'], 32, 1.40)]
    dataset, failures = kdnnp.driver.sample_md_plan(
        systems, NaNPotential(), integration_config, 'soft_targets', 0,
        Provenance.SoftTeacher)
    assert len(dataset) == 0
    assert list(failures.columns) == ['system', 'temperature', 'step',
                                      'n_samples', 'message']
    assert failures.temperature.tolist() == [80.0, 100.0]
    assert failures.step.tolist() == [0, 0]
    assert failures.n_samples.tolist() == [0, 0]


@pytest.mark.parametrize("mode", ['fps', 'random'])
def test_empty_scratch_budget(workspace, mode):
    with open(INT_CONFIG_PATH) as fh:
        text = fh.read().replace(
            '[screening]\n', '[screening]\nmode = "{}"\n'.format(mode))
    config = C.parse_string(text)
    assert config['screening/mode'] == mode
    driver = kdnnp.driver.Driver(config, workspace)
    with pytest.raises(kdnnp.driver.StageError) as exc:
        driver.scratch_baseline(0)
    assert exc.value.stage == 'scratch_baseline'
    assert isinstance(exc.value.cause, EmptyDataset)


def test_sample_md_plan_with_progress(integration_config, argon):
    systems = [build_lattice(['Ar'], 32, 1.40)]
    quiet, _ = kdnnp.driver.sample_md_plan(
        systems, argon, integration_config, 'soft_targets', 0,
        Provenance.HardOracle)
    shown, _ = kdnnp.driver.sample_md_plan(
        systems, argon, integration_config, 'soft_targets', 0,
        Provenance.HardOracle, progress=True)
    assert len(shown) == len(quiet) == 20
    for a, b in zip(quiet, shown):
        assert np.array_equal(a.system.positions, b.system.positions)
        assert np.array_equal(a.forces, b.forces)


def test_progress_leaves_labels_unchanged(distilled):
    verbose = kdnnp.driver.Driver(INT_CONFIG_PATH, distilled.out_dir,
                                  progress=True)
    relabeled = verbose.label_hard_targets(name='hard_targets_verbose')
    hard = distilled.load_dataset('hard_targets')
    assert len(relabeled) == len(hard)
    for a, b in zip(hard, relabeled):
        assert a.energy == b.energy
        assert np.array_equal(a.forces, b.forces)


def test_softening_floor_is_the_relaxed_lattice(workspace):
    driver = kdnnp.driver.Driver(INT_CONFIG_PATH, workspace)
    lattice = driver.initial_systems()[0]
    softening = driver.teacher_truth.softening
    _, per_atom = relax_reference(
        lattice, OracleSpec.from_config(
            driver.config,
            dispersion_scale=driver.config['teacher_truth/dispersion_scale']),
        perturbation=driver.config['teacher_truth/relax_perturbation'],
        seed=driver.seed)
    assert softening.reference_energy == per_atom
    assert driver.report['teacher_truth.reference_energy'] == per_atom
    # A relaxed cell sits far below N isolated dimers.
    epsilon = driver.config['oracle/epsilon'][0]
    assert len(lattice) * per_atom < -0.5 * len(lattice) * epsilon


def squeezed_pair(system, distance):
    """`system` with atom 0 moved along its nearest bond to `distance`."""
    bonds = system.positions - system.positions[0]
    bonds -= system.cell * np.round(bonds / system.cell)
    lengths = np.linalg.norm(bonds, axis=1)
    lengths[0] = np.inf
    nearest = np.argmin(lengths)
    positions = system.positions.copy()
    positions[0] += bonds[nearest] * (1.0 - distance / lengths[nearest])
    return system.replace(positions=positions)


def test_teacher_truth_underestimates_high_energies(workspace):
    driver = kdnnp.driver.Driver(INT_CONFIG_PATH, workspace)
    lattice = driver.initial_systems()[0]
    frame = squeezed_pair(lattice, 2.4)

    def excitation(potential):
        return (potential.energy_forces(frame)[0] -
                potential.energy_forces(lattice)[0])

    teacher, truth = excitation(driver.teacher_truth), \
        excitation(driver.ground_truth)
    assert 0 < teacher < truth


def test_master_teacher_is_four_times_the_student(workspace):
    driver = kdnnp.driver.Driver(CONFIG_PATH, workspace)
    dspec = driver.descriptor_spec()
    n_params = {}
    for section in ('teacher_model', 'student_model'):
        spec = nnp.NetworkSpec.from_config(driver.config, section)
        n_params[section] = nnp.layer_plan(dspec, spec)[-1].b_slice.stop
    assert n_params['teacher_model'] >= 4 * n_params['student_model']
