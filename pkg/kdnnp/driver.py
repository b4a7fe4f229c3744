"""Top-level routines, including:

* pretrain_teacher
* generate_soft_targets
* train_student
* screen
* label_hard_targets
* finetune_student
* evaluate
* production_md
* distill
* baseline_finetuned_teacher_kd
* scratch_baseline
* timing_report
* analyze

Every stage writes its artifacts into the run directory before the next
one starts; a stage run on its own loads its inputs from there.
"""

import collections
import contextlib
import json
import logging
import os

import numpy as np
import pandas as pd

from joblib import Parallel, delayed

import kdnnp.common.config as C
import kdnnp.common.utils as utils
import kdnnp.md.analyze as analyze_md
import kdnnp.potentials.nnp as nnp
import kdnnp.select.screening as screening
import kdnnp.train.trainer as trainer
from kdnnp.data.dataset import (Dataset, EmptyDataset, Provenance,
                                load_systems, split_dataset)
from kdnnp.data.system import build_lattice, scale_to_density
from kdnnp.md.dynamics import MDConfig, NonFiniteState, Trajectory, run_md
from kdnnp.potentials.oracle import (OracleSpec, Softening, label_frames,
                                     relax_reference)
from kdnnp.version import version

logger = logging.getLogger(__name__)

# Offsets added to run.seed.
STUDENT_SEED = 1
SCRATCH_SEED = 2
FINETUNE_SEED = 3
TEACHER_FINETUNE_SEED = 4

# Wall-clock artifacts; listed in the manifest without a digest.
TIMING_FILES = ('stage_times.csv', 'timing.csv', 'timing_summary.csv')


class StageError(Exception):
    """An exception escaping a pipeline stage, tagged with the stage."""
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super(StageError, self).__init__("[{}] {}: {}".format(
            stage, type(cause).__name__, cause))


class MissingArtifact(Exception):
    pass


def temperature_tag(temperature):
    return "T{:g}".format(temperature)


class RunReport(object):
    """Flat `key = value` summary of a run.

    Keys are fixed dotted names; numbers are written so they read back
    exactly.
    """
    def __init__(self, values=None):
        self.values = collections.OrderedDict(values or {})

    def __len__(self):
        return len(self.values)

    def __contains__(self, key):
        return key in self.values

    def __getitem__(self, key):
        return self.values[key]

    def __setitem__(self, key, value):
        if isinstance(value, (np.floating, float)):
            value = float(value)
        elif isinstance(value, (np.integer, int)) and \
                not isinstance(value, bool):
            value = int(value)
        self.values[key] = value

    def update(self, values):
        for key, value in values.items():
            self[key] = value

    def to_text(self):
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            text = repr(value) if isinstance(value, float) else str(value)
            lines.append("{} = {}".format(key, text))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, 'w') as fh:
            fh.write(self.to_text())
        return path

    @classmethod
    def load(cls, path):
        report = cls()
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                key, _, text = line.partition(' = ')
                text = text.strip()
                for convert in (int, float):
                    try:
                        value = convert(text)
                        break
                    except ValueError:
                        continue
                else:
                    value = text
                report[key.strip()] = value
        return report


def _md_task(system, potential, md_config):
    """One MD run; a failure returns the partial trajectory."""
    try:
        return run_md(system, potential, md_config), None
    except NonFiniteState as err:
        trajectory = getattr(err, 'trajectory', None) or Trajectory(
            md_config)
        return trajectory, dict(step=err.step, message=str(err))


def sample_md_plan(systems, potential, config, section, seed, provenance,
                   n_jobs=1, temperatures=None, progress=False):
    """Run every (system, temperature) of an MD plan and label the samples
    with the driving potential.

    Run r (systems outer, temperatures inner) is seeded with seed + r.
    A run that hits a NonFiniteState keeps the samples taken before it.
    `progress` draws a bar over finished runs.

    Returns
    -------
    dataset : Dataset
        Frames concatenated in run order.

    failures : pd.DataFrame
        One row per failed run: system, temperature, step, n_samples,
        message.
    """
    if temperatures is None:
        temperatures = config[section + '/temperatures']
    tasks = [(index, float(temperature))
             for index in range(len(systems))
             for temperature in temperatures]
    md_configs = [MDConfig.from_plan(config, section, temperature, seed + r)
                  for r, (_, temperature) in enumerate(tasks)]
    logger.info("Sampling {} MD runs of {} steps for '{}'".format(
        len(tasks), md_configs[0].n_steps if md_configs else 0, section))

    results = Parallel(n_jobs=n_jobs, return_as='generator')(
        delayed(_md_task)(systems[index], potential, md_config)
        for (index, _), md_config in zip(tasks, md_configs))
    results = list(utils.track(results, len(tasks), progress))

    frames, failures = [], []
    for (index, temperature), (trajectory, failure) in zip(tasks, results):
        frames.extend(trajectory.to_labeled(provenance))
        if failure is not None:
            logger.warning(utils.colored(
                "MD of system {} at {} K failed at step {}; keeping {} "
                "samples".format(index, temperature, failure['step'],
                                 len(trajectory)), 'red'))
            failures.append(dict(system=index, temperature=temperature,
                                 step=failure['step'],
                                 n_samples=len(trajectory),
                                 message=failure['message']))
    failures = pd.DataFrame.from_records(
        failures, columns=['system', 'temperature', 'step', 'n_samples',
                           'message'])
    return Dataset(frames), failures


def _timed_md(system, potential, md_config):
    timer = utils.TimerHolder()
    timer.start('md')
    run_md(system, potential, md_config)
    return timer.end('md')


def timing_report(models, sizes, config, n_steps=1000, trials=5,
                  timestep=0.5, temperature=100.0, seed=0):
    """Seconds per MD step of each model at each system size.

    Parameters
    ----------
    models : OrderedDict name -> PotentialModel

    sizes : list of int
        Atom counts of the generated lattices.

    config : Config
        Supplies the composition, lattice and density.

    Returns
    -------
    trials_df : pd.DataFrame
        model, n_atoms, n_params, trial, seconds_per_step.

    summary_df : pd.DataFrame
        model, n_atoms, n_params, mean_seconds_per_step, and per size the
        ratio to the first model (`speedup_vs_<first>`).
    """
    records = []
    for n_atoms in sizes:
        system = build_lattice(config['system/species'], n_atoms,
                               config['system/density'],
                               lattice=config['system/lattice'],
                               masses=config['system/masses'])
        # Same workload for every model and trial.
        md_config = MDConfig(timestep, n_steps, temperature,
                             sample_interval=n_steps, seed=seed)
        for name, model in models.items():
            for trial in range(trials):
                seconds = _timed_md(system, model, md_config)
                records.append(dict(model=name, n_atoms=n_atoms,
                                    n_params=model.n_params, trial=trial,
                                    seconds_per_step=seconds / n_steps))
                logger.info("[step] timing {} N={} trial {}: {:.3e} s/step"
                            .format(name, n_atoms, trial,
                                    seconds / n_steps))
    trials_df = pd.DataFrame.from_records(
        records, columns=['model', 'n_atoms', 'n_params', 'trial',
                          'seconds_per_step'])

    summary = trials_df.groupby(['model', 'n_atoms', 'n_params'],
                                sort=False)['seconds_per_step'].mean()
    summary_df = summary.reset_index().rename(
        columns={'seconds_per_step': 'mean_seconds_per_step'})
    reference = list(models)[0]
    ref_times = summary_df[summary_df['model'] == reference].set_index(
        'n_atoms')['mean_seconds_per_step']
    summary_df['speedup_vs_{}'.format(reference)] = [
        ref_times[n] / t for n, t in zip(summary_df['n_atoms'],
                                          summary_df['mean_seconds_per_step'])]
    return trials_df, summary_df


class Driver(object):
    "Controller class for a run directory and its pipeline stages."

    def __init__(self, config, out_dir, seed=None, n_jobs=1, progress=False):
        """
        Parameters
        ----------
        config : str OR kdnnp.common.config.Config
            Path to a TOML config, or a parsed config.

        out_dir : str
            Run directory; created if missing. Existing artifacts are
            reused by stages run on their own.

        seed : int or None
            Overrides run.seed.

        n_jobs : int
            joblib workers for MD runs, labeling and descriptors.

        progress : bool
            Progress bars for MD and labeling; outputs do not depend on it.
        """
        if isinstance(config, str):
            config = C.parse_config(config)
        if seed is not None:
            config = config.with_seed(seed)
        self.config = config
        self.seed = int(config['run/seed'])
        self.n_jobs = int(n_jobs)
        self.progress = bool(progress)
        self.out_dir = os.path.expanduser(out_dir)
        utils.create_directory(self.out_dir)

        self.timers = utils.TimerHolder()
        self.stage_times = self._load_stage_times()
        self.report = (RunReport.load(self.path('report.txt'))
                       if os.path.exists(self.path('report.txt'))
                       else RunReport())
        self.report['run.seed'] = self.seed
        self.mae_table = (pd.read_csv(self.path('mae.csv'))
                          if os.path.exists(self.path('mae.csv'))
                          else pd.DataFrame(columns=['model', 'reference',
                                                     'e_mae', 'f_mae']))
        self._teacher_truth = None
        self.config.save(self.path('config.yaml'))

    def path(self, name):
        return os.path.join(self.out_dir, name)

    @property
    def ground_truth(self):
        """Ground-truth oracle (dispersion on, no softening)."""
        return OracleSpec.from_config(self.config)

    @property
    def teacher_truth(self):
        """Dispersion-scaled oracle softened above the relaxed reference
        energy of the first initial system."""
        if self._teacher_truth is None:
            spec = OracleSpec.from_config(
                self.config,
                dispersion_scale=self.config['teacher_truth/dispersion_scale'])
            _, reference = relax_reference(
                self.initial_systems()[0], spec,
                perturbation=self.config['teacher_truth/relax_perturbation'],
                seed=self.seed)
            self._teacher_truth = spec.with_options(softening=Softening(
                self.config['teacher_truth/softening_threshold'],
                self.config['teacher_truth/softening_factor'],
                reference))
            self.report['teacher_truth.reference_energy'] = reference
        return self._teacher_truth

    @property
    def temperatures(self):
        return [float(t) for t in self.config['soft_targets/temperatures']]

    @property
    def production_temperatures(self):
        return ([float(t) for t in self.config['production/temperatures']]
                or [min(self.temperatures)])

    def initial_systems(self):
        """Base structures times the density scales."""
        masses = self.config['system/masses']
        if self.config['system/initial']:
            bases = []
            for path in self.config['system/initial']:
                bases.extend(load_systems(os.path.expanduser(path), masses))
        else:
            bases = [build_lattice(self.config['system/species'],
                                   self.config['system/n_atoms'],
                                   self.config['system/density'],
                                   lattice=self.config['system/lattice'],
                                   masses=masses)]
        return [scale_to_density(base, base.density * scale)
                for base in bases
                for scale in self.config['system/density_scales']]

    def descriptor_spec(self):
        symbols = []
        for symbol in self.config['system/species']:
            if symbol not in symbols:
                symbols.append(symbol)
        return nnp.DescriptorSpec(symbols,
                                  cutoff=self.config['descriptor/cutoff'],
                                  n_radial=self.config['descriptor/n_radial'],
                                  r_min=self.config['descriptor/r_min'])

    def train_config(self, section, offset=0):
        return trainer.TrainConfig.from_config(self.config, section,
                                               self.seed + offset)

    # Bookkeeping
    def _load_stage_times(self):
        if os.path.exists(self.path('stage_times.csv')):
            df = pd.read_csv(self.path('stage_times.csv'))
            return [tuple(row) for row in df.itertuples(index=False)]
        return []

    @contextlib.contextmanager
    def stage(self, name):
        """Time a stage and tag anything escaping it with its name."""
        logger.info(utils.colored("[{}] start".format(name), 'cyan'))
        self.timers.start(name)
        try:
            yield
        except StageError:
            raise
        except Exception as err:
            logger.error(utils.colored("[{}] failed: {}".format(name, err),
                                       'red'))
            raise StageError(name, err) from err
        finally:
            seconds = self.timers.end(name)
            self.stage_times.append((name, seconds))
            pd.DataFrame.from_records(
                self.stage_times, columns=['stage', 'seconds']).to_csv(
                    self.path('stage_times.csv'), index=False)
            self.save_report()
        logger.info(utils.colored("[{}] done in {:.1f}s".format(
            name, seconds), 'cyan'))

    def save_report(self):
        self.report.save(self.path('report.txt'))
        self.mae_table.to_csv(self.path('mae.csv'), index=False,
                              float_format='%.17g')

    def register(self, name, path):
        self.report['artifact.' + name] = os.path.relpath(path, self.out_dir)
        return path

    def record_mae(self, model_name, reference, model, dataset):
        e_mae, f_mae = trainer.evaluate_mae(model, dataset, n_jobs=self.n_jobs)
        keep = ~((self.mae_table['model'] == model_name) &
                 (self.mae_table['reference'] == reference))
        row = pd.DataFrame([dict(model=model_name, reference=reference,
                                 e_mae=e_mae, f_mae=f_mae)])
        self.mae_table = pd.concat([self.mae_table[keep], row],
                                   ignore_index=True)
        self.report['{}.e_mae_vs_{}'.format(model_name, reference)] = e_mae
        self.report['{}.f_mae_vs_{}'.format(model_name, reference)] = f_mae
        logger.info("{} vs {}: e_mae {:.5f} eV/atom, f_mae {:.5f} eV/A"
                    .format(model_name, reference, e_mae, f_mae))
        return e_mae, f_mae

    def save_model(self, model, name, history=None):
        path = self.register(name, self.path(name + '.kdnnp'))
        model.save(path)
        if history is not None:
            history.to_csv(self.register(name + '_history',
                                         self.path(name + '_history.csv')))
        return path

    def load_model(self, name):
        path = self.path(name + '.kdnnp')
        if not os.path.exists(path):
            raise MissingArtifact("No {} checkpoint in {}; run the stage "
                                  "that produces it first".format(
                                      name, self.out_dir))
        return nnp.load_checkpoint(path)

    def save_dataset(self, dataset, name):
        path = self.register(name, self.path(name + '.xyz'))
        return dataset.save(path)

    def load_dataset(self, name):
        path = self.path(name + '.xyz')
        if not os.path.exists(path):
            raise MissingArtifact("No {} dataset in {}".format(
                name, self.out_dir))
        return Dataset.load(path)

    # Stages
    def pretrain_teacher(self):
        """Train the teacher on oracle-driven MD labeled by the teacher
        truth."""
        with self.stage('pretrain_teacher'):
            data, failures = sample_md_plan(
                self.initial_systems(), self.teacher_truth, self.config,
                'teacher_data', self.seed, Provenance.TeacherTruth,
                n_jobs=self.n_jobs, progress=self.progress)
            failures.to_csv(self.path('teacher_data_failures.csv'),
                            index=False)
            self.save_dataset(data, 'teacher_data')
            data.require_frames()
            train_set, valid_set = split_dataset(
                data, self.config['split/ratio'], self.seed)

            initial = nnp.init_model(
                self.descriptor_spec(),
                nnp.NetworkSpec.from_config(self.config, 'teacher_model'),
                self.seed, frames=train_set.frames)
            teacher, history = trainer.train(
                initial, train_set, valid_set,
                self.train_config('teacher_training'), n_jobs=self.n_jobs)
            self.save_model(teacher, 'teacher', history)
            self.report['teacher.n_params'] = teacher.n_params
            self.report['teacher_data.n_frames'] = len(data)
            self.record_mae('teacher', 'teacher_truth', teacher, valid_set)
        return teacher

    def teacher(self):
        """The saved teacher, pretraining it first if there is none."""
        try:
            return self.load_model('teacher')
        except MissingArtifact:
            return self.pretrain_teacher()

    def generate_soft_targets(self, teacher=None, name='soft_targets'):
        """Teacher-driven NVT MD over every initial system and soft-target
        temperature; samples are labeled by the teacher."""
        with self.stage('generate_soft_targets'):
            teacher = teacher or self.load_model('teacher')
            soft, failures = sample_md_plan(
                self.initial_systems(), teacher, self.config,
                'soft_targets', self.seed, Provenance.SoftTeacher,
                n_jobs=self.n_jobs, progress=self.progress)
            failures.to_csv(self.register(
                name + '_failures', self.path(name + '_failures.csv')),
                index=False)
            self.save_dataset(soft, name)
            self.report[name + '.n_frames'] = len(soft)
            self.report[name + '.n_failed_runs'] = len(failures)
            if len(soft) == 0:
                raise EmptyDataset("every soft-target MD run failed")
        return soft

    def split(self, dataset, name):
        """Seeded train / validation split, saved as <name>_train and
        <name>_valid."""
        train_set, valid_set = split_dataset(
            dataset, self.config['split/ratio'], self.seed)
        self.save_dataset(train_set, name + '_train')
        self.save_dataset(valid_set, name + '_valid')
        return train_set, valid_set

    def train_student(self, soft=None):
        """Split the soft targets and train a fresh student on them."""
        with self.stage('train_student'):
            soft = soft if soft is not None else \
                self.load_dataset('soft_targets')
            soft_train, soft_valid = self.split(soft, 'soft')
            initial = nnp.init_model(
                self.descriptor_spec(),
                nnp.NetworkSpec.from_config(self.config, 'student_model'),
                self.seed + STUDENT_SEED, frames=soft_train.frames)
            student, history = trainer.train(
                initial, soft_train, soft_valid,
                self.train_config('soft_training', STUDENT_SEED),
                n_jobs=self.n_jobs)
            self.save_model(student, 'student_soft', history)
            self.report['student.n_params'] = student.n_params
            self.record_mae('student_soft', 'teacher', student, soft_valid)
        return student

    def screening_points(self, student, soft_train):
        features = Parallel(n_jobs=self.n_jobs)(
            delayed(nnp.extract_features)(student, frame.system)
            for frame in soft_train)
        points = screening.reduce_2d(np.array(features))
        return screening.augment_energy(points, soft_train.energies_per_atom)

    def select(self, points, k):
        if self.config['screening/mode'] == 'fps':
            return screening.select_fps(points, k)
        return screening.select_random(len(points), k,
                                       self.config['screening/random_seed'])

    def screen(self, student=None, soft_train=None, k=None,
               name='selection'):
        """Pick hard-target candidates among the soft training frames.

        Returns
        -------
        selected : list of int
            Indices into the soft training split, in selection order.
        """
        with self.stage('screen'):
            student = student or self.load_model('student_soft')
            soft_train = soft_train if soft_train is not None else \
                self.load_dataset('soft_train')
            k = self.config['screening/n_hard_targets'] if k is None else k
            points = self.screening_points(student, soft_train)
            selected = self.select(points, k)
            screening.selection_map(points, selected).to_csv(
                self.register(name + '_map', self.path(name + '_map.csv')),
                index=False, float_format='%.17g')
            pd.DataFrame(dict(source_index=selected)).to_csv(
                self.register(name, self.path(name + '.csv')), index=False)
            distance = screening.min_pairwise_distance(points, selected)
            self.report[name + '.n_selected'] = len(selected)
            self.report[name + '.min_pairwise_distance'] = distance
            logger.info("Selected {} of {} frames ({}); min pairwise "
                        "distance {:.4f}".format(
                            len(selected), len(points),
                            self.config['screening/mode'], distance))
        return selected

    def load_selection(self, name='selection'):
        path = self.path(name + '.csv')
        if not os.path.exists(path):
            raise MissingArtifact("No {} in {}".format(name, self.out_dir))
        return [int(i) for i in pd.read_csv(path)['source_index']]

    def label_hard_targets(self, soft_train=None, selected=None,
                           name='hard_targets'):
        """Relabel the selected frames with the ground-truth oracle."""
        with self.stage('label_hard_targets'):
            soft_train = soft_train if soft_train is not None else \
                self.load_dataset('soft_train')
            selected = selected if selected is not None else \
                self.load_selection()
            if not selected:
                raise EmptyDataset("no frames selected for labeling")
            hard = Dataset(label_frames(
                soft_train.subset(selected).frames, self.ground_truth,
                provenance=Provenance.HardOracle, n_jobs=self.n_jobs,
                progress=self.progress))
            self.save_dataset(hard, name)
            self.report[name + '.n_frames'] = len(hard)
        return hard

    def finetune_student(self, student=None, hard=None):
        """Fine-tune the soft-trained student on hard targets, descriptor
        segment frozen."""
        with self.stage('finetune_student'):
            student = student or self.load_model('student_soft')
            hard = hard if hard is not None else \
                self.load_dataset('hard_targets')
            hard.require_frames()
            hard_train, hard_valid = self.split(hard, 'hard')
            finetuned, history = trainer.train(
                student, hard_train, hard_valid,
                self.train_config('finetune', FINETUNE_SEED),
                n_jobs=self.n_jobs)
            self.save_model(finetuned, 'student_finetuned', history)
        return finetuned

    def validation_truth(self):
        """Soft validation split relabeled by the ground-truth oracle."""
        try:
            return self.load_dataset('valid_truth')
        except MissingArtifact:
            soft_valid = self.load_dataset('soft_valid')
            truth = Dataset(label_frames(
                soft_valid.frames, self.ground_truth,
                provenance=Provenance.HardOracle, n_jobs=self.n_jobs,
                progress=self.progress))
            self.save_dataset(truth, 'valid_truth')
            return truth

    def evaluate(self, names=('teacher', 'student_soft',
                              'student_finetuned')):
        """Ground-truth MAEs of the named checkpoints on the relabeled
        soft validation split."""
        with self.stage('evaluate'):
            truth = self.validation_truth()
            for name in names:
                self.record_mae(name, 'oracle', self.load_model(name), truth)

    def production_md(self, model=None, name='student_finetuned'):
        """NVT runs of `model` from the first initial system; stores the
        trajectories analyzed by `analyze`."""
        with self.stage('production_md'):
            model = model or self.load_model(name)
            system = self.initial_systems()[0]
            for index, temperature in enumerate(
                    self.production_temperatures):
                md_config = MDConfig.from_plan(self.config, 'production',
                                               temperature,
                                               self.seed + index)
                trajectory = run_md(system, model, md_config,
                                    progress=self.progress)
                tag = temperature_tag(temperature)
                trajectory.save(self.register(
                    'production_' + tag,
                    self.path('production_{}.xyz'.format(tag))))
                trajectory.to_df().to_csv(
                    self.register('thermo_' + tag,
                                  self.path('thermo_{}.csv'.format(tag))),
                    index=False, float_format='%.17g')

    def analyze(self):
        """Histograms, energy summaries and MSD curves regenerated from the
        stored datasets and trajectories.

        Returns
        -------
        summary : dict
            Report keys and values written.
        """
        with self.stage('analyze'):
            summary = collections.OrderedDict()
            summary.update(self._validation_histograms())
            summary.update(self._soft_target_histograms())
            summary.update(self._diffusion())
            self.report.update(summary)
        return summary

    def _write_histograms(self, groups, name, edges=None):
        rows, stats = [], []
        for label, frames in groups:
            bins, counts, _, _ = analyze_md.energy_histogram(
                frames, n_bins=self.config['analysis/n_bins'], edges=edges)
            table = analyze_md.histogram_df(bins, counts)
            table.insert(0, 'group', label)
            rows.append(table)
            stat = analyze_md.energy_summary(frames)
            stat['group'] = label
            stats.append(stat)
        pd.concat(rows, ignore_index=True).to_csv(
            self.register(name, self.path(name + '.csv')), index=False,
            float_format='%.17g')
        stats_df = pd.DataFrame.from_records(
            stats, columns=['group', 'n', 'mean', 'std', 'sem', 'p95'])
        stats_df.to_csv(self.register(name + '_summary',
                                      self.path(name + '_summary.csv')),
                        index=False, float_format='%.17g')
        values = collections.OrderedDict()
        for stat in stats:
            for key in ('n', 'mean', 'std', 'sem', 'p95'):
                values['{}.{}.{}'.format(name, stat['group'], key)] = \
                    stat[key]
        return values

    def _validation_histograms(self):
        if not os.path.exists(self.path('valid_truth.xyz')):
            return {}
        truth = self.load_dataset('valid_truth')
        groups = [(temperature_tag(t), truth.by_temperature(t).frames)
                  for t in truth.temperatures]
        return self._write_histograms(
            [(tag, frames) for tag, frames in groups if frames],
            'energy_hist_valid')

    def _soft_target_histograms(self):
        names = ['soft_truth_pretrained', 'soft_truth_finetuned']
        if not all(os.path.exists(self.path(n + '.xyz')) for n in names):
            return {}
        sets = [(n.split('_')[-1], self.load_dataset(n).frames)
                for n in names]
        energies = np.concatenate([[f.energy_per_atom for f in frames]
                                   for _, frames in sets])
        edges = np.histogram_bin_edges(energies,
                                       bins=self.config['analysis/n_bins'])
        return self._write_histograms(sets, 'energy_hist_soft', edges=edges)

    def _diffusion(self):
        values = collections.OrderedDict()
        rows = []
        window = (self.config['production/fit_start'],
                  self.config['production/fit_end'])
        for temperature in self.production_temperatures:
            tag = temperature_tag(temperature)
            path = self.path('production_{}.xyz'.format(tag))
            if not os.path.exists(path):
                continue
            trajectory = Trajectory.load(path)
            curve = analyze_md.mean_square_displacement(trajectory)
            curve.to_csv(self.register('msd_' + tag,
                                       self.path('msd_{}.csv'.format(tag))),
                         index=False, float_format='%.17g')
            diffusion = analyze_md.self_diffusion(curve, window)
            mean_temperature = float(np.mean(trajectory.temperatures()))
            rows.append(dict(temperature=temperature,
                             diffusion_cm2_s=diffusion,
                             mean_temperature=mean_temperature))
            values['production.{}.diffusion_cm2_s'.format(tag)] = diffusion
            values['production.{}.mean_temperature'.format(tag)] = \
                mean_temperature
        if rows:
            pd.DataFrame.from_records(
                rows, columns=['temperature', 'diffusion_cm2_s',
                               'mean_temperature']).to_csv(
                self.register('diffusion', self.path('diffusion.csv')),
                index=False, float_format='%.17g')
        return values

    # Experiments
    def distill(self):
        """Soft targets, student, screening, hard targets, fine-tuning,
        ground-truth evaluation, production MD and analysis.

        Returns
        -------
        student : PotentialModel
            The fine-tuned student.

        report : RunReport
        """
        logger.info(utils.colored("Distilling into {}".format(self.out_dir),
                                  'magenta'))
        teacher = self.teacher()
        soft = self.generate_soft_targets(teacher)
        student = self.train_student(soft)
        soft_train = self.load_dataset('soft_train')
        selected = self.screen(student, soft_train)
        hard = self.label_hard_targets(soft_train, selected)
        finetuned = self.finetune_student(student, hard)
        self.evaluate()
        self.production_md(finetuned)
        self.analyze()
        self.write_manifest()
        return finetuned, self.report

    def baseline_finetuned_teacher_kd(self):
        """Fine-tune the teacher on randomly selected hard targets, sample
        new soft targets with it and train a fresh student on those only.

        Returns
        -------
        student : PotentialModel
        report : RunReport
        """
        logger.info(utils.colored("Fine-tuned-teacher KD baseline", 'magenta'))
        teacher = self.teacher()
        try:
            soft = self.load_dataset('soft_targets')
        except MissingArtifact:
            soft = self.generate_soft_targets(teacher)
        try:
            soft_train = self.load_dataset('soft_train')
        except MissingArtifact:
            soft_train, _ = self.split(soft, 'soft')

        with self.stage('select_random_hard_targets'):
            selected = screening.select_random(
                len(soft_train), self.config['screening/n_hard_targets'],
                self.config['screening/random_seed'])
        hard = self.label_hard_targets(soft_train, selected,
                                       name='hard_targets_random')

        with self.stage('finetune_teacher'):
            hard_train, hard_valid = split_dataset(
                hard, self.config['split/ratio'], self.seed)
            teacher_ft, history = trainer.train(
                teacher, hard_train, hard_valid,
                self.train_config('teacher_finetune', TEACHER_FINETUNE_SEED),
                n_jobs=self.n_jobs)
            self.save_model(teacher_ft, 'teacher_finetuned', history)

        soft_ft = self.generate_soft_targets(teacher_ft,
                                             name='soft_targets_finetuned')

        with self.stage('train_baseline_student'):
            train_set, valid_set = self.split(soft_ft, 'soft_finetuned')
            initial = nnp.init_model(
                self.descriptor_spec(),
                nnp.NetworkSpec.from_config(self.config, 'student_model'),
                self.seed + STUDENT_SEED, frames=train_set.frames)
            student, history = trainer.train(
                initial, train_set, valid_set,
                self.train_config('soft_training', STUDENT_SEED),
                n_jobs=self.n_jobs)
            self.save_model(student, 'student_baseline_kd', history)

        with self.stage('relabel_lowest_temperature'):
            lowest = min(self.temperatures)
            for name, dataset in (('pretrained', soft),
                                  ('finetuned', soft_ft)):
                frames = dataset.by_temperature(lowest).frames
                if not frames:
                    raise EmptyDataset("no {} soft targets at {} K".format(
                        name, lowest))
                self.save_dataset(Dataset(label_frames(
                    frames, self.ground_truth,
                    provenance=Provenance.HardOracle, n_jobs=self.n_jobs,
                    progress=self.progress)),
                    'soft_truth_' + name)

        self.evaluate(names=('teacher', 'teacher_finetuned',
                             'student_baseline_kd'))
        self.analyze()
        self.write_manifest()
        return student, self.report

    def scratch_baseline(self, multiplier=1):
        """Student architecture trained from random init on
        multiplier * n_hard_targets oracle-labeled frames only."""
        name = 'scratch_x{:d}'.format(multiplier)
        k = multiplier * self.config['screening/n_hard_targets']
        if k < 1:
            with self.stage('scratch_baseline'):
                raise EmptyDataset(
                    "scratch training needs hard targets (k = {})".format(k))
        if multiplier == 1 and os.path.exists(self.path('hard_targets.xyz')):
            hard = self.load_dataset('hard_targets')
        else:
            soft_train = self.load_dataset('soft_train')
            selected = self.screen(soft_train=soft_train, k=k,
                                   name='selection_' + name)
            hard = self.label_hard_targets(soft_train, selected,
                                           name='hard_targets_' + name)

        with self.stage('scratch_baseline'):
            if len(hard) == 0:
                raise EmptyDataset("scratch training needs hard targets")
            train_set, valid_set = split_dataset(
                hard, self.config['split/ratio'], self.seed)
            initial = nnp.init_model(
                self.descriptor_spec(),
                nnp.NetworkSpec.from_config(self.config, 'student_model'),
                self.seed + SCRATCH_SEED, frames=train_set.frames)
            model, history = trainer.train(
                initial, train_set, valid_set,
                self.train_config('scratch', SCRATCH_SEED),
                n_jobs=self.n_jobs)
            self.save_model(model, name, history)
            self.report[name + '.n_hard_targets'] = len(hard)
        self.evaluate(names=(name,))
        self.write_manifest()
        return model, self.report

    def timing_models(self):
        """Trained checkpoints when present, else fresh initializations of
        the configured architectures."""
        models = collections.OrderedDict()
        for role, candidates in (('teacher', ['teacher']),
                                 ('student', ['student_finetuned',
                                              'student_soft'])):
            for name in candidates:
                if os.path.exists(self.path(name + '.kdnnp')):
                    models[role] = self.load_model(name)
                    break
            else:
                models[role] = nnp.init_model(
                    self.descriptor_spec(),
                    nnp.NetworkSpec.from_config(self.config, role + '_model'),
                    self.seed)
        return models

    def timing_report(self):
        with self.stage('timing_report'):
            trials_df, summary_df = timing_report(
                self.timing_models(), self.config['timing/sizes'],
                self.config, n_steps=self.config['timing/n_steps'],
                trials=self.config['timing/trials'],
                timestep=self.config['timing/timestep'],
                temperature=min(self.temperatures), seed=self.seed)
            trials_df.to_csv(self.path('timing.csv'), index=False)
            summary_df.to_csv(self.path('timing_summary.csv'), index=False)
            for row in summary_df.itertuples(index=False):
                logger.info("{:<8} N={:<5} {:.3e} s/step".format(
                    row.model, row.n_atoms, row.mean_seconds_per_step))
        self.write_manifest()
        return summary_df

    def write_manifest(self):
        """manifest.json: config digest, seed and every artifact with its
        sha256 (wall-clock files without one)."""
        artifacts = []
        for name in sorted(os.listdir(self.out_dir)):
            path = self.path(name)
            if name == 'manifest.json' or not os.path.isfile(path):
                continue
            digest = None if name in TIMING_FILES else \
                utils.file_sha256(path)
            artifacts.append(collections.OrderedDict([
                ('path', name), ('sha256', digest)]))
        manifest = collections.OrderedDict([
            ('version', version),
            ('config_sha256', self.config.digest()),
            ('seed', self.seed),
            ('artifacts', artifacts)])
        with open(self.path('manifest.json'), 'w') as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        logger.info("Wrote manifest with {} artifacts".format(len(artifacts)))
        return manifest
