"""Supervised training of a PotentialModel on labeled frames.

Loss per frame: w_e (dE/N)^2 + w_f/(3N) sum |dF|^2, averaged over the
batch. Adam with a staircase exponential learning-rate decay; the
snapshot with the lowest validation force MAE is returned.
"""

import logging
import numpy as np
import pandas as pd

from joblib import Parallel, delayed

import kdnnp.common.utils as utils
import kdnnp.potentials.nnp as nnp
from kdnnp.data.dataset import EmptyDataset

logger = logging.getLogger(__name__)

EVAL_CHUNK = 64


class NonFiniteLoss(Exception):
    def __init__(self, step, value):
        self.step = step
        super(NonFiniteLoss, self).__init__(
            "non-finite loss {} at step {}".format(value, step))


class TrainConfig(object):
    """Optimization settings for one training stage."""
    def __init__(self, steps=50000, batch_size=4, lr_start=1e-3, lr_end=1e-8,
                 decay_steps=500, energy_weight=1.0, force_weight=10.0,
                 freeze_descriptor=False, seed=0, eval_interval=1000,
                 clip_norm=10.0):
        if not lr_start >= lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if decay_steps < 1 or batch_size < 1 or eval_interval < 1:
            raise ValueError("decay_steps, batch_size and eval_interval "
                             "must be >= 1")
        self.steps = int(steps)
        self.batch_size = int(batch_size)
        self.lr_start = float(lr_start)
        self.lr_end = float(lr_end)
        self.decay_steps = int(decay_steps)
        self.energy_weight = float(energy_weight)
        self.force_weight = float(force_weight)
        self.freeze_descriptor = bool(freeze_descriptor)
        self.seed = int(seed)
        self.eval_interval = int(eval_interval)
        self.clip_norm = float(clip_norm)

    @classmethod
    def from_config(cls, config, section, seed):
        return cls(steps=config[section + '/steps'],
                   batch_size=config[section + '/batch_size'],
                   lr_start=config[section + '/lr_start'],
                   lr_end=config[section + '/lr_end'],
                   decay_steps=config[section + '/decay_steps'],
                   energy_weight=config[section + '/energy_weight'],
                   force_weight=config[section + '/force_weight'],
                   freeze_descriptor=config[section + '/freeze_descriptor'],
                   seed=seed,
                   eval_interval=config[section + '/eval_interval'],
                   clip_norm=config[section + '/clip_norm'])

    def __repr__(self):
        return "TrainConfig({})".format(", ".join(
            "{}={}".format(k, v) for k, v in sorted(self.__dict__.items())))


class TrainHistory(object):
    """Evaluation records: step, lr, loss, e_mae, f_mae."""
    COLUMNS = ['step', 'lr', 'loss', 'e_mae', 'f_mae']

    def __init__(self, records=None):
        self.records = []
        for record in records or []:
            self.append(*record)

    def __len__(self):
        return len(self.records)

    def append(self, step, lr, loss, e_mae, f_mae):
        if self.records and step <= self.records[-1][0]:
            raise ValueError("history steps must increase ({} after {})"
                             .format(step, self.records[-1][0]))
        self.records.append((int(step), float(lr), float(loss),
                             float(e_mae), float(f_mae)))

    def to_df(self):
        return pd.DataFrame.from_records(self.records, columns=self.COLUMNS)

    def to_csv(self, path):
        self.to_df().to_csv(path, index=False, float_format='%.17g')
        return path

    @classmethod
    def read_csv(cls, path):
        df = pd.read_csv(path)
        return cls([tuple(row) for row in df[cls.COLUMNS].itertuples(
            index=False)])

    def best(self):
        """Record with the lowest force MAE (earliest on ties)."""
        return min(self.records, key=lambda r: (r[4], r[0]))


def loss(predicted, label, n_atoms, w_e, w_f):
    """w_e (dE/N)^2 + (w_f / 3N) sum |dF|^2 for one frame."""
    d_energy = predicted[0] - label[0]
    d_forces = np.asarray(predicted[1]) - np.asarray(label[1])
    return (w_e * (d_energy / n_atoms) ** 2 +
            w_f / (3.0 * n_atoms) * float(np.sum(d_forces ** 2)))


def lr_schedule(step, config):
    """Staircase exponential decay from lr_start to lr_end.

    lr = lr_start * (lr_end/lr_start)^(floor(step/decay) * decay / steps)
    """
    if step >= config.steps:
        return config.lr_end
    stair = (step // config.decay_steps) * config.decay_steps
    return config.lr_start * (config.lr_end / config.lr_start) ** (
        stair / float(config.steps))


class Adam(object):
    """Adam over a flat parameter vector, updating only `trainable`."""
    def __init__(self, n_params, trainable=None, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.trainable = (np.ones(n_params, dtype=bool) if trainable is None
                          else trainable)

    def step(self, weights, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        weights[self.trainable] -= update[self.trainable]
        return weights


def evaluate_mae(model, dataset, n_jobs=1):
    """(energy MAE eV/atom, force MAE eV/A) of `model` on `dataset`.

    Energy MAE averages |dE|/N over frames; force MAE averages |dF| over
    every force component.
    """
    if len(dataset) == 0:
        raise EmptyDataset("evaluate_mae needs at least one frame.")
    predictions = Parallel(n_jobs=n_jobs)(
        delayed(nnp.model_energy_forces)(model, frame.system)
        for frame in dataset)
    return _mae(dataset.frames, [p[0] for p in predictions],
                [p[1] for p in predictions])


def _mae(frames, energies, forces):
    e_err = [abs(e - f.energy) / f.n_atoms for e, f in zip(energies, frames)]
    f_abs = sum(float(np.sum(np.abs(p - f.forces)))
                for p, f in zip(forces, frames))
    n_components = sum(3 * f.n_atoms for f in frames)
    return float(np.mean(e_err)), f_abs / n_components


def _environments(model, frames, n_jobs):
    return Parallel(n_jobs=n_jobs)(
        delayed(nnp.Environment)(f.system, model.descriptor_spec)
        for f in frames)


def _batch_loss(frames, energies, forces, config):
    """Mean loss and its adjoints with respect to energies and forces."""
    n_frames = float(len(frames))
    losses, energy_bar, force_bar = [], [], []
    for frame, energy, force in zip(frames, energies, forces):
        n = frame.n_atoms
        d_energy = energy - frame.energy
        d_forces = force - frame.forces
        losses.append(loss((energy, force), (frame.energy, frame.forces), n,
                           config.energy_weight, config.force_weight))
        energy_bar.append(2.0 * config.energy_weight * d_energy /
                          (n * n * n_frames))
        force_bar.append(2.0 * config.force_weight * d_forces /
                         (3.0 * n * n_frames))
    return float(np.mean(losses)), np.array(energy_bar), force_bar


def _chunked_predictions(model, environments, weights=None):
    energies, forces = [], []
    for start in range(0, len(environments), EVAL_CHUNK):
        batch = nnp.Batch(model, environments[start:start + EVAL_CHUNK])
        e, f, _ = nnp.predict_batch(model, batch, weights)
        energies.extend(e)
        forces.extend(f)
    return energies, forces


def _batches(n_frames, batch_size, rng):
    """Endless stream of index batches; reshuffled every epoch."""
    while True:
        order = rng.permutation(n_frames)
        if n_frames <= batch_size:
            yield order
            continue
        for start in range(0, n_frames - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def train(model, train_set, val_set, config, n_jobs=1):
    """Train a copy of `model`.

    Parameters
    ----------
    model : PotentialModel

    train_set, val_set : Dataset

    config : TrainConfig

    n_jobs : int
        Workers for the one-off descriptor precomputation.

    Returns
    -------
    best : PotentialModel
        Snapshot with the lowest validation force MAE.

    history : TrainHistory

    Raises
    ------
    EmptyDataset, NonFiniteLoss
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("train needs non-empty training and validation "
                           "sets ({} / {})".format(len(train_set),
                                                   len(val_set)))

    weights = model.weights.copy()
    train_frames, val_frames = train_set.frames, val_set.frames
    train_envs = _environments(model, train_frames, n_jobs)
    val_envs = _environments(model, val_frames, n_jobs)

    trainable = np.ones(model.n_params, dtype=bool)
    if config.freeze_descriptor:
        trainable[model.segment('descriptor')] = False
    optimizer = Adam(model.n_params, trainable=trainable)
    batches = _batches(len(train_frames), config.batch_size,
                       utils.make_rng(config.seed))

    history = TrainHistory()
    best_weights, best_f_mae = weights.copy(), np.inf
    window = []
    logger.info("Training {} on {} frames ({} validation): {}".format(
        model, len(train_frames), len(val_frames), config))

    for step in range(config.steps + 1):
        if step % config.eval_interval == 0 or step == config.steps:
            if window:
                train_loss = float(np.mean(window))
            else:
                energies, forces = _chunked_predictions(model, train_envs,
                                                        weights)
                train_loss = float(np.mean([
                    loss((e, f), (fr.energy, fr.forces), fr.n_atoms,
                         config.energy_weight, config.force_weight)
                    for e, f, fr in zip(energies, forces, train_frames)]))
            if not np.isfinite(train_loss):
                raise NonFiniteLoss(step, train_loss)
            energies, forces = _chunked_predictions(model, val_envs, weights)
            e_mae, f_mae = _mae(val_frames, energies, forces)
            lr = lr_schedule(step, config)
            history.append(step, lr, train_loss, e_mae, f_mae)
            logger.info("[step] {} | lr {:.3e} | loss {:.5g} | e_mae {:.5f} | "
                        "f_mae {}".format(step, lr, train_loss, e_mae,
                                          utils.conditional_colored(
                                              f_mae, best_f_mae, "{:0.5f}")))
            if f_mae < best_f_mae:
                best_f_mae = f_mae
                best_weights = weights.copy()
            window = []

        if step == config.steps:
            break

        indices = next(batches)
        frames = [train_frames[i] for i in indices]
        batch = nnp.Batch(model, [train_envs[i] for i in indices])
        energies, forces, state = nnp.predict_batch(model, batch, weights)
        batch_loss, energy_bar, force_bar = _batch_loss(
            frames, energies, forces, config)
        if not np.isfinite(batch_loss):
            raise NonFiniteLoss(step, batch_loss)
        window.append(batch_loss)

        grad = nnp.parameter_vjp(model, batch, state, energy_bar, force_bar)
        norm = np.sqrt(np.sum(grad[trainable] ** 2))
        if norm > config.clip_norm:
            grad *= config.clip_norm / norm
        optimizer.step(weights, grad, lr_schedule(step, config))

    best = model.copy(best_weights)
    best_step, _, _, _, best_f_mae = history.best()
    logger.info("Best validation force MAE {:.5f} eV/A at step {}".format(
        best_f_mae, best_step))
    return best, history
