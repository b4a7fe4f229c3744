"""Labeled frames and datasets of them.

A `Dataset` exists on disk as an extended-XYZ file; `to_df` gives the
per-frame summary table used for reports.
"""

import collections
import enum
import logging
import numpy as np
import pandas as pd

import kdnnp.common.utils as utils
import kdnnp.data.extxyz as extxyz
from kdnnp.data.system import AtomicSystem

logger = logging.getLogger(__name__)


class EmptyDataset(Exception):
    pass


class EmptySplit(Exception):
    pass


class Provenance(enum.Enum):
    """Who produced a frame's energy and forces."""
    SoftTeacher = 'SoftTeacher'
    HardOracle = 'HardOracle'
    # Softened, dispersion-free oracle used to pretrain the teacher.
    TeacherTruth = 'TeacherTruth'


class LabeledFrame(object):
    """A system snapshot with energy (eV), forces (eV/A) and provenance.

    The provenance is fixed at construction; `relabel` returns a new frame.
    """
    def __init__(self, system, energy, forces, provenance,
                 temperature_tag=None):
        forces = np.asarray(forces, dtype=float).reshape(-1, 3)
        if len(forces) != len(system):
            raise ValueError("{} force rows for {} atoms".format(
                len(forces), len(system)))
        self.system = system
        self.energy = float(energy)
        self.forces = forces
        self._provenance = Provenance(provenance)
        self.temperature_tag = (None if temperature_tag is None
                                else float(temperature_tag))

    @property
    def provenance(self):
        return self._provenance

    @property
    def n_atoms(self):
        return len(self.system)

    @property
    def energy_per_atom(self):
        return self.energy / self.n_atoms

    def relabel(self, energy, forces, provenance):
        """Same structure and tag, new labels."""
        return LabeledFrame(self.system, energy, forces, provenance,
                            temperature_tag=self.temperature_tag)

    def __repr__(self):
        return "<LabeledFrame N={} E={!r} {} T={}>".format(
            self.n_atoms, self.energy, self.provenance.value,
            self.temperature_tag)


class Dataset(object):
    """Ordered collection of LabeledFrames.

    Parameters
    ----------
    frames : list of LabeledFrame

    split_seed : int or None
        Seed of the split that produced this dataset, if any.
    """
    def __init__(self, frames=None, split_seed=None):
        self.frames = list(frames or [])
        self.split_seed = split_seed

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Dataset(self.frames[index], split_seed=self.split_seed)
        return self.frames[index]

    def __repr__(self):
        return "<Dataset n={} seed={}>".format(len(self), self.split_seed)

    @classmethod
    def concat(cls, datasets):
        frames = []
        for dataset in datasets:
            frames.extend(dataset.frames)
        return cls(frames)

    def subset(self, indices):
        return Dataset([self.frames[i] for i in indices],
                       split_seed=self.split_seed)

    def by_temperature(self, temperature):
        return Dataset([f for f in self.frames
                        if f.temperature_tag == float(temperature)])

    def require_frames(self):
        if not self.frames:
            raise EmptyDataset("The dataset has no frames.")

    @property
    def systems(self):
        return [f.system for f in self.frames]

    @property
    def energies_per_atom(self):
        return np.array([f.energy_per_atom for f in self.frames])

    @property
    def temperatures(self):
        tags = {f.temperature_tag for f in self.frames
                if f.temperature_tag is not None}
        return sorted(tags)

    def to_df(self):
        """One row per frame."""
        records = [dict(n_atoms=f.n_atoms,
                        energy=f.energy,
                        energy_per_atom=f.energy_per_atom,
                        max_force=float(np.abs(f.forces).max()),
                        provenance=f.provenance.value,
                        temperature_tag=f.temperature_tag)
                   for f in self.frames]
        return pd.DataFrame.from_records(
            records, columns=['n_atoms', 'energy', 'energy_per_atom',
                              'max_force', 'provenance', 'temperature_tag'])

    def save(self, path):
        """Write all frames as extended XYZ."""
        with open(path, 'w') as fh:
            for frame in self.frames:
                system = frame.system
                info = collections.OrderedDict([
                    ('cell', system.cell),
                    ('energy', frame.energy),
                    ('provenance', frame.provenance.value),
                    ('temperature_tag', (float('nan')
                                         if frame.temperature_tag is None
                                         else frame.temperature_tag)),
                    ('symbols', list(system.symbols)),
                    ('masses', system.masses),
                ])
                columns = collections.OrderedDict([
                    ('species', ('S', np.array(system.atom_symbols))),
                    ('pos', ('R', system.positions)),
                    ('forces', ('R', frame.forces)),
                ])
                extxyz.write_frame(fh, info, columns)
        logger.debug("Saved {} frames to {}".format(len(self), path))
        return path

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = extxyz.read_frames(fh)

        frames = []
        for info, columns in raw:
            symbols = info['symbols'].split()
            species = [symbols.index(s) for s in columns['species']]
            system = AtomicSystem(species, columns['pos'],
                                  extxyz.floats(info['cell']), symbols,
                                  extxyz.floats(info['masses']))
            tag = float(info.get('temperature_tag', 'nan'))
            frames.append(LabeledFrame(
                system, float(info['energy']), columns['forces'],
                Provenance(info['provenance']),
                temperature_tag=None if np.isnan(tag) else tag))
        return cls(frames)


def split_dataset(dataset, ratio, seed):
    """Seeded shuffle into disjoint, exhaustive train / validation sets.

    |train| = round(ratio * N), rounding halves up. Both parts keep the
    original frame order.

    Raises
    ------
    EmptySplit
        If either side would be empty.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1): {}".format(ratio))
    n_frames = len(dataset)
    n_train = int(np.floor(ratio * n_frames + 0.5))
    if n_train == 0 or n_train == n_frames:
        raise EmptySplit("ratio {} leaves an empty side for {} frames".format(
            ratio, n_frames))

    order = utils.make_rng(seed).permutation(n_frames)
    train = Dataset([dataset[i] for i in np.sort(order[:n_train])],
                    split_seed=seed)
    valid = Dataset([dataset[i] for i in np.sort(order[n_train:])],
                    split_seed=seed)
    return train, valid


def load_systems(path, masses=None):
    """Unlabeled structures from an extended-XYZ file.

    Frames need a `cell` entry and `species`/`pos` columns; masses come from
    the built-in table updated with `masses`.
    """
    with open(path) as fh:
        raw = extxyz.read_frames(fh)
    if not raw:
        raise EmptyDataset("{} holds no frames".format(path))
    return [AtomicSystem.from_symbols(list(columns['species']),
                                      columns['pos'],
                                      extxyz.floats(info['cell']),
                                      masses=masses)
            for info, columns in raw]
