"""Atomic configurations in orthorhombic periodic cells.

Lengths are in Angstrom, velocities in Angstrom/fs and masses in amu.
`AtomicSystem` objects are treated as immutable: every operation returns a
new system.
"""

import logging
import numpy as np
import scipy.spatial

logger = logging.getLogger(__name__)

# CODATA 2018 atomic mass constant, grams.
AMU_GRAMS = 1.66053906660e-24

MASS_TABLE = {
    'Ar': 39.948,
    # Synthetic species for binary mixtures.
    'A': 20.0,
    'B': 40.0,
}


class CutoffTooLarge(Exception):
    pass


class UnknownSymbol(Exception):
    pass


class LatticeSizeError(Exception):
    pass


def mass_table(overrides=None):
    """Built-in masses updated with `overrides`."""
    table = dict(MASS_TABLE)
    table.update(overrides or {})
    return table


def wrap_positions(positions, cell, images=None):
    """Wrap coordinates into [0, cell_k), counting crossed images.

    Coordinates already inside the cell are left untouched, so wrapping is
    idempotent.

    Returns
    -------
    positions : np.ndarray, shape=(N, 3)
    images : np.ndarray of int, shape=(N, 3)
    """
    positions = np.array(positions, dtype=float)
    images = (np.zeros(positions.shape, dtype=np.int64) if images is None
              else np.array(images, dtype=np.int64))
    outside = (positions < 0.0) | (positions >= cell)
    if np.any(outside):
        shift = np.where(outside, np.floor(positions / cell), 0.0)
        positions = positions - shift * cell
        images = images + shift.astype(np.int64)
        # p = -tiny wraps to exactly cell_k in floating point.
        edge = positions >= cell
        if np.any(edge):
            positions = np.where(edge, 0.0, positions)
            images = images + edge.astype(np.int64)
    return positions, images


class AtomicSystem(object):
    """Species, positions, velocities and an orthorhombic cell.

    Parameters
    ----------
    species : array-like of int, shape=(N,)
        Species ids indexing `symbols` and `masses`.

    positions : array-like, shape=(N, 3)
        Cartesian positions; wrapped into the cell on construction.

    cell : array-like, shape=(3,)
        Orthorhombic edge lengths.

    symbols : sequence of str
        Chemical symbol per species id.

    masses : array-like, shape=(n_species,)
        Mass per species id.

    velocities : array-like, shape=(N, 3) or None
        Zero when omitted.

    images : array-like of int, shape=(N, 3) or None
        Periodic image counters, for unwrapped coordinates.
    """
    def __init__(self, species, positions, cell, symbols, masses,
                 velocities=None, images=None):
        self.species = np.asarray(species, dtype=np.int64)
        self.cell = np.asarray(cell, dtype=float).reshape(3)
        self.symbols = tuple(symbols)
        self.masses = np.asarray(masses, dtype=float)

        if self.species.ndim != 1 or len(self.species) < 1:
            raise ValueError("A system needs at least one atom.")
        if np.any(self.cell <= 0):
            raise ValueError("Cell edges must be positive: {}".format(
                self.cell))
        if len(self.masses) != len(self.symbols):
            raise ValueError("One mass per species symbol is required.")
        if self.species.min() < 0 or self.species.max() >= len(self.symbols):
            raise ValueError("Species ids must index the symbol table.")

        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        if len(positions) != len(self.species):
            raise ValueError("positions and species differ in length.")
        self.positions, self.images = wrap_positions(
            positions, self.cell, images)

        if velocities is None:
            self.velocities = np.zeros_like(self.positions)
        else:
            self.velocities = np.array(velocities,
                                       dtype=float).reshape(-1, 3)

    @classmethod
    def from_symbols(cls, atom_symbols, positions, cell, masses=None,
                     velocities=None):
        """Build a system from per-atom symbols; species ids follow first
        appearance."""
        table = mass_table(masses)
        symbols = []
        for symbol in atom_symbols:
            if symbol not in symbols:
                symbols.append(symbol)
        missing = [s for s in symbols if s not in table]
        if missing:
            raise UnknownSymbol("No mass known for {}".format(missing))
        species = [symbols.index(s) for s in atom_symbols]
        return cls(species, positions, cell, symbols,
                   [table[s] for s in symbols], velocities=velocities)

    def __len__(self):
        return len(self.species)

    def __repr__(self):
        return "<AtomicSystem N={} cell={} symbols={}>".format(
            len(self), self.cell.tolist(), list(self.symbols))

    @property
    def n_atoms(self):
        return len(self.species)

    @property
    def atom_symbols(self):
        return [self.symbols[s] for s in self.species]

    @property
    def atom_masses(self):
        return self.masses[self.species]

    @property
    def volume(self):
        return float(np.prod(self.cell))

    @property
    def density(self):
        """Mass density in g/cm^3."""
        return float(self.atom_masses.sum() * AMU_GRAMS /
                     (self.volume * 1e-24))

    @property
    def unwrapped_positions(self):
        return self.positions + self.images * self.cell

    def replace(self, positions=None, velocities=None, cell=None,
                images=None, keep_images=True):
        """A new system with some fields replaced.

        Positions given here are wrapped, continuing the image count
        unless `keep_images` is False.
        """
        if images is None and keep_images:
            images = self.images
        return AtomicSystem(
            self.species,
            self.positions if positions is None else positions,
            self.cell if cell is None else cell,
            self.symbols, self.masses,
            velocities=self.velocities if velocities is None else velocities,
            images=images)

    def translated(self, vector):
        return self.replace(positions=self.positions + np.asarray(vector))

    def permuted(self, order):
        order = np.asarray(order)
        return AtomicSystem(self.species[order], self.positions[order],
                            self.cell, self.symbols, self.masses,
                            velocities=self.velocities[order],
                            images=self.images[order])


def minimum_image_displacement(a, b, cell):
    """Displacement b - a under the minimum image convention.

    Parameters
    ----------
    a, b : array-like, shape=(..., 3)
    cell : array-like, shape=(3,)

    Returns
    -------
    d : np.ndarray
        Each component lies in [-cell_k/2, cell_k/2).
    """
    cell = np.asarray(cell, dtype=float)
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    return d - cell * np.floor(d / cell + 0.5)


class NeighborList(object):
    """Pairs (i < j) within `cutoff`, sorted by i then j.

    Attributes
    ----------
    first, second : np.ndarray of int, shape=(M,)
    displacements : np.ndarray, shape=(M, 3)
        Minimum-image vectors from atom `first` to atom `second`.
    distances : np.ndarray, shape=(M,)
    cutoff : float
    """
    def __init__(self, first, second, displacements, distances, cutoff):
        self.first = first
        self.second = second
        self.displacements = displacements
        self.distances = distances
        self.cutoff = cutoff

    def __len__(self):
        return len(self.first)

    @property
    def pairs(self):
        return [(int(i), int(j), d, float(r)) for i, j, d, r in zip(
            self.first, self.second, self.displacements, self.distances)]


def build_neighbor_list(system, cutoff):
    """All pairs within `cutoff` under the single-image convention.

    Raises
    ------
    CutoffTooLarge
        If cutoff exceeds half the shortest cell edge.
    """
    half_edge = system.cell.min() / 2.0
    if cutoff > half_edge:
        raise CutoffTooLarge(
            "cutoff {} A exceeds half the shortest cell edge ({} A)".format(
                cutoff, half_edge))

    tree = scipy.spatial.cKDTree(system.positions, boxsize=system.cell)
    candidates = tree.query_pairs(cutoff * (1.0 + 1e-8),
                                  output_type='ndarray')
    if len(candidates) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return NeighborList(empty, empty.copy(), np.zeros((0, 3)),
                            np.zeros(0), cutoff)

    first = np.minimum(candidates[:, 0], candidates[:, 1])
    second = np.maximum(candidates[:, 0], candidates[:, 1])
    displacements = minimum_image_displacement(
        system.positions[first], system.positions[second], system.cell)
    distances = np.sqrt(np.sum(displacements ** 2, axis=1))

    keep = distances <= cutoff
    order = np.lexsort((second[keep], first[keep]))
    return NeighborList(first[keep][order], second[keep][order],
                        displacements[keep][order], distances[keep][order],
                        cutoff)


def scale_to_density(system, target_density):
    """Isotropically rescale cell and positions to `target_density` g/cm^3.

    Fractional coordinates are preserved.
    """
    if target_density <= 0:
        raise ValueError("target_density must be positive.")
    factor = (system.density / float(target_density)) ** (1.0 / 3.0)
    if factor == 1.0:
        return system
    fractional = system.positions / system.cell
    cell = system.cell * factor
    return AtomicSystem(system.species, fractional * cell, cell,
                        system.symbols, system.masses,
                        velocities=system.velocities)


def build_lattice(composition, n_atoms, density, lattice='fcc', masses=None):
    """A cubic lattice of `n_atoms` at `density` g/cm^3.

    Parameters
    ----------
    composition : list of str
        Symbols assigned to sites cyclically.

    n_atoms : int
        4*m^3 for 'fcc', m^3 for 'sc'.

    density : float
        Target density in g/cm^3.

    lattice : str in ['fcc', 'sc']

    masses : dict or None
        Mass overrides.
    """
    basis = {'fcc': np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0],
                              [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]]),
             'sc': np.zeros((1, 3))}[lattice]
    m = int(round((n_atoms / float(len(basis))) ** (1.0 / 3.0)))
    if len(basis) * m ** 3 != n_atoms:
        raise LatticeSizeError(
            "{} atoms do not fill a {} lattice (need {} * m^3)".format(
                n_atoms, lattice, len(basis)))

    grid = np.array([[i, j, k] for i in range(m) for j in range(m)
                     for k in range(m)], dtype=float)
    fractional = (grid[:, None, :] + basis[None, :, :]).reshape(-1, 3) / m
    atom_symbols = [composition[i % len(composition)]
                    for i in range(n_atoms)]

    unit = AtomicSystem.from_symbols(atom_symbols, fractional, np.ones(3),
                                     masses=masses)
    return scale_to_density(unit, density)
