"""Analytic reference potentials.

The ground truth is a shifted Lennard-Jones pair potential with a
-d*C6/r^6 dispersion tail. The teacher truth is the same potential with
d=0 and a configuration-level softening of high energies.
"""

import logging
import numpy as np
import scipy.optimize

from joblib import Parallel, delayed

import kdnnp.common.utils as utils
from kdnnp.data.dataset import LabeledFrame, Provenance
from kdnnp.data.system import build_neighbor_list, UnknownSymbol

logger = logging.getLogger(__name__)

OVERLAP_FRACTION = 0.1


class OverlappingAtoms(Exception):
    def __init__(self, message, frame_index=None):
        self.frame_index = frame_index
        if frame_index is not None:
            message = "frame {}: {}".format(frame_index, message)
        super(OverlappingAtoms, self).__init__(message)


class Softening(object):
    """Piecewise compression of the total energy above Umin + U0.

    U' = U                              for U - Umin <= U0
    U' = Umin + U0 + s * (U - Umin - U0) otherwise

    Umin = n_atoms * reference_energy. reference_energy is the per-atom
    energy of a relaxed reference lattice (`relax_reference`), so Umin is
    the configuration-level minimum of an N-atom cell, not the dimer well
    depth; U0 is measured from it.
    """
    def __init__(self, threshold, factor, reference_energy):
        if not 0.0 < factor <= 1.0:
            raise ValueError("softening factor must lie in (0, 1]")
        if threshold < 0:
            raise ValueError("softening threshold must be >= 0")
        self.threshold = float(threshold)
        self.factor = float(factor)
        self.reference_energy = float(reference_energy)

    def __repr__(self):
        return "Softening(U0={}, s={}, u_ref={})".format(
            self.threshold, self.factor, self.reference_energy)

    def apply(self, energy, forces, n_atoms):
        """Softened total energy and forces of an `n_atoms` configuration.

        The kink sits at n_atoms * reference_energy + threshold, with the
        per-atom reference taken from the relaxed lattice. Forces are
        scaled by the factor above the kink and left as given at or below
        it.
        """
        floor = n_atoms * self.reference_energy + self.threshold
        if energy <= floor:
            return energy, forces
        return floor + self.factor * (energy - floor), forces * self.factor


def _lj_dispersion(r, epsilon, sigma, c6, dispersion_scale):
    """Pair energy and dU/dr."""
    sr2 = (sigma / r) ** 2
    sr6 = sr2 * sr2 * sr2
    sr12 = sr6 * sr6
    ir6 = 1.0 / (r * r) ** 3
    energy = 4.0 * epsilon * (sr12 - sr6) - dispersion_scale * c6 * ir6
    dudr = (4.0 * epsilon * (6.0 * sr6 - 12.0 * sr12) +
            6.0 * dispersion_scale * c6 * ir6) / r
    return energy, dudr


class OracleSpec(object):
    """Parameters of the analytic oracle.

    Parameters
    ----------
    symbols : list of str
        Species symbols, in the order of the per-species parameters.

    epsilon : list of float
        LJ well depth per species, eV.

    sigma : list of float
        LJ diameter per species, A.

    c6 : list of float or None
        Dispersion coefficient per species, eV*A^6; mixed geometrically.
        None uses 4*eps_ij*sigma_ij^6 per pair.

    cutoff : float
        A.

    shift_at_cutoff : bool

    dispersion_scale : float
        Factor d on the -C6/r^6 tail.

    softening : Softening or None
    """
    def __init__(self, symbols, epsilon, sigma, c6=None, cutoff=6.0,
                 shift_at_cutoff=True, dispersion_scale=1.0, softening=None):
        self.symbols = list(symbols)
        self.epsilon_species = np.asarray(epsilon, dtype=float)
        self.sigma_species = np.asarray(sigma, dtype=float)
        self.c6_species = None if c6 is None else np.asarray(c6, dtype=float)
        if np.any(self.epsilon_species <= 0) or \
                np.any(self.sigma_species <= 0):
            raise ValueError("epsilon and sigma must be positive.")
        if dispersion_scale < 0:
            raise ValueError("dispersion_scale must be >= 0.")
        self.cutoff = float(cutoff)
        self.shift_at_cutoff = bool(shift_at_cutoff)
        self.dispersion_scale = float(dispersion_scale)
        self.softening = softening

        eps = self.epsilon_species
        sig = self.sigma_species
        self.epsilon = np.sqrt(np.outer(eps, eps))
        self.sigma = 0.5 * (sig[:, None] + sig[None, :])
        if self.c6_species is None:
            self.c6 = 4.0 * self.epsilon * self.sigma ** 6
        else:
            self.c6 = np.sqrt(np.outer(self.c6_species, self.c6_species))

        if self.shift_at_cutoff:
            self.shift = -_lj_dispersion(
                self.cutoff, self.epsilon, self.sigma, self.c6,
                self.dispersion_scale)[0]
        else:
            self.shift = np.zeros_like(self.epsilon)

    @classmethod
    def from_config(cls, config, dispersion_scale=None):
        """Ground-truth spec from the [system] and [oracle] sections."""
        symbols = []
        for symbol in config['system/species']:
            if symbol not in symbols:
                symbols.append(symbol)
        c6 = config['oracle/c6'] or None
        return cls(symbols, config['oracle/epsilon'], config['oracle/sigma'],
                   c6=c6, cutoff=config['oracle/cutoff'],
                   shift_at_cutoff=config['oracle/shift'],
                   dispersion_scale=(config['oracle/dispersion_scale']
                                     if dispersion_scale is None
                                     else dispersion_scale))

    def with_options(self, **kwargs):
        """Copy with some constructor arguments replaced."""
        params = dict(symbols=self.symbols, epsilon=self.epsilon_species,
                      sigma=self.sigma_species, c6=self.c6_species,
                      cutoff=self.cutoff,
                      shift_at_cutoff=self.shift_at_cutoff,
                      dispersion_scale=self.dispersion_scale,
                      softening=self.softening)
        params.update(kwargs)
        return OracleSpec(**params)

    def to_dict(self):
        return dict(symbols=self.symbols,
                    epsilon=self.epsilon_species.tolist(),
                    sigma=self.sigma_species.tolist(),
                    cutoff=self.cutoff,
                    shift_at_cutoff=self.shift_at_cutoff,
                    dispersion_scale=self.dispersion_scale,
                    softening=(None if self.softening is None else dict(
                        threshold=self.softening.threshold,
                        factor=self.softening.factor,
                        reference_energy=self.softening.reference_energy)))

    def species_map(self, system):
        """System species id -> row of the pair tables."""
        try:
            return np.array([self.symbols.index(s) for s in system.symbols])
        except ValueError:
            raise UnknownSymbol("Oracle has no parameters for {}".format(
                [s for s in system.symbols if s not in self.symbols]))

    def energy_forces(self, system):
        return oracle_energy_forces(system, self)


def raw_energy_forces(system, spec):
    """Pair-sum energy and forces without softening."""
    nlist = build_neighbor_list(system, spec.cutoff)
    forces = np.zeros((len(system), 3))
    if len(nlist) == 0:
        return 0.0, forces

    kinds = spec.species_map(system)[system.species]
    ti, tj = kinds[nlist.first], kinds[nlist.second]
    r = nlist.distances
    sigma = spec.sigma[ti, tj]

    close = r < OVERLAP_FRACTION * sigma
    if np.any(close):
        k = int(np.argmax(close))
        raise OverlappingAtoms(
            "atoms {} and {} are {:.4f} A apart".format(
                nlist.first[k], nlist.second[k], r[k]))

    pair_energy, dudr = _lj_dispersion(r, spec.epsilon[ti, tj], sigma,
                                       spec.c6[ti, tj],
                                       spec.dispersion_scale)
    pair_energy = pair_energy + spec.shift[ti, tj]

    # Force on `second` is -dU/dr along the i->j unit vector.
    pair_force = -(dudr / r)[:, None] * nlist.displacements
    np.add.at(forces, nlist.second, pair_force)
    np.add.at(forces, nlist.first, -pair_force)
    return float(np.sum(pair_energy)), forces


def oracle_energy_forces(system, spec):
    """Total energy (eV) and forces (eV/A) of `system` under `spec`.

    Raises
    ------
    OverlappingAtoms
        If any pair is closer than 0.1 sigma_ij.
    """
    energy, forces = raw_energy_forces(system, spec)
    if spec.softening is not None:
        energy, forces = spec.softening.apply(energy, forces, len(system))
    return energy, forces


def relax_reference(system, spec, perturbation=0.05, seed=0, max_iter=500):
    """L-BFGS relaxation of a perturbed structure under the raw oracle.

    Returns
    -------
    relaxed : AtomicSystem

    energy_per_atom : float
        Relaxed energy per atom, eV.
    """
    spec = spec.with_options(softening=None)
    rng = utils.make_rng(seed)
    start = system.positions + rng.uniform(
        -perturbation, perturbation, system.positions.shape)

    def objective(flat):
        trial = system.replace(positions=flat.reshape(-1, 3))
        energy, forces = raw_energy_forces(trial, spec)
        return energy, -forces.ravel()

    result = scipy.optimize.minimize(
        objective, start.ravel(), jac=True, method='L-BFGS-B',
        options={'maxiter': max_iter})
    relaxed = system.replace(positions=result.x.reshape(-1, 3))
    energy = raw_energy_forces(relaxed, spec)[0]
    logger.info("Relaxed reference: {} iterations, {:.6f} eV/atom".format(
        result.nit, energy / len(system)))
    return relaxed, energy / len(system)


def _label_one(index, frame, potential, provenance, temperature_tag):
    system = frame.system if isinstance(frame, LabeledFrame) else frame
    try:
        energy, forces = potential.energy_forces(system)
    except OverlappingAtoms as err:
        raise OverlappingAtoms(str(err), frame_index=index)
    if isinstance(frame, LabeledFrame):
        return frame.relabel(energy, forces, provenance)
    return LabeledFrame(system, energy, forces, provenance,
                        temperature_tag=temperature_tag)


def label_frames(frames, potential, provenance=Provenance.HardOracle,
                 n_jobs=1, temperature_tags=None, progress=False):
    """Label snapshots with `potential.energy_forces`, preserving order.

    Parameters
    ----------
    frames : list of AtomicSystem or LabeledFrame
        LabeledFrames keep their structure and temperature tag.

    potential : OracleSpec, PotentialModel, or any object with
        `energy_forces(system)`.

    provenance : Provenance

    n_jobs : int
        joblib workers; results do not depend on it.

    temperature_tags : list of float or None
        Tags for bare AtomicSystem inputs.

    progress : bool
        Draw a bar over labeled frames.

    Returns
    -------
    labeled : list of LabeledFrame
    """
    frames = list(frames)
    if not frames:
        raise ValueError("label_frames needs at least one frame.")
    tags = (temperature_tags if temperature_tags is not None
            else [None] * len(frames))
    provenance = Provenance(provenance)
    labeled = Parallel(n_jobs=n_jobs, return_as='generator')(
        delayed(_label_one)(i, frame, potential, provenance, tag)
        for i, (frame, tag) in enumerate(zip(frames, tags)))
    return list(utils.track(labeled, len(frames), progress))
