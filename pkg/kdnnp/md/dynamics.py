"""Molecular dynamics over any potential with `energy_forces(system)`.

Units: A, fs, amu, eV, K. Accelerations are F * ACCEL / m.
"""

import collections
import logging
import numpy as np
import pandas as pd

import kdnnp.common.utils as utils
import kdnnp.data.extxyz as extxyz
from kdnnp.data.dataset import LabeledFrame, Provenance
from kdnnp.data.system import AtomicSystem
from kdnnp.potentials.oracle import OverlappingAtoms

logger = logging.getLogger(__name__)

KB = 8.617333262e-5
# (A/fs^2) per (eV/A / amu).
ACCEL = 9.648533e-3


class NonFiniteState(Exception):
    """MD produced NaN/inf (or collapsed atoms); keeps the partial run."""
    def __init__(self, step, message="", trajectory=None):
        self.step = step
        self.trajectory = trajectory
        super(NonFiniteState, self).__init__(
            "non-finite MD state at step {}{}".format(
                step, ": " + message if message else ""))


class LangevinThermostat(object):
    """BAOAB Langevin thermostat; friction in 1/fs."""
    def __init__(self, friction, temperature):
        if friction < 0 or temperature < 0:
            raise ValueError("friction and temperature must be >= 0")
        self.friction = float(friction)
        self.temperature = float(temperature)

    def __repr__(self):
        return "LangevinThermostat(friction={}, T={})".format(
            self.friction, self.temperature)


class MDConfig(object):
    """Integration and sampling plan of one MD run.

    Samples are taken after steps s with s > equilibration and
    (s - equilibration) % sample_interval == 0.
    """
    def __init__(self, timestep, n_steps, temperature, thermostat=None,
                 sample_interval=1, equilibration=0, seed=0,
                 initialize_velocities=True):
        if timestep <= 0:
            raise ValueError("timestep must be positive")
        if sample_interval < 1:
            raise ValueError("sample_interval must be >= 1")
        if not 0 <= equilibration <= n_steps:
            raise ValueError("equilibration must lie in [0, n_steps]")
        if temperature < 0:
            raise ValueError("temperature must be >= 0")
        self.timestep = float(timestep)
        self.n_steps = int(n_steps)
        self.temperature = float(temperature)
        self.thermostat = thermostat
        self.sample_interval = int(sample_interval)
        self.equilibration = int(equilibration)
        self.seed = int(seed)
        self.initialize_velocities = bool(initialize_velocities)

    @classmethod
    def from_plan(cls, config, section, temperature, seed):
        """Langevin run from an MD-plan config section."""
        n_steps = (config[section + '/equilibration'] +
                   config[section + '/n_samples'] *
                   config[section + '/sample_interval'])
        friction = config[section + '/friction']
        return cls(config[section + '/timestep'], n_steps, temperature,
                   thermostat=(LangevinThermostat(friction, temperature)
                               if friction > 0 else None),
                   sample_interval=config[section + '/sample_interval'],
                   equilibration=config[section + '/equilibration'],
                   seed=seed)

    @property
    def friction(self):
        return 0.0 if self.thermostat is None else self.thermostat.friction

    @property
    def n_samples(self):
        return (self.n_steps - self.equilibration) // self.sample_interval

    def is_sample_step(self, step):
        return (step > self.equilibration and
                (step - self.equilibration) % self.sample_interval == 0)

    def to_dict(self):
        return collections.OrderedDict([
            ('timestep', self.timestep), ('n_steps', self.n_steps),
            ('temperature', self.temperature), ('friction', self.friction),
            ('sample_interval', self.sample_interval),
            ('equilibration', self.equilibration), ('seed', self.seed)])

    @classmethod
    def from_dict(cls, data):
        friction = float(data['friction'])
        temperature = float(data['temperature'])
        return cls(float(data['timestep']), int(data['n_steps']), temperature,
                   thermostat=(LangevinThermostat(friction, temperature)
                               if friction > 0 else None),
                   sample_interval=int(data['sample_interval']),
                   equilibration=int(data['equilibration']),
                   seed=int(data['seed']))


def kinetic_energy(system):
    """eV."""
    return float(0.5 * np.sum(system.atom_masses[:, None] *
                              system.velocities ** 2) / ACCEL)


def kinetic_temperature(system):
    """Instantaneous temperature with 3N - 3 degrees of freedom."""
    dof = 3 * len(system) - 3
    if dof <= 0:
        return 0.0
    return 2.0 * kinetic_energy(system) / (dof * KB)


def _draw_velocities(system, temperature, rng):
    masses = system.atom_masses[:, None]
    velocities = rng.standard_normal(system.positions.shape) * np.sqrt(
        KB * temperature * ACCEL / masses)
    momentum = np.sum(masses * velocities, axis=0)
    velocities -= momentum / masses.sum()

    target = 0.5 * (3 * len(system) - 3) * KB * temperature
    current = float(0.5 * np.sum(masses * velocities ** 2) / ACCEL)
    if target <= 0 or current <= 0:
        return np.zeros_like(velocities)
    return velocities * np.sqrt(target / current)


def maxwell_boltzmann_init(system, temperature, seed):
    """Maxwell-Boltzmann velocities with zero total momentum, rescaled so
    the kinetic energy is (3N - 3) kB T / 2.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    velocities = _draw_velocities(system, temperature, utils.make_rng(seed))
    return system.replace(velocities=velocities)


def _evaluate(potential, system, step):
    try:
        energy, forces = potential.energy_forces(system)
    except OverlappingAtoms as err:
        raise NonFiniteState(step, str(err))
    if not np.isfinite(energy) or not np.all(np.isfinite(forces)):
        raise NonFiniteState(step, "non-finite energy or forces")
    return energy, forces


def velocity_verlet_step(system, potential, dt, thermostat=None, rng=None,
                         forces=None, step=0):
    """Advance one timestep.

    Plain velocity Verlet without a thermostat (or with zero friction);
    BAOAB Langevin splitting otherwise.

    Parameters
    ----------
    system : AtomicSystem

    potential : object with energy_forces(system)

    dt : float
        fs.

    thermostat : LangevinThermostat or None

    rng : np.random.Generator or None
        Noise source; required with a thermostat.

    forces : np.ndarray or None
        Forces at `system`, if already known.

    step : int
        Reported by NonFiniteState.

    Returns
    -------
    system : AtomicSystem
    energy : float
        Potential energy at the new positions.
    forces : np.ndarray
        Forces at the new positions.

    Raises
    ------
    NonFiniteState
    """
    if forces is None:
        forces = _evaluate(potential, system, step)[1]
    inv_mass = ACCEL / system.atom_masses[:, None]
    v = system.velocities + 0.5 * dt * forces * inv_mass

    if thermostat is None or thermostat.friction == 0.0:
        x = system.positions + dt * v
    else:
        x = system.positions + 0.5 * dt * v
        c1 = np.exp(-thermostat.friction * dt)
        sigma = np.sqrt((1.0 - c1 * c1) * KB * thermostat.temperature *
                        inv_mass)
        v = c1 * v + sigma * rng.standard_normal(v.shape)
        # Zero total momentum; kinetic_temperature counts 3N - 3 dof.
        v -= np.sum(system.atom_masses[:, None] * v, axis=0) / \
            system.atom_masses.sum()
        x = x + 0.5 * dt * v

    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise NonFiniteState(step, "positions or velocities diverged")
    moved = system.replace(positions=x, velocities=v)
    energy, new_forces = _evaluate(potential, moved, step)
    v = v + 0.5 * dt * new_forces * inv_mass
    return moved.replace(velocities=v), energy, new_forces


class Trajectory(object):
    """Sampled frames of one MD run.

    Attributes
    ----------
    frames : list of AtomicSystem
        With velocities and image counters.
    times : list of float
        fs since the start of the run.
    potential_energies, kinetic_energies : list of float
        eV.
    forces : list of np.ndarray
    config : MDConfig
    """
    def __init__(self, config, frames=None, times=None,
                 potential_energies=None, kinetic_energies=None,
                 forces=None):
        self.config = config
        self.frames = list(frames or [])
        self.times = list(times or [])
        self.potential_energies = list(potential_energies or [])
        self.kinetic_energies = list(kinetic_energies or [])
        self.forces = list(forces or [])

    def __len__(self):
        return len(self.frames)

    def append(self, system, time, energy, forces):
        self.frames.append(system)
        self.times.append(float(time))
        self.potential_energies.append(float(energy))
        self.kinetic_energies.append(kinetic_energy(system))
        self.forces.append(forces)

    @property
    def total_energies(self):
        return (np.asarray(self.potential_energies) +
                np.asarray(self.kinetic_energies))

    def unwrapped_positions(self):
        """Array of shape (n_samples, N, 3)."""
        return np.array([f.unwrapped_positions for f in self.frames])

    def temperatures(self):
        return np.array([kinetic_temperature(f) for f in self.frames])

    def to_df(self):
        return pd.DataFrame(dict(
            time=self.times, potential_energy=self.potential_energies,
            kinetic_energy=self.kinetic_energies,
            temperature=self.temperatures()),
            columns=['time', 'potential_energy', 'kinetic_energy',
                     'temperature'])

    def to_labeled(self, provenance=Provenance.SoftTeacher):
        """Samples labeled with the energies and forces of the driving
        potential, tagged with the set-point temperature."""
        return [LabeledFrame(system.replace(velocities=np.zeros_like(
                    system.velocities), images=np.zeros_like(system.images)),
                    energy, forces, provenance,
                    temperature_tag=self.config.temperature)
                for system, energy, forces in zip(
                    self.frames, self.potential_energies, self.forces)]

    def save(self, path):
        with open(path, 'w') as fh:
            for system, time, energy, forces in zip(
                    self.frames, self.times, self.potential_energies,
                    self.forces):
                info = collections.OrderedDict([
                    ('cell', system.cell), ('time', time),
                    ('energy', energy),
                    ('symbols', list(system.symbols)),
                    ('masses', system.masses)])
                info.update(self.config.to_dict())
                columns = collections.OrderedDict([
                    ('species', ('S', np.array(system.atom_symbols))),
                    ('pos', ('R', system.positions)),
                    ('vel', ('R', system.velocities)),
                    ('image', ('I', system.images)),
                    ('forces', ('R', forces))])
                extxyz.write_frame(fh, info, columns)
        return path

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = extxyz.read_frames(fh)
        if not raw:
            raise ValueError("{} holds no frames".format(path))
        config = MDConfig.from_dict(raw[0][0])
        trajectory = cls(config)
        for info, columns in raw:
            symbols = info['symbols'].split()
            system = AtomicSystem(
                [symbols.index(s) for s in columns['species']],
                columns['pos'], extxyz.floats(info['cell']), symbols,
                extxyz.floats(info['masses']), velocities=columns['vel'],
                images=columns['image'])
            trajectory.append(system, float(info['time']),
                              float(info['energy']), columns['forces'])
        return trajectory


def run_md(initial, potential, config, progress=False):
    """Integrate `config.n_steps` steps from `initial`, sampling per plan.

    Velocities are drawn from Maxwell-Boltzmann at the set-point unless
    `config.initialize_velocities` is False. The same seeded generator then
    drives the thermostat noise, so the run is deterministic.
    `progress` draws a bar over the steps.

    Raises
    ------
    NonFiniteState
        Carrying the samples taken before the failure.
    """
    rng = utils.make_rng(config.seed)
    system = initial
    if config.initialize_velocities:
        system = system.replace(velocities=_draw_velocities(
            system, config.temperature, rng))

    trajectory = Trajectory(config)
    try:
        energy, forces = _evaluate(potential, system, 0)
    except NonFiniteState as err:
        err.trajectory = trajectory
        raise

    for step in utils.track(range(1, config.n_steps + 1), config.n_steps,
                            progress):
        try:
            system, energy, forces = velocity_verlet_step(
                system, potential, config.timestep, config.thermostat, rng,
                forces=forces, step=step)
        except NonFiniteState as err:
            err.trajectory = trajectory
            logger.warning("MD at {} K failed: {}".format(
                config.temperature, err))
            raise
        if config.is_sample_step(step):
            trajectory.append(system, step * config.timestep, energy, forces)

    logger.debug("[step] MD at {} K: {} steps, {} samples".format(
        config.temperature, config.n_steps, len(trajectory)))
    return trajectory
