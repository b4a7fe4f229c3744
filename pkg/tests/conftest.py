import numpy as np
import os
import pytest
import shutil
import tempfile

import kdnnp.common.config as C
import kdnnp.potentials.nnp as nnp
from kdnnp.data.dataset import Dataset, LabeledFrame, Provenance
from kdnnp.data.system import AtomicSystem
from kdnnp.potentials.oracle import OracleSpec

DATA_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data")
INT_CONFIG_PATH = os.path.join(DATA_DIR, "integration_config.toml")
CONFIG_PATH = os.path.join(DATA_DIR, "master_config.toml")

AR_EPSILON = 0.0104
AR_SIGMA = 3.40


@pytest.fixture()
def workspace(request):
    test_workspace = tempfile.mkdtemp()

    def fin():
        if os.path.exists(test_workspace):
            shutil.rmtree(test_workspace)

    request.addfinalizer(fin)

    return test_workspace


@pytest.fixture(scope="module")
def module_workspace(request):
    test_workspace = tempfile.mkdtemp()

    def fin():
        if os.path.exists(test_workspace):
            shutil.rmtree(test_workspace)

    request.addfinalizer(fin)

    return test_workspace


@pytest.fixture(scope="module")
def integration_config():
    return C.parse_config(INT_CONFIG_PATH)


def random_frame(seed, n_atoms=8, edge=10.0, symbols=('Ar',),
                 jitter=0.6):
    """Atoms on a jittered simple-cubic grid; no pair closer than
    spacing - 2 * sqrt(3) * jitter."""
    rng = np.random.default_rng(seed)
    m = int(np.ceil(n_atoms ** (1.0 / 3.0)))
    grid = np.array([[i, j, k] for i in range(m) for j in range(m)
                     for k in range(m)], dtype=float)[:n_atoms]
    positions = (grid + 0.5) * edge / m + rng.uniform(
        -jitter, jitter, (n_atoms, 3))
    atom_symbols = [symbols[i % len(symbols)] for i in range(n_atoms)]
    return AtomicSystem.from_symbols(atom_symbols, positions,
                                     np.full(3, edge))


@pytest.fixture
def ar_system():
    return random_frame(0)


@pytest.fixture
def binary_system():
    return random_frame(1, symbols=('A', 'B'))


@pytest.fixture
def argon():
    return OracleSpec(['Ar'], [AR_EPSILON], [AR_SIGMA], cutoff=4.9)


@pytest.fixture
def binary_oracle():
    return OracleSpec(['A', 'B'], [0.010, 0.014], [3.2, 3.6], cutoff=4.9,
                      c6=[40.0, 90.0])


def tiny_model(symbols=('Ar',), seed=3, descriptor_layers=(5,),
               fitting_layers=(6, 6), cutoff=4.5, frames=None):
    dspec = nnp.DescriptorSpec(list(symbols), cutoff=cutoff, n_radial=4,
                               r_min=1.0)
    nspec = nnp.NetworkSpec(list(descriptor_layers), list(fitting_layers))
    return nnp.init_model(dspec, nspec, seed, frames=frames)


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def oracle_dataset(argon):
    frames = []
    for seed in range(10):
        system = random_frame(100 + seed)
        energy, forces = argon.energy_forces(system)
        frames.append(LabeledFrame(system, energy, forces,
                                   Provenance.HardOracle,
                                   temperature_tag=[80.0, 100.0][seed % 2]))
    return Dataset(frames)
