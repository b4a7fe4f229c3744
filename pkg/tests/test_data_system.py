import itertools
import numpy as np
import pytest

import kdnnp.data.system as S

from conftest import random_frame

CUBE = np.full(3, 10.0)


def two_atoms(a, b, edge=10.0):
    return S.AtomicSystem.from_symbols(['Ar', 'Ar'], [a, b],
                                       np.full(3, edge))


@pytest.mark.parametrize("a,b,expected", [
    ((0, 0, 0.5), (0, 0, 9.5), (0, 0, -1.0)),
    ((1, 2, 3), (1, 2, 3), (0, 0, 0)),
    ((0, 0, 0), (0, 0, 4.9), (0, 0, 4.9)),
    ((9.9, 0.1, 0), (0.1, 9.9, 0), (0.2, -0.2, 0))])
def test_minimum_image_displacement(a, b, expected):
    d = S.minimum_image_displacement(a, b, CUBE)
    assert np.allclose(d, expected, atol=1e-12)
    assert np.all(d >= -5.0) and np.all(d < 5.0)


def test_positions_are_wrapped():
    system = S.AtomicSystem.from_symbols(
        ['Ar', 'Ar'], [[-0.5, 10.0, 25.0], [3.0, 4.0, 5.0]], CUBE)
    assert np.all(system.positions >= 0) and np.all(system.positions < 10)
    assert np.allclose(system.positions[0], [9.5, 0.0, 5.0])
    assert np.array_equal(system.images[0], [-1, 1, 2])
    assert np.allclose(system.unwrapped_positions[0], [-0.5, 10.0, 25.0])


def test_wrapping_is_idempotent():
    rng = np.random.default_rng(0)
    positions = rng.uniform(-30, 30, (50, 3))
    once, images = S.wrap_positions(positions, CUBE)
    twice, images_twice = S.wrap_positions(once, CUBE, images)
    assert np.array_equal(once, twice)
    assert np.array_equal(images, images_twice)


@pytest.mark.parametrize("kwargs", [
    dict(species=[], positions=np.zeros((0, 3))),
    dict(species=[0], positions=np.zeros((1, 3)), cell=[10, 0, 10]),
    dict(species=[1], positions=np.zeros((1, 3)))])
def test_invalid_systems(kwargs):
    args = dict(cell=CUBE, symbols=['Ar'], masses=[39.948])
    args.update(kwargs)
    with pytest.raises(ValueError):
        S.AtomicSystem(**args)


def test_unknown_symbol():
    with pytest.raises(S.UnknownSymbol):
        S.AtomicSystem.from_symbols(['Xx'], np.zeros((1, 3)), CUBE)
    system = S.AtomicSystem.from_symbols(['Xx'], np.zeros((1, 3)), CUBE,
                                         masses={'Xx': 12.0})
    assert system.masses[0] == 12.0


@pytest.mark.parametrize("a,b,edge,n_pairs,distance", [
    ((0, 0, 0), (0, 0, 3), 10.0, 1, 3.0),
    ((0, 0, 0.5), (0, 0, 9.5), 10.0, 1, 1.0),
    ((0, 0, 0), (0, 0, 7), 20.0, 0, None)])
def test_neighbor_list_examples(a, b, edge, n_pairs, distance):
    neighbors = S.build_neighbor_list(two_atoms(a, b, edge), 6.0 if
                                      edge > 12 else 5.0)
    assert len(neighbors) == n_pairs
    if n_pairs:
        assert neighbors.pairs[0][0] == 0 and neighbors.pairs[0][1] == 1
        assert neighbors.distances[0] == pytest.approx(distance, abs=1e-12)


def test_cutoff_too_large():
    with pytest.raises(S.CutoffTooLarge):
        S.build_neighbor_list(two_atoms((0, 0, 0), (0, 0, 3)), 5.01)


@pytest.mark.parametrize("seed,n_atoms", [(0, 8), (1, 27), (2, 64)])
def test_neighbor_list_matches_brute_force(seed, n_atoms):
    rng = np.random.default_rng(seed)
    cell = np.array([11.0, 12.0, 13.0])
    system = S.AtomicSystem.from_symbols(
        ['Ar'] * n_atoms, rng.uniform(0, 1, (n_atoms, 3)) * cell, cell)
    cutoff = 5.0
    expected = []
    for i, j in itertools.combinations(range(n_atoms), 2):
        d = S.minimum_image_displacement(system.positions[i],
                                         system.positions[j], cell)
        if np.sqrt(np.sum(d ** 2)) <= cutoff:
            expected.append((i, j))

    neighbors = S.build_neighbor_list(system, cutoff)
    assert [(i, j) for i, j, _, _ in neighbors.pairs] == expected
    assert np.all(neighbors.distances <= cutoff)
    assert np.all(neighbors.first < neighbors.second)


def test_neighbor_distances_translation_invariant():
    system = random_frame(4, n_atoms=27, edge=12.0)
    before = S.build_neighbor_list(system, 5.5)
    after = S.build_neighbor_list(system.translated([3.3, -7.1, 25.2]), 5.5)
    assert np.allclose(np.sort(before.distances), np.sort(after.distances),
                       atol=1e-10, rtol=0)


def test_scale_to_density():
    lattice = S.build_lattice(['Ar'], 64, 1.40)
    edge = (64 * 39.948 * 1.66053906660e-24 / 1.40) ** (1.0 / 3.0) * 1e8
    assert np.allclose(lattice.cell, edge, rtol=1e-12)
    assert lattice.density == pytest.approx(1.40, rel=1e-12)

    assert S.scale_to_density(lattice, lattice.density) is lattice

    denser = S.scale_to_density(lattice, 8 * lattice.density)
    assert np.allclose(denser.cell, 0.5 * lattice.cell, rtol=1e-12)
    assert np.allclose(denser.positions / denser.cell,
                       lattice.positions / lattice.cell, rtol=1e-12)

    with pytest.raises(ValueError):
        S.scale_to_density(lattice, 0.0)


@pytest.mark.parametrize("lattice,n_atoms", [('fcc', 32), ('fcc', 108),
                                              ('sc', 27)])
def test_build_lattice(lattice, n_atoms):
    system = S.build_lattice(['A', 'B'], n_atoms, 1.0, lattice=lattice)
    assert len(system) == n_atoms
    assert system.atom_symbols[:4] == ['A', 'B', 'A', 'B']
    assert system.density == pytest.approx(1.0, rel=1e-12)


def test_build_lattice_size_error():
    with pytest.raises(S.LatticeSizeError):
        S.build_lattice(['Ar'], 30, 1.4)


def test_permuted_and_replace():
    system = random_frame(2)
    order = np.arange(len(system))[::-1]
    permuted = system.permuted(order)
    assert np.array_equal(permuted.positions, system.positions[order])

    moved = system.replace(positions=system.positions + [0, 0, 10.0])
    assert np.allclose(moved.positions, system.positions)
    assert np.all(moved.images[:, 2] == system.images[:, 2] + 1)
