import numpy as np
import os
import pytest
import scipy.spatial.transform

import kdnnp.potentials.nnp as nnp
from kdnnp.data.dataset import LabeledFrame, Provenance
from kdnnp.data.system import AtomicSystem, build_neighbor_list

from conftest import random_frame, tiny_model


def numeric_forces(model, system, h=1e-5):
    forces = np.zeros_like(system.positions)
    for i in range(len(system)):
        for k in range(3):
            energies = []
            for sign in (1, -1):
                positions = system.positions.copy()
                positions[i, k] += sign * h
                energies.append(model.energy_forces(
                    system.replace(positions=positions))[0])
            forces[i, k] = -(energies[0] - energies[1]) / (2 * h)
    return forces


def cluster(seed=0, center=15.0):
    """A small cluster in a box much larger than the cutoff."""
    rng = np.random.default_rng(seed)
    grid = np.array([[i, j, k] for i in range(2) for j in range(2)
                     for k in range(2)], dtype=float)
    positions = center + 3.0 * (grid - 0.5) + rng.uniform(-0.3, 0.3,
                                                          grid.shape)
    return AtomicSystem.from_symbols(['Ar'] * len(grid), positions,
                                     np.full(3, 2 * center))


def test_default_radial_grid():
    grid = nnp.default_radial_grid(4.5, n_radial=4, r_min=1.0)
    assert grid.shape == (4, 2)
    assert np.allclose(grid[:, 1], [1.0, 2.1666666666666665,
                                    3.3333333333333335, 4.5])
    assert np.allclose(grid[:, 0], 4.0 / (3.5 / 3) ** 2)


def test_descriptor_layout():
    spec = nnp.DescriptorSpec(['A', 'B'], cutoff=4.5, n_radial=3)
    assert spec.n_features == 6
    assert nnp.DescriptorSpec.from_dict(spec.to_dict()).n_features == 6


def test_cutoff_function():
    fc, dfc = nnp.cutoff_function(np.array([0.0, 2.25, 4.5, 5.0]), 4.5)
    assert np.allclose(fc, [1.0, 0.5, 0.0, 0.0])
    assert dfc[0] == 0.0 and dfc[-1] == 0.0


def test_compute_descriptor(binary_system):
    spec = nnp.DescriptorSpec(['A', 'B'], cutoff=4.5, n_radial=4, r_min=1.0)
    nlist = build_neighbor_list(binary_system, spec.cutoff)
    features = nnp.compute_descriptors(binary_system, spec)
    assert features.shape == (len(binary_system), 8)

    # Atom 0 is A: its B-channel sums over its B neighbors.
    expected = np.zeros(8)
    for i, j, _, r in nlist.pairs:
        if 0 in (i, j):
            other = j if i == 0 else i
            g, _ = nnp.radial_terms([r], spec)
            channel = binary_system.species[other]
            expected[channel * 4:(channel + 1) * 4] += g[0]
    assert np.allclose(nnp.compute_descriptor(binary_system, 0, nlist, spec),
                       expected)


@pytest.mark.parametrize("seed", range(20))
def test_forces_match_finite_differences(seed):
    symbols = [('Ar',), ('A', 'B')][seed % 2]
    model = tiny_model(symbols=symbols, seed=seed)
    system = random_frame(seed, symbols=symbols)
    _, forces = model.energy_forces(system)
    error = np.max(np.abs(forces - numeric_forces(model, system)))
    assert error <= 1e-5 * max(1.0, np.max(np.abs(forces)))


def test_forces_sum_to_zero(model, ar_system):
    _, forces = model.energy_forces(ar_system)
    assert np.allclose(forces.sum(axis=0), 0.0, atol=1e-10)


def test_translation_invariance(model, ar_system):
    energy, forces = model.energy_forces(ar_system)
    moved_energy, moved_forces = model.energy_forces(
        ar_system.translated([2.5, -13.0, 0.7]))
    assert moved_energy == pytest.approx(energy, abs=1e-10)
    assert np.allclose(moved_forces, forces, atol=1e-10)


def test_permutation_invariance(binary_system):
    model = tiny_model(symbols=('A', 'B'))
    order = np.random.default_rng(0).permutation(len(binary_system))
    energy, forces = model.energy_forces(binary_system)
    p_energy, p_forces = model.energy_forces(binary_system.permuted(order))
    assert p_energy == pytest.approx(energy, abs=1e-10)
    assert np.allclose(p_forces, forces[order], atol=1e-10)


def test_rotation_covariance(model):
    system = cluster()
    rotation = scipy.spatial.transform.Rotation.from_euler(
        'xyz', [0.3, -1.1, 2.0]).as_matrix()
    center = system.cell / 2.0
    rotated = system.replace(
        positions=center + (system.positions - center).dot(rotation.T))

    energy, forces = model.energy_forces(system)
    r_energy, r_forces = model.energy_forces(rotated)
    assert r_energy == pytest.approx(energy, abs=1e-10)
    assert np.max(np.abs(r_forces - forces.dot(rotation.T))) <= 1e-8


def test_descriptor_locality(model):
    local = cluster().positions - 15.0 + 8.0
    positions = np.vstack([local, [[30.0, 30.0, 30.0]]])
    system = AtomicSystem.from_symbols(['Ar'] * 9, positions,
                                       np.full(3, 40.0))
    moved = positions.copy()
    moved[-1] += [1.3, -2.1, 0.4]
    before = nnp.compute_descriptors(system, model.descriptor_spec)
    after = nnp.compute_descriptors(system.replace(positions=moved),
                                    model.descriptor_spec)
    assert np.array_equal(before[:8], after[:8])


def test_size_extensivity(model):
    local = cluster().positions - 15.0 + 8.0
    cell = np.full(3, 40.0)
    single = AtomicSystem.from_symbols(['Ar'] * 8, local, cell)
    double = AtomicSystem.from_symbols(
        ['Ar'] * 16, np.vstack([local, local + [20.0, 0.0, 0.0]]), cell)
    assert model.energy_forces(double)[0] == pytest.approx(
        2 * model.energy_forces(single)[0], rel=1e-9)


def test_isolated_atoms_feel_no_force(model):
    system = AtomicSystem.from_symbols(['Ar', 'Ar'],
                                       [[1, 1, 1], [10, 10, 10]],
                                       np.full(3, 20.0))
    energy, forces = model.energy_forces(system)
    assert not forces.any()
    assert np.isfinite(energy)


def test_unknown_species(model, binary_system):
    with pytest.raises(nnp.UnknownSpecies):
        model.energy_forces(binary_system)


@pytest.mark.parametrize("kwargs", [
    dict(descriptor_layers=[4], fitting_layers=[8], activation='relu'),
    dict(descriptor_layers=[4], fitting_layers=[]),
    dict(descriptor_layers=[0], fitting_layers=[8])])
def test_invalid_network_spec(kwargs):
    with pytest.raises(nnp.InvalidNetworkSpec):
        nnp.NetworkSpec(**kwargs)


def test_weight_count_must_match(model):
    with pytest.raises(nnp.InvalidNetworkSpec):
        nnp.PotentialModel(model.descriptor_spec, model.network_spec,
                           np.zeros(model.n_params + 1), [0.0])


def test_layer_plan(model):
    # 4 radial + 1 one-hot -> 5 -> 6 -> 6 -> 1
    fans = [(l.fan_in, l.fan_out) for l in model.plan]
    assert fans == [(5, 5), (5, 6), (6, 6), (6, 1)]
    assert [l.residual for l in model.plan] == [True, False, True, False]
    assert [l.segment for l in model.plan] == ['descriptor', 'fitting',
                                               'fitting', 'fitting']
    assert model.n_params == 30 + 36 + 42 + 7
    assert model.segment('descriptor') == slice(0, 30)
    assert model.segment('fitting') == slice(30, model.n_params)

    bare = tiny_model(descriptor_layers=())
    assert bare.segment('descriptor') == slice(0, 0)


def test_network_spec_from_config(integration_config):
    spec = nnp.NetworkSpec.from_config(integration_config, 'teacher_model')
    assert spec.descriptor_layers == [8]
    assert spec.fitting_layers == [16, 16]
    assert spec.activation == 'tanh'


def test_init_model_is_seeded(oracle_dataset):
    a, b, c = tiny_model(seed=1), tiny_model(seed=1), tiny_model(seed=2)
    assert np.array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, c.weights)
    assert a.init_seed == 1

    for layer in a.plan:
        limit = np.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        assert np.all(np.abs(a.weights[layer.w_slice]) <= limit)
        assert not a.weights[layer.b_slice].any()

    fitted = tiny_model(frames=oracle_dataset.frames)
    assert fitted.energy_shift[0] == pytest.approx(
        oracle_dataset.energies_per_atom.mean())
    assert np.all(fitted.feature_scale > 0)


def test_fit_energy_shift_by_species():
    spec = nnp.DescriptorSpec(['A', 'B'], cutoff=4.5)
    frames = []
    for n_a, n_b in [(2, 2), (1, 3), (3, 1)]:
        symbols = ['A'] * n_a + ['B'] * n_b
        system = AtomicSystem.from_symbols(symbols, random_frame(
            0, n_atoms=4).positions, np.full(3, 10.0))
        frames.append(LabeledFrame(system, -1.0 * n_a - 2.0 * n_b,
                                   np.zeros((4, 3)), Provenance.HardOracle))
    assert np.allclose(nnp.fit_energy_shift(spec, frames), [-1.0, -2.0])


def test_zero_output_layer_leaves_the_shift(binary_system):
    model = tiny_model(symbols=('A', 'B'))
    model.energy_shift = np.array([-1.5, -2.5])
    output = model.plan[-1]
    model.weights[output.w_slice] = 0.0
    model.weights[output.b_slice] = 0.0
    energy, forces = model.energy_forces(binary_system)
    expected = sum(model.energy_shift[list(model.symbols).index(s)]
                   for s in binary_system.atom_symbols)
    assert energy == pytest.approx(expected, abs=1e-12)
    assert np.all(forces == 0.0)


def test_extract_features(model, ar_system):
    features = nnp.extract_features(model, ar_system)
    assert features.shape == (6,)
    assert np.array_equal(features, nnp.extract_features(model, ar_system))


def test_predict_batch_matches_single_frames(model):
    systems = [random_frame(seed) for seed in range(3)]
    batch = nnp.Batch(model, [nnp.Environment(s, model.descriptor_spec)
                              for s in systems])
    energies, forces, _ = nnp.predict_batch(model, batch)
    for system, energy, force in zip(systems, energies, forces):
        e, f = model.energy_forces(system)
        assert energy == pytest.approx(e, abs=1e-12)
        assert np.allclose(force, f, atol=1e-12)


def test_parameter_vjp_matches_finite_differences():
    model = tiny_model(symbols=('A', 'B'), seed=5)
    systems = [random_frame(seed, symbols=('A', 'B')) for seed in (7, 8)]
    batch = nnp.Batch(model, [nnp.Environment(s, model.descriptor_spec)
                              for s in systems])
    rng = np.random.default_rng(0)
    energy_bar = rng.standard_normal(len(systems))
    force_bar = [rng.standard_normal((len(s), 3)) for s in systems]

    def objective(weights):
        energies, forces, _ = nnp.predict_batch(model, batch, weights)
        return (energy_bar.dot(energies) +
                sum(np.sum(fb * f) for fb, f in zip(force_bar, forces)))

    _, _, state = nnp.predict_batch(model, batch)
    grad = nnp.parameter_vjp(model, batch, state, energy_bar, force_bar)

    h = 1e-6
    numeric = np.zeros(model.n_params)
    for index in range(model.n_params):
        step = np.zeros(model.n_params)
        step[index] = h
        numeric[index] = (objective(model.weights + step) -
                          objective(model.weights - step)) / (2 * h)
    assert np.allclose(grad, numeric, atol=1e-6, rtol=1e-5)


def test_checkpoint_round_trip(model, workspace):
    path = model.save(os.path.join(workspace, "model.kdnnp"))
    loaded = nnp.PotentialModel.load(path)
    assert np.array_equal(loaded.weights, model.weights)
    assert np.array_equal(loaded.feature_scale, model.feature_scale)
    assert loaded.init_seed == model.init_seed
    assert nnp.checkpoint_bytes(loaded) == nnp.checkpoint_bytes(model)

    system = random_frame(0)
    assert loaded.energy_forces(system)[0] == model.energy_forces(system)[0]


def corrupt(blob):
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    return bytes(flipped)


@pytest.mark.parametrize("mangle", [
    corrupt,
    lambda blob: blob[:-20],
    lambda blob: b'NOTMODEL' + blob[8:],
    lambda blob: b''])
def test_corrupt_checkpoint(model, mangle):
    with pytest.raises(nnp.CheckpointError):
        nnp.model_from_bytes(mangle(nnp.checkpoint_bytes(model)))


def test_copy_is_independent(model):
    other = model.copy()
    other.weights[0] += 1.0
    assert other.weights[0] != model.weights[0]
    assert model.copy(np.zeros(model.n_params)).weights.sum() == 0.0
