"""Neural-network interatomic potential.

Each atom is described by Gaussian radial symmetry functions per neighbor
species, with a cosine cutoff. The normalized features, concatenated with
a one-hot of the centre species, pass through a descriptor-refinement
network and then a fitting network that outputs the atomic energy. The
total energy is the sum of atomic energies plus a per-species shift.

All derivatives are written out by hand:

* forces: reverse pass through the networks, then the chain rule through
  the radial functions;
* parameter gradients of a force loss: a forward tangent pass along the
  descriptor direction picked out by the force residual, followed by a
  joint reverse pass over the primal and tangent computations.
"""

import collections
import hashlib
import json
import logging
import struct

import numpy as np

import kdnnp.common.utils as utils
from kdnnp.data.system import build_neighbor_list

logger = logging.getLogger(__name__)

ACTIVATIONS = ('tanh',)
MAGIC = b'KDNNPMDL'
FORMAT_VERSION = 1
MIN_FEATURE_SCALE = 1e-8


class UnknownSpecies(Exception):
    pass


class InvalidNetworkSpec(Exception):
    pass


class CheckpointError(Exception):
    pass


def default_radial_grid(cutoff, n_radial=8, r_min=0.5):
    """(eta, r_s) pairs: r_s uniform on [r_min, cutoff], eta = 4/spacing^2.
    """
    centres = np.linspace(r_min, cutoff, n_radial)
    spacing = (cutoff - r_min) / max(n_radial - 1, 1)
    eta = np.full(n_radial, 4.0 / spacing ** 2)
    return np.stack([eta, centres], axis=1)


class DescriptorSpec(object):
    """Radial descriptor layout.

    Parameters
    ----------
    symbols : list of str
        Species channels, in order.

    cutoff : float
        A.

    radial_grid : array-like, shape=(K, 2) or None
        (eta [A^-2], r_s [A]) per Gaussian; the default grid if None.
    """
    def __init__(self, symbols, cutoff=6.0, radial_grid=None, n_radial=8,
                 r_min=0.5):
        self.symbols = list(symbols)
        self.cutoff = float(cutoff)
        if radial_grid is None:
            radial_grid = default_radial_grid(self.cutoff, n_radial, r_min)
        self.radial_grid = np.asarray(radial_grid, dtype=float).reshape(-1, 2)

    @property
    def eta(self):
        return self.radial_grid[:, 0]

    @property
    def r_s(self):
        return self.radial_grid[:, 1]

    @property
    def n_species(self):
        return len(self.symbols)

    @property
    def n_radial(self):
        return len(self.radial_grid)

    @property
    def n_features(self):
        return self.n_radial * self.n_species

    def to_dict(self):
        return dict(symbols=self.symbols, cutoff=self.cutoff,
                    radial_grid=self.radial_grid.tolist())

    @classmethod
    def from_dict(cls, data):
        return cls(data['symbols'], data['cutoff'],
                   radial_grid=data['radial_grid'])


class NetworkSpec(object):
    """Widths of the descriptor-refinement and fitting networks."""
    def __init__(self, descriptor_layers, fitting_layers, activation='tanh',
                 residual_connections=True):
        if activation not in ACTIVATIONS:
            raise InvalidNetworkSpec(
                "Unsupported activation: {}".format(activation))
        if not fitting_layers:
            raise InvalidNetworkSpec("The fitting network needs a layer.")
        self.descriptor_layers = [int(n) for n in descriptor_layers]
        self.fitting_layers = [int(n) for n in fitting_layers]
        if min(self.descriptor_layers + self.fitting_layers) < 1:
            raise InvalidNetworkSpec("Layer widths must be positive.")
        self.activation = activation
        self.residual_connections = bool(residual_connections)

    def to_dict(self):
        return dict(descriptor_layers=self.descriptor_layers,
                    fitting_layers=self.fitting_layers,
                    activation=self.activation,
                    residual_connections=self.residual_connections)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def from_config(cls, config, section):
        return cls(config[section + '/descriptor_layers'],
                   config[section + '/fitting_layers'],
                   activation=config[section + '/activation'],
                   residual_connections=config[section + '/residual'])


Layer = collections.namedtuple(
    'Layer', ['segment', 'fan_in', 'fan_out', 'residual', 'w_slice',
              'b_slice'])


def layer_plan(descriptor_spec, network_spec):
    """Ordered layers with their slices of the flat parameter vector."""
    widths = ([descriptor_spec.n_features + descriptor_spec.n_species] +
              network_spec.descriptor_layers + network_spec.fitting_layers +
              [1])
    n_desc = len(network_spec.descriptor_layers)
    n_hidden = n_desc + len(network_spec.fitting_layers)

    plan = []
    offset = 0
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        segment = 'descriptor' if index < n_desc else 'fitting'
        residual = (network_spec.residual_connections and
                    index < n_hidden and fan_in == fan_out)
        w_slice = slice(offset, offset + fan_in * fan_out)
        offset += fan_in * fan_out
        b_slice = slice(offset, offset + fan_out)
        offset += fan_out
        plan.append(Layer(segment, fan_in, fan_out, residual, w_slice,
                          b_slice))
    return plan


class PotentialModel(object):
    """Descriptor spec, network spec and the flat parameter vector.

    The descriptor-net segment holds every layer of the descriptor
    refinement network and precedes the fitting-net segment.
    """
    def __init__(self, descriptor_spec, network_spec, weights, energy_shift,
                 feature_shift=None, feature_scale=None, init_seed=None):
        self.descriptor_spec = descriptor_spec
        self.network_spec = network_spec
        self.plan = layer_plan(descriptor_spec, network_spec)
        self.weights = np.asarray(weights, dtype=float)
        if len(self.weights) != self.n_params:
            raise InvalidNetworkSpec("Expected {} parameters, got {}".format(
                self.n_params, len(self.weights)))

        n_features = descriptor_spec.n_features
        self.energy_shift = np.asarray(energy_shift, dtype=float)
        self.feature_shift = (np.zeros(n_features) if feature_shift is None
                              else np.asarray(feature_shift, dtype=float))
        self.feature_scale = (np.ones(n_features) if feature_scale is None
                              else np.asarray(feature_scale, dtype=float))
        self.init_seed = init_seed

    @property
    def n_params(self):
        return self.plan[-1].b_slice.stop

    @property
    def symbols(self):
        return self.descriptor_spec.symbols

    def segment(self, name):
        """Slice of the flat vector holding segment `name`."""
        layers = [layer for layer in self.plan if layer.segment == name]
        if not layers:
            start = self.plan[0].w_slice.start if name == 'descriptor' \
                else self.n_params
            return slice(start, start)
        return slice(layers[0].w_slice.start, layers[-1].b_slice.stop)

    def layers(self, vector=None):
        """(W, b, residual) views into `vector` (default: the weights)."""
        vector = self.weights if vector is None else vector
        return [(vector[l.w_slice].reshape(l.fan_in, l.fan_out),
                 vector[l.b_slice], l.residual) for l in self.plan]

    def copy(self, weights=None):
        return PotentialModel(
            self.descriptor_spec, self.network_spec,
            (self.weights if weights is None else weights).copy(),
            self.energy_shift.copy(), self.feature_shift.copy(),
            self.feature_scale.copy(), init_seed=self.init_seed)

    def energy_forces(self, system):
        return model_energy_forces(self, system)

    def save(self, path):
        save_checkpoint(self, path)
        return path

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)

    def __repr__(self):
        return "<PotentialModel {} desc={} fit={} params={}>".format(
            self.symbols, self.network_spec.descriptor_layers,
            self.network_spec.fitting_layers, self.n_params)


def cutoff_function(r, cutoff):
    """fc(r) = (cos(pi r / rc) + 1) / 2 below rc, else 0; and dfc/dr."""
    inside = r < cutoff
    arg = np.pi * r / cutoff
    fc = np.where(inside, 0.5 * (np.cos(arg) + 1.0), 0.0)
    dfc = np.where(inside, -0.5 * np.pi / cutoff * np.sin(arg), 0.0)
    return fc, dfc


def radial_terms(r, descriptor_spec):
    """Gaussian radial functions g_k(r) fc(r) and their r-derivatives.

    Returns
    -------
    g, dg : np.ndarray, shape=(M, K)
    """
    r = np.asarray(r, dtype=float)[:, None]
    eta, r_s = descriptor_spec.eta[None, :], descriptor_spec.r_s[None, :]
    gauss = np.exp(-eta * (r - r_s) ** 2)
    fc, dfc = cutoff_function(r, descriptor_spec.cutoff)
    g = gauss * fc
    dg = gauss * (dfc - 2.0 * eta * (r - r_s) * fc)
    return g, dg


class Environment(object):
    """Per-system data reused by energy, force and gradient evaluations.

    Attributes
    ----------
    kinds : np.ndarray of int, shape=(N,)
        Model species index per atom.
    features : np.ndarray, shape=(N, F)
        Raw radial features.
    first, second : np.ndarray of int, shape=(M,)
    unit : np.ndarray, shape=(M, 3)
        Unit vectors from `first` to `second`.
    g, dg : np.ndarray, shape=(M, K)
    """
    def __init__(self, system, descriptor_spec, neighbor_list=None):
        try:
            lookup = [descriptor_spec.symbols.index(s)
                      for s in system.symbols]
        except ValueError:
            raise UnknownSpecies("Model species {} do not cover {}".format(
                descriptor_spec.symbols, list(system.symbols)))
        self.n_atoms = len(system)
        self.kinds = np.asarray(lookup, dtype=np.int64)[system.species]
        self.n_radial = descriptor_spec.n_radial
        self.n_features = descriptor_spec.n_features

        if neighbor_list is None:
            neighbor_list = build_neighbor_list(system,
                                                descriptor_spec.cutoff)
        self.first = neighbor_list.first
        self.second = neighbor_list.second
        r = neighbor_list.distances
        self.unit = (neighbor_list.displacements / r[:, None]
                     if len(r) else np.zeros((0, 3)))
        self.g, self.dg = radial_terms(r, descriptor_spec)

        # Row i receives channel kind(j); row j receives channel kind(i).
        k = np.arange(self.n_radial)[None, :]
        self.cols_first = self.kinds[self.second][:, None] * self.n_radial + k
        self.cols_second = self.kinds[self.first][:, None] * self.n_radial + k

        self.features = np.zeros((self.n_atoms, self.n_features))
        np.add.at(self.features, (self.first[:, None], self.cols_first),
                  self.g)
        np.add.at(self.features, (self.second[:, None], self.cols_second),
                  self.g)

    def features_backward(self, grad_features):
        """dE/dG (N, F) -> dE/dpositions (N, 3)."""
        grad = np.zeros((self.n_atoms, 3))
        if len(self.first) == 0:
            return grad
        weight = (grad_features[self.first[:, None], self.cols_first] +
                  grad_features[self.second[:, None], self.cols_second])
        scalar = np.sum(weight * self.dg, axis=1)
        along = scalar[:, None] * self.unit
        np.add.at(grad, self.second, along)
        np.add.at(grad, self.first, -along)
        return grad

    def features_jvp(self, direction):
        """Directional derivative of G along positions `direction` (N, 3)."""
        out = np.zeros((self.n_atoms, self.n_features))
        if len(self.first) == 0:
            return out
        projected = np.sum(self.unit * (direction[self.second] -
                                        direction[self.first]), axis=1)
        change = self.dg * projected[:, None]
        np.add.at(out, (self.first[:, None], self.cols_first), change)
        np.add.at(out, (self.second[:, None], self.cols_second), change)
        return out


def compute_descriptor(system, atom_index, neighbor_list, descriptor_spec):
    """Radial feature vector of one atom.

    feature[t*K + k] = sum over neighbors j of species t of
    exp(-eta_k (r_ij - r_s,k)^2) fc(r_ij).
    """
    environment = Environment(system, descriptor_spec, neighbor_list)
    return environment.features[atom_index].copy()


def compute_descriptors(system, descriptor_spec):
    """Radial features of every atom, shape (N, F)."""
    return Environment(system, descriptor_spec).features


def network_inputs(model, environment):
    normalized = ((environment.features - model.feature_shift) /
                  model.feature_scale)
    onehot = np.eye(model.descriptor_spec.n_species)[environment.kinds]
    return np.concatenate([normalized, onehot], axis=1)


def forward(layers, x):
    """Primal pass.

    Returns
    -------
    hidden : list of np.ndarray
        hidden[l] is the input of layer l; hidden[-1] feeds the output layer.
    acts : list of np.ndarray
        tanh outputs of the hidden layers.
    atomic : np.ndarray, shape=(N,)
    """
    hidden, acts = [x], []
    h = x
    for W, b, residual in layers[:-1]:
        a = np.tanh(h.dot(W) + b)
        h = a + h if residual else a
        acts.append(a)
        hidden.append(h)
    W, b, _ = layers[-1]
    return hidden, acts, h.dot(W[:, 0]) + b[0]


def input_gradient(layers, acts, upstream):
    """d(sum_i upstream_i * e_i)/dx, shape (N, D0)."""
    W, _, _ = layers[-1]
    g = upstream[:, None] * W[:, 0][None, :]
    for (W, _, residual), a in reversed(list(zip(layers[:-1], acts))):
        gz = g * (1.0 - a * a)
        g = gz.dot(W.T) + g if residual else gz.dot(W.T)
    return g


def tangent(layers, acts, direction):
    """Forward-mode pass along input direction; returns (hdots, zdots)."""
    hdots, zdots = [direction], []
    hd = direction
    for (W, _, residual), a in zip(layers[:-1], acts):
        zd = hd.dot(W)
        ad = (1.0 - a * a) * zd
        hd = ad + hd if residual else ad
        zdots.append(zd)
        hdots.append(hd)
    return hdots, zdots


def joint_reverse(layers, grad_layers, hidden, acts, hdots, zdots,
                  atom_bar, tangent_bar):
    """Accumulate parameter gradients of
    sum_i atom_bar_i * e_i + tangent_bar_i * edot_i into `grad_layers`."""
    W, _, _ = layers[-1]
    gW, gb, _ = grad_layers[-1]
    gW[:, 0] += hidden[-1].T.dot(atom_bar) + hdots[-1].T.dot(tangent_bar)
    gb[0] += atom_bar.sum()
    hbar = atom_bar[:, None] * W[:, 0][None, :]
    hdbar = tangent_bar[:, None] * W[:, 0][None, :]

    for index in reversed(range(len(layers) - 1)):
        W, _, residual = layers[index]
        gW, gb, _ = grad_layers[index]
        a = acts[index]
        slope = 1.0 - a * a
        zdbar = slope * hdbar
        abar = hbar - 2.0 * a * (zdots[index] * hdbar)
        zbar = slope * abar
        gW += hidden[index].T.dot(zbar) + hdots[index].T.dot(zdbar)
        gb += zbar.sum(axis=0)
        if index == 0:
            break
        if residual:
            hbar = zbar.dot(W.T) + hbar
            hdbar = zdbar.dot(W.T) + hdbar
        else:
            hbar = zbar.dot(W.T)
            hdbar = zdbar.dot(W.T)


def model_energy_forces(model, system, environment=None):
    """Total energy (eV) and forces (eV/A).

    Raises
    ------
    UnknownSpecies
        If the system holds a species the model was not built for.
    """
    if environment is None:
        environment = Environment(system, model.descriptor_spec)
    layers = model.layers()
    _, acts, atomic = forward(layers, network_inputs(model, environment))
    energy = float(np.sum(atomic) +
                   np.sum(model.energy_shift[environment.kinds]))

    grad_x = input_gradient(layers, acts, np.ones(environment.n_atoms))
    n_features = environment.n_features
    grad_features = grad_x[:, :n_features] / model.feature_scale
    forces = -environment.features_backward(grad_features)
    return energy, forces


def extract_features(model, system):
    """Mean over atoms of the last fitting hidden layer."""
    environment = Environment(system, model.descriptor_spec)
    hidden, _, _ = forward(model.layers(), network_inputs(model, environment))
    return hidden[-1].mean(axis=0)


class Batch(object):
    """Several frames' environments evaluated as one block of atoms."""
    def __init__(self, model, environments):
        self.environments = list(environments)
        self.sizes = np.array([env.n_atoms for env in self.environments])
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.frame_of_atom = np.repeat(np.arange(len(self.sizes)),
                                       self.sizes)
        self.inputs = np.concatenate(
            [network_inputs(model, env) for env in self.environments])
        self.kinds = np.concatenate([env.kinds for env in self.environments])

    def __len__(self):
        return len(self.environments)

    def split_atoms(self, array):
        return [array[self.offsets[i]:self.offsets[i + 1]]
                for i in range(len(self))]


def predict_batch(model, batch, weights=None):
    """Energies (B,) and per-frame forces for a batch.

    Returns
    -------
    energies : np.ndarray, shape=(B,)
    forces : list of np.ndarray
    state : tuple
        Cached activations for `parameter_vjp`.
    """
    layers = model.layers(weights)
    hidden, acts, atomic = forward(layers, batch.inputs)
    energies = (np.bincount(batch.frame_of_atom, weights=atomic,
                            minlength=len(batch)) +
                np.bincount(batch.frame_of_atom,
                            weights=model.energy_shift[batch.kinds],
                            minlength=len(batch)))
    grad_x = input_gradient(layers, acts, np.ones(len(batch.inputs)))
    n_features = model.descriptor_spec.n_features
    grad_features = batch.split_atoms(
        grad_x[:, :n_features] / model.feature_scale)
    forces = [-env.features_backward(g)
              for env, g in zip(batch.environments, grad_features)]
    return energies, forces, (layers, hidden, acts)


def parameter_vjp(model, batch, state, energy_bar, force_bar):
    """Gradient of sum_f energy_bar_f E_f + sum force_bar . F in the
    flat parameter space.

    Parameters
    ----------
    energy_bar : np.ndarray, shape=(B,)
    force_bar : list of np.ndarray, each (N_f, 3)
    """
    layers, hidden, acts = state
    n_features = model.descriptor_spec.n_features
    direction = np.zeros_like(batch.inputs)
    direction[:, :n_features] = np.concatenate(
        [env.features_jvp(v) for env, v in
         zip(batch.environments, force_bar)]) / model.feature_scale

    hdots, zdots = tangent(layers, acts, direction)
    grad = np.zeros(model.n_params)
    joint_reverse(layers, model.layers(grad), hidden, acts, hdots, zdots,
                  np.asarray(energy_bar, dtype=float)[batch.frame_of_atom],
                  -np.ones(len(batch.inputs)))
    return grad


def feature_statistics(descriptor_spec, systems):
    """Per-feature mean and scale over all atoms of `systems`."""
    features = np.concatenate([compute_descriptors(s, descriptor_spec)
                               for s in systems])
    scale = features.std(axis=0)
    scale[scale < MIN_FEATURE_SCALE] = 1.0
    return features.mean(axis=0), scale


def fit_energy_shift(descriptor_spec, frames):
    """Least-squares per-species atomic energy from labeled frames.

    Per-atom energies are regressed on composition fractions; with one
    species this is the mean per-atom energy.
    """
    symbols = descriptor_spec.symbols
    fractions = np.zeros((len(frames), len(symbols)))
    for row, frame in enumerate(frames):
        system = frame.system
        for symbol, count in zip(*np.unique(system.atom_symbols,
                                            return_counts=True)):
            if symbol not in symbols:
                raise UnknownSpecies("No channel for {}".format(symbol))
            fractions[row, symbols.index(symbol)] = count / float(len(system))
    targets = np.array([f.energy_per_atom for f in frames])
    return np.linalg.lstsq(fractions, targets, rcond=None)[0]


def init_model(descriptor_spec, network_spec, seed, frames=None):
    """A freshly initialized model.

    Weights are Glorot-uniform in +-sqrt(6 / (fan_in + fan_out)), drawn
    layer by layer from `numpy.random.default_rng(seed)`; biases are 0.
    With `frames` (LabeledFrames), the energy shift and the feature
    normalization are fit to them; otherwise they are 0 and identity.
    """
    rng = utils.make_rng(seed)
    plan = layer_plan(descriptor_spec, network_spec)
    weights = np.zeros(plan[-1].b_slice.stop)
    for layer in plan:
        limit = np.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        weights[layer.w_slice] = rng.uniform(
            -limit, limit, layer.fan_in * layer.fan_out)

    energy_shift = np.zeros(descriptor_spec.n_species)
    feature_shift = feature_scale = None
    if frames:
        energy_shift = fit_energy_shift(descriptor_spec, frames)
        feature_shift, feature_scale = feature_statistics(
            descriptor_spec, [f.system for f in frames])

    model = PotentialModel(descriptor_spec, network_spec, weights,
                           energy_shift, feature_shift, feature_scale,
                           init_seed=int(seed))
    logger.debug("Initialized {} (seed {})".format(model, seed))
    return model


def _header(model):
    return json.dumps(dict(
        format='kdnnp-potential',
        descriptor=model.descriptor_spec.to_dict(),
        network=model.network_spec.to_dict(),
        init_seed=model.init_seed,
        n_weights=model.n_params,
        n_species=model.descriptor_spec.n_species,
        n_features=model.descriptor_spec.n_features), sort_keys=True)


def checkpoint_bytes(model):
    """Serialized model: magic, version, JSON header, float64 payload,
    64-bit blake2b checksum."""
    header = _header(model).encode('utf-8')
    payload = np.concatenate([model.weights, model.energy_shift,
                              model.feature_shift, model.feature_scale])
    body = b''.join([
        MAGIC, struct.pack('<I', FORMAT_VERSION),
        struct.pack('<Q', len(header)), header,
        struct.pack('<Q', len(payload)),
        np.asarray(payload, dtype='<f8').tobytes()])
    checksum = hashlib.blake2b(body, digest_size=8).digest()
    return body + checksum


def save_checkpoint(model, path):
    with open(path, 'wb') as fh:
        fh.write(checkpoint_bytes(model))
    logger.debug("Wrote checkpoint {}".format(path))


def _take(blob, cursor, size):
    if cursor + size > len(blob):
        raise CheckpointError("Checkpoint is truncated.")
    return blob[cursor:cursor + size], cursor + size


def model_from_bytes(blob):
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CheckpointError("Not a model checkpoint.")
    body, checksum = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != checksum:
        raise CheckpointError("Checkpoint checksum mismatch.")

    cursor = len(MAGIC)
    raw, cursor = _take(body, cursor, 4)
    version = struct.unpack('<I', raw)[0]
    if version != FORMAT_VERSION:
        raise CheckpointError("Unsupported checkpoint version {}".format(
            version))
    raw, cursor = _take(body, cursor, 8)
    raw, cursor = _take(body, cursor, struct.unpack('<Q', raw)[0])
    header = json.loads(raw.decode('utf-8'))
    raw, cursor = _take(body, cursor, 8)
    n_values = struct.unpack('<Q', raw)[0]
    raw, cursor = _take(body, cursor, 8 * n_values)
    if cursor != len(body):
        raise CheckpointError("Trailing bytes in checkpoint.")
    values = np.frombuffer(raw, dtype='<f8').astype(float)

    descriptor_spec = DescriptorSpec.from_dict(header['descriptor'])
    network_spec = NetworkSpec.from_dict(header['network'])
    n_weights = header['n_weights']
    n_species = header['n_species']
    n_features = header['n_features']
    if n_values != n_weights + n_species + 2 * n_features:
        raise CheckpointError("Payload length does not match the header.")
    bounds = np.cumsum([n_weights, n_species, n_features])
    weights, shift, f_shift, f_scale = np.split(values, bounds)
    return PotentialModel(descriptor_spec, network_spec, weights, shift,
                          f_shift, f_scale, init_seed=header['init_seed'])


def load_checkpoint(path):
    with open(path, 'rb') as fh:
        return model_from_bytes(fh.read())
