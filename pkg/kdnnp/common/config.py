"""Pipeline configuration: strict parsing of `[section]` / `key = value`
files, and the `Config` object handed to the driver.

Every accepted key is declared exactly once in `SCHEMA`; the same table
supplies defaults, the jsonschema used for type and range validation, and
the reference text printed by ``manage.py --config-keys``.
"""

import collections
import copy
import hashlib
import json
import logging
import re

import anyconfig
import jsonschema
import yaml

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Base class for configuration failures; carries an optional line."""
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = "line {}: {}".format(line, message)
        super(ConfigError, self).__init__(message)


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


class UnitRangeError(ConfigError):
    pass


class InconsistentConfig(ConfigError):
    pass


REQUIRED = object()

RANGE_VALIDATORS = ('minimum', 'maximum', 'exclusiveMinimum',
                    'exclusiveMaximum', 'minItems')


class Key(object):
    """One declared configuration key.

    Parameters
    ----------
    schema : dict
        jsonschema fragment for the value.

    default : object
        Default value, or REQUIRED.

    unit : str
        Physical unit, '-' for dimensionless.

    help : str
        One-line description.
    """
    def __init__(self, schema, default, unit, help):
        self.schema = schema
        self.default = default
        self.unit = unit
        self.help = help

    @property
    def required(self):
        return self.default is REQUIRED

    @property
    def type_name(self):
        kind = self.schema.get('type', 'enum')
        if kind == 'array':
            return "list[{}]".format(self.schema['items']['type'])
        if 'enum' in self.schema:
            return "|".join(self.schema['enum'])
        return kind


def _num(minimum=None, exclusive=None, maximum=None):
    schema = {'type': 'number'}
    if minimum is not None:
        schema['minimum'] = minimum
    if exclusive is not None:
        schema['exclusiveMinimum'] = exclusive
    if maximum is not None:
        schema['maximum'] = maximum
    return schema


def _int(minimum=None):
    schema = {'type': 'integer'}
    if minimum is not None:
        schema['minimum'] = minimum
    return schema


def _list(items, min_items=0):
    return {'type': 'array', 'items': items, 'minItems': min_items}


BOOL = {'type': 'boolean'}


def _md_plan(temperatures, equilibration, sample_interval, n_samples):
    return collections.OrderedDict([
        ('temperatures', Key(_list(_num(minimum=0), 1), temperatures, 'K',
                             "Thermostat set-points, one MD run each per "
                             "initial system.")),
        ('timestep', Key(_num(exclusive=0), 0.5, 'fs', "MD timestep.")),
        ('equilibration', Key(_int(0), equilibration, 'steps',
                              "Steps discarded before sampling.")),
        ('sample_interval', Key(_int(1), sample_interval, 'steps',
                                "Steps between samples.")),
        ('n_samples', Key(_int(1), n_samples, '-',
                          "Samples kept per run.")),
        ('friction', Key(_num(minimum=0), 0.1, '1/fs',
                         "Langevin friction; 0 runs NVE.")),
    ])


def _training(steps, decay_steps, eval_interval, freeze, lr_start=1e-3):
    return collections.OrderedDict([
        ('steps', Key(_int(0), steps, 'steps', "Optimizer steps.")),
        ('batch_size', Key(_int(1), 4, 'frames', "Frames per step.")),
        ('lr_start', Key(_num(exclusive=0), lr_start, '1/step',
                         "Initial learning rate.")),
        ('lr_end', Key(_num(exclusive=0), 1e-8, '1/step',
                       "Learning rate at the final stair.")),
        ('decay_steps', Key(_int(1), decay_steps, 'steps',
                            "Stair width of the exponential decay.")),
        ('energy_weight', Key(_num(minimum=0), 1.0, '-',
                              "Per-atom energy loss weight.")),
        ('force_weight', Key(_num(minimum=0), 10.0, '-',
                             "Force loss weight.")),
        ('eval_interval', Key(_int(1), eval_interval, 'steps',
                              "Validation interval; best force MAE wins.")),
        ('clip_norm', Key(_num(exclusive=0), 10.0, '-',
                          "Global gradient-norm clip.")),
        ('freeze_descriptor', Key(BOOL, freeze, '-',
                                  "Keep the descriptor-net segment fixed.")),
    ])


def _model(descriptor_layers, fitting_layers):
    return collections.OrderedDict([
        ('descriptor_layers', Key(_list(_int(1)), descriptor_layers, 'nodes',
                                  "Descriptor refinement network widths.")),
        ('fitting_layers', Key(_list(_int(1), 1), fitting_layers, 'nodes',
                               "Fitting network hidden widths.")),
        ('activation', Key({'enum': ['tanh']}, 'tanh', '-',
                           "Hidden-layer nonlinearity.")),
        ('residual', Key(BOOL, True, '-',
                         "Identity skip between equal-width layers.")),
    ])


SCHEMA = collections.OrderedDict([
    ('run', collections.OrderedDict([
        ('seed', Key(_int(0), 0, '-', "Global seed; derived seeds add "
                                      "a task index.")),
    ])),
    ('system', collections.OrderedDict([
        ('species', Key(_list({'type': 'string'}, 1), REQUIRED, '-',
                        "Composition; symbols cycled over lattice sites.")),
        ('n_atoms', Key(_int(1), 64, 'atoms',
                        "Atoms per generated system (4m^3 or m^3).")),
        ('lattice', Key({'enum': ['fcc', 'sc']}, 'fcc', '-',
                        "Generated starting lattice.")),
        ('density', Key(_num(exclusive=0), 1.40, 'g/cm^3',
                        "Base density of the initial systems.")),
        ('density_scales', Key(_list(_num(exclusive=0), 1), [0.95, 1.05],
                               '-', "One initial system per relative "
                                    "density scale.")),
        ('initial', Key(_list({'type': 'string'}), [], '-',
                        "Extended-XYZ structures used instead of the "
                        "generated lattice.")),
        ('masses', Key({'type': 'object',
                        'additionalProperties': _num(exclusive=0)},
                       {}, 'amu', "Extra or overriding species masses.")),
    ])),
    ('oracle', collections.OrderedDict([
        ('epsilon', Key(_list(_num(exclusive=0), 1), REQUIRED, 'eV',
                        "LJ well depth per species (Lorentz-Berthelot).")),
        ('sigma', Key(_list(_num(exclusive=0), 1), REQUIRED, 'A',
                      "LJ diameter per species (Lorentz-Berthelot).")),
        ('c6', Key(_list(_num(minimum=0)), [], 'eV*A^6',
                   "Dispersion C6 per species (geometric mean); "
                   "empty means 4*eps*sigma^6.")),
        ('cutoff', Key(_num(exclusive=0), 6.0, 'A', "Pair cutoff.")),
        ('shift', Key(BOOL, True, '-', "Shift pair energy to 0 at cutoff.")),
        ('dispersion_scale', Key(_num(minimum=0), 1.0, '-',
                                 "Ground-truth dispersion tail factor d.")),
    ])),
    ('teacher_truth', collections.OrderedDict([
        ('dispersion_scale', Key(_num(minimum=0), 0.0, '-',
                                 "Dispersion factor of the teacher truth.")),
        ('softening_threshold', Key(_num(minimum=0), 0.0, 'eV',
                                    "U0 above the reference minimum.")),
        ('softening_factor', Key(_num(exclusive=0, maximum=1), 0.5, '-',
                                 "Slope s of the softened branch.")),
        ('relax_perturbation', Key(_num(minimum=0), 0.05, 'A',
                                   "Random displacement before relaxing "
                                   "the reference structure.")),
    ])),
    ('descriptor', collections.OrderedDict([
        ('cutoff', Key(_num(exclusive=0), 6.0, 'A', "Descriptor cutoff.")),
        ('n_radial', Key(_int(1), 8, '-', "Gaussian centres per channel.")),
        ('r_min', Key(_num(minimum=0), 0.5, 'A', "First Gaussian centre.")),
    ])),
    ('teacher_model', _model([50, 100], [480, 480, 480])),
    ('student_model', _model([25, 50, 100], [240, 240, 240])),
    ('teacher_data', _md_plan([60.0, 100.0, 140.0, 180.0], 1000, 50, 250)),
    ('soft_targets', _md_plan([80.0, 100.0, 120.0], 2000, 100, 500)),
    ('teacher_training', _training(50000, 500, 1000, False)),
    ('soft_training', _training(50000, 500, 1000, False)),
    ('finetune', _training(20000, 200, 500, True, lr_start=1e-4)),
    ('teacher_finetune', _training(20000, 200, 500, False, lr_start=1e-4)),
    ('scratch', _training(50000, 500, 1000, False)),
    ('split', collections.OrderedDict([
        ('ratio', Key({'type': 'number', 'exclusiveMinimum': 0,
                       'exclusiveMaximum': 1}, 0.8, '-',
                      "Train fraction of every train/validation split.")),
    ])),
    ('screening', collections.OrderedDict([
        ('n_hard_targets', Key(_int(1), 150, 'frames',
                               "Frames relabeled by the oracle.")),
        ('mode', Key({'enum': ['fps', 'random']}, 'fps', '-',
                     "Hard-target selection rule.")),
        ('random_seed', Key(_int(0), 0, '-', "Seed of random selection.")),
    ])),
    ('production', collections.OrderedDict([
        ('temperatures', Key(_list(_num(minimum=0)), [], 'K',
                             "NVT production set-points; empty means the "
                             "lowest soft-target temperature.")),
        ('timestep', Key(_num(exclusive=0), 0.5, 'fs', "MD timestep.")),
        ('equilibration', Key(_int(0), 2000, 'steps',
                              "Steps discarded before sampling.")),
        ('sample_interval', Key(_int(1), 20, 'steps',
                                "Steps between samples.")),
        ('n_samples', Key(_int(2), 1000, '-', "Samples kept per run.")),
        ('friction', Key(_num(minimum=0), 0.01, '1/fs',
                         "Langevin friction.")),
        ('fit_start', Key(_num(minimum=0, maximum=1), 0.2, '-',
                          "Diffusion fit window start (fraction of lag).")),
        ('fit_end', Key(_num(minimum=0, maximum=1), 0.8, '-',
                        "Diffusion fit window end (fraction of lag).")),
    ])),
    ('timing', collections.OrderedDict([
        ('sizes', Key(_list(_int(1), 1), [64, 256, 500], 'atoms',
                      "System sizes timed.")),
        ('n_steps', Key(_int(1), 1000, 'steps', "MD steps per trial.")),
        ('trials', Key(_int(1), 5, '-', "Trials averaged per size.")),
        ('timestep', Key(_num(exclusive=0), 0.5, 'fs', "MD timestep.")),
    ])),
    ('analysis', collections.OrderedDict([
        ('n_bins', Key(_int(1), 40, '-', "Energy histogram bins.")),
    ])),
])


SECTION_RE = re.compile(r'^\s*\[\s*([A-Za-z0-9_\-]+)\s*\]')
KEY_RE = re.compile(r'^\s*([A-Za-z0-9_\-]+)\s*=')
LINE_RE = re.compile(r'line (\d+)')


def locate_keys(text):
    """Map (section, key) -> 1-based line number; sections map to
    (section, None)."""
    lines = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        match = SECTION_RE.match(line)
        if match:
            section = match.group(1)
            lines.setdefault((section, None), lineno)
            continue
        match = KEY_RE.match(line)
        if match:
            lines.setdefault((section, match.group(1)), lineno)
    return lines


def defaults():
    """Nested dict of every non-required default."""
    return {section: {name: copy.deepcopy(key.default)
                      for name, key in keys.items() if not key.required}
            for section, keys in SCHEMA.items()}


def _check_value(section, name, value, line):
    key = SCHEMA[section][name]
    validator = jsonschema.Draft7Validator(key.schema)
    errors = list(validator.iter_errors(value))
    if not errors:
        return
    err = errors[0]
    where = "{}.{} = {!r}".format(section, name, value)
    if err.validator in RANGE_VALIDATORS:
        raise UnitRangeError("{} out of range ({}): {}".format(
            where, key.unit, err.message), line)
    raise ParseError("{} has the wrong type: {}".format(where, err.message),
                     line)


def _check_consistency(data, lines):
    n_species = len(set(data['system']['species']))
    for name in ('epsilon', 'sigma'):
        if len(data['oracle'][name]) != n_species:
            raise InconsistentConfig(
                "oracle.{} needs one value per species ({})".format(
                    name, n_species), lines.get(('oracle', name)))
    if data['oracle']['c6'] and len(data['oracle']['c6']) != n_species:
        raise InconsistentConfig(
            "oracle.c6 needs one value per species ({})".format(n_species),
            lines.get(('oracle', 'c6')))

    production = data['production']
    if production['fit_start'] >= production['fit_end']:
        raise UnitRangeError("production.fit_start must be below fit_end",
                             lines.get(('production', 'fit_start')))

    plan = data['soft_targets']
    n_systems = (max(len(data['system']['initial']), 1) *
                 len(data['system']['density_scales']))
    n_soft = n_systems * len(plan['temperatures']) * plan['n_samples']
    n_train = int(data['split']['ratio'] * n_soft + 0.5)
    if data['screening']['n_hard_targets'] > n_train:
        raise InconsistentConfig(
            "screening.n_hard_targets ({}) exceeds the soft-target training "
            "split ({})".format(data['screening']['n_hard_targets'], n_train),
            lines.get(('screening', 'n_hard_targets')))


def parse_string(text, source="<string>"):
    """Parse and validate configuration text.

    Parameters
    ----------
    text : str
        TOML-style configuration.

    source : str
        Name used in log messages.

    Returns
    -------
    config : Config
        Fully populated with defaults.

    Raises
    ------
    ParseError, UnknownKey, MissingRequired, UnitRangeError,
    InconsistentConfig
    """
    try:
        raw = anyconfig.loads(text, ac_parser='toml')
    except Exception as err:
        line = getattr(err, 'lineno', None)
        if line is None:
            match = LINE_RE.search(str(err))
            line = int(match.group(1)) if match else None
        raise ParseError("{}: {}".format(source, err), line)

    raw = raw or {}
    lines = locate_keys(text)
    data = defaults()

    for section, values in raw.items():
        if section not in SCHEMA or not isinstance(values, dict):
            raise UnknownKey("unknown section [{}]".format(section),
                             lines.get((section, None),
                                       lines.get((None, section))))
        for name, value in values.items():
            line = lines.get((section, name))
            if name not in SCHEMA[section]:
                raise UnknownKey("unknown key {}.{}".format(section, name),
                                 line)
            if isinstance(value, dict):
                value = dict(value)
            _check_value(section, name, value, line)
            data[section][name] = value

    for section, keys in SCHEMA.items():
        for name, key in keys.items():
            if key.required and name not in data[section]:
                raise MissingRequired(
                    "missing required key {}.{}".format(section, name))

    _check_consistency(data, lines)
    logger.debug("Parsed config from {}".format(source))
    return Config(data)


def parse_config(path):
    """Strictly parse the configuration file at `path`."""
    with open(path) as fh:
        text = fh.read()
    return parse_string(text, source=path)


def config_reference():
    """Human-readable listing of every key with type, unit and default."""
    rows = []
    for section, keys in SCHEMA.items():
        rows.append("[{}]".format(section))
        for name, key in keys.items():
            default = "(required)" if key.required else json.dumps(
                key.default)
            rows.append("  {:<22} {:<14} {:<8} {:<22} {}".format(
                name, key.type_name, key.unit, default, key.help))
        rows.append("")
    return "\n".join(rows)


class Config(object):
    """Validated configuration with hierarchical indexing.

    config = {
        "fred": {
            "bob": 10
        }
    }
    config["fred/bob"] will get you the value 10.
    """
    def __init__(self, data):
        self.data = data

    @classmethod
    def load(cls, path):
        return parse_config(path)

    def get(self, key, default=None):
        node = self.data
        for segment in key.split('/'):
            if not isinstance(node, dict) or segment not in node:
                return default
            node = node[segment]
        return node

    def __getitem__(self, key):
        return self.get(key)

    def __bool__(self):
        return bool(self.data)

    def with_seed(self, seed):
        """Copy with run.seed replaced."""
        data = copy.deepcopy(self.data)
        data['run']['seed'] = int(seed)
        return Config(data)

    def digest(self):
        """sha256 of the canonical JSON dump."""
        blob = json.dumps(self.data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(blob.encode('utf-8')).hexdigest()

    def save(self, path):
        with open(path, 'w') as fh:
            yaml.safe_dump(self.data, fh, default_flow_style=False)
