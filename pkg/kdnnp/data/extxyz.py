"""Minimal extended-XYZ reader/writer.

A frame is line 1: atom count; line 2: ``key=value`` pairs, including a
``Properties=name:TYPE:ncols:...`` column layout; then one line per atom.
Floats are written as the shortest decimal that round-trips.
"""

import collections
import logging
import shlex

import numpy as np

logger = logging.getLogger(__name__)


class ExtXYZError(Exception):
    pass


CONVERTERS = {
    'R': float,
    'I': int,
    'S': str,
}


def format_value(value):
    """Header value as text; floats use repr, sequences join with spaces."""
    if isinstance(value, (list, tuple, np.ndarray)):
        text = " ".join(format_value(v) for v in value)
    elif isinstance(value, (bool, np.bool_)):
        text = 'T' if value else 'F'
    elif isinstance(value, (float, np.floating)):
        text = repr(float(value))
    else:
        text = str(value)

    if not text or any(c.isspace() for c in text) or '=' in text:
        text = '"{}"'.format(text)
    return text


def format_header(info, columns):
    """Comment line for `info` with the layout of `columns`.

    Parameters
    ----------
    info : OrderedDict
        Scalar or sequence header values.

    columns : OrderedDict
        name -> (type code in 'RIS', np.ndarray of shape (N,) or (N, k))
    """
    layout = []
    for name, (code, values) in columns.items():
        ncols = 1 if np.ndim(values) == 1 else np.shape(values)[1]
        layout.append("{}:{}:{}".format(name, code, ncols))
    fields = ["Properties={}".format(":".join(layout))]
    fields += ["{}={}".format(key, format_value(value))
               for key, value in info.items()]
    return " ".join(fields)


def parse_header(line):
    """Comment line -> OrderedDict of raw string values."""
    info = collections.OrderedDict()
    try:
        tokens = shlex.split(line)
    except ValueError as err:
        raise ExtXYZError("Malformed header: {}".format(err))
    for token in tokens:
        if '=' not in token:
            raise ExtXYZError("Header token without '=': {}".format(token))
        key, value = token.split('=', 1)
        info[key] = value
    return info


def parse_properties(prop_str):
    """'species:S:1:pos:R:3' -> [('species', 'S', 1), ('pos', 'R', 3)]"""
    fields = prop_str.split(':')
    if len(fields) % 3:
        raise ExtXYZError("Bad Properties string: {}".format(prop_str))
    layout = []
    for name, code, ncols in zip(fields[::3], fields[1::3], fields[2::3]):
        if code not in CONVERTERS:
            raise ExtXYZError('Unknown property type: ' + code)
        layout.append((name, code, int(ncols)))
    return layout


def _format_cell(code, value):
    if code == 'R':
        return repr(float(value))
    return str(value)


def write_frame(fh, info, columns):
    """Append one frame to an open text file."""
    n_atoms = len(next(iter(columns.values()))[1])
    fh.write("{}\n".format(n_atoms))
    fh.write(format_header(info, columns) + "\n")
    blocks = [(code, np.asarray(values).reshape(n_atoms, -1)
               if np.ndim(values) > 1 else np.asarray(values)[:, None])
              for code, values in columns.values()]
    for i in range(n_atoms):
        fh.write(" ".join(_format_cell(code, v)
                          for code, block in blocks
                          for v in block[i]) + "\n")


def read_frames(fh):
    """Read every frame of an open file.

    Returns
    -------
    frames : list of (OrderedDict info, OrderedDict columns)
        `columns` maps name -> np.ndarray of shape (N,) or (N, k).
    """
    frames = []
    lines = fh.read().splitlines()
    cursor = 0
    while cursor < len(lines):
        if not lines[cursor].strip():
            cursor += 1
            continue
        try:
            n_atoms = int(lines[cursor])
        except ValueError:
            raise ExtXYZError("Expected an atom count at line {}".format(
                cursor + 1))
        if cursor + 2 + n_atoms > len(lines):
            raise ExtXYZError("Truncated frame at line {}".format(cursor + 1))

        info = parse_header(lines[cursor + 1])
        layout = parse_properties(info.pop('Properties',
                                           'species:S:1:pos:R:3'))
        rows = [line.split() for line in
                lines[cursor + 2:cursor + 2 + n_atoms]]
        width = sum(ncols for _, _, ncols in layout)

        columns = collections.OrderedDict()
        offset = 0
        for name, code, ncols in layout:
            convert = CONVERTERS[code]
            try:
                values = [[convert(row[offset + c]) for c in range(ncols)]
                          for row in rows if len(row) == width]
            except ValueError as err:
                raise ExtXYZError("Bad {} value: {}".format(name, err))
            if len(values) != n_atoms:
                raise ExtXYZError("Expected {} columns per atom line".format(
                    width))
            array = np.array(values, dtype=object if code == 'S' else None)
            columns[name] = array[:, 0] if ncols == 1 else array
            offset += ncols

        frames.append((info, columns))
        cursor += 2 + n_atoms
    return frames


def floats(text):
    """Header value -> np.ndarray of floats."""
    return np.array([float(v) for v in text.split()])
