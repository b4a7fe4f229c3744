"""Hard-target selection in a normalized (x, y, energy) space.

Frame features are reduced to two principal components, each min-max
normalized, and a normalized per-atom energy is appended as the third
axis. Greedy farthest-point sampling then picks a well spread subset.
"""

import collections
import logging
import numpy as np
import pandas as pd
import scipy.spatial.distance
import sklearn.decomposition

import kdnnp.common.utils as utils

logger = logging.getLogger(__name__)

COORDINATES = ['x', 'y', 'norm_energy']
DEGENERATE_AXIS = 1e-9

ScreeningPoint = collections.namedtuple(
    'ScreeningPoint', ['source_index', 'x', 'y', 'norm_energy'])


class DegenerateVariance(Exception):
    pass


class KTooLarge(Exception):
    pass


def _min_max(values, reference_span):
    """Scale to [0, 1]; axes with no spread become 0.5."""
    low, high = values.min(), values.max()
    if high - low <= DEGENERATE_AXIS * max(reference_span, 1e-300):
        return np.full(len(values), 0.5)
    return (values - low) / (high - low)


def reduce_2d(features):
    """Project frame features on their top two principal components.

    Each component's largest-magnitude loading is made positive, and each
    axis is min-max normalized to [0, 1]. An axis without spread is set to
    0.5.

    Parameters
    ----------
    features : array-like, shape=(n_frames, n_features)
        At least three frames.

    Returns
    -------
    points : np.ndarray, shape=(n_frames, 2)

    Raises
    ------
    DegenerateVariance
        If all feature vectors are identical.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or len(features) < 3:
        raise ValueError("reduce_2d needs >= 3 equal-length feature vectors")
    if not np.any(features.var(axis=0) > 0):
        raise DegenerateVariance("all feature vectors are identical")

    n_components = min(2, features.shape[1])
    pca = sklearn.decomposition.PCA(n_components=n_components,
                                    svd_solver='full')
    projected = pca.fit_transform(features)
    components = pca.components_
    for axis in range(n_components):
        pivot = np.argmax(np.abs(components[axis]))
        if components[axis, pivot] < 0:
            projected[:, axis] *= -1.0

    span = np.ptp(projected[:, 0])
    points = np.full((len(features), 2), 0.5)
    for axis in range(n_components):
        points[:, axis] = _min_max(projected[:, axis], span)
    logger.debug("PCA explained variance ratio: {}".format(
        pca.explained_variance_ratio_))
    return points


def augment_energy(points, energies, source_indices=None):
    """Append normalized per-atom energies as the third axis.

    norm_energy = (E - min) / (max - min), or 0.5 for constant energies.

    Returns
    -------
    screening : pd.DataFrame
        Columns source_index, x, y, norm_energy (ScreeningPoint fields).
    """
    points = np.asarray(points, dtype=float)
    energies = np.asarray(energies, dtype=float)
    if len(points) != len(energies):
        raise ValueError("points and energies differ in length")
    if source_indices is None:
        source_indices = np.arange(len(points))
    low, high = energies.min(), energies.max()
    if high == low:
        norm = np.full(len(energies), 0.5)
    else:
        norm = (energies - low) / (high - low)
    return pd.DataFrame(dict(source_index=np.asarray(source_indices),
                             x=points[:, 0], y=points[:, 1],
                             norm_energy=norm),
                        columns=['source_index'] + COORDINATES)


def _coordinates(points):
    if isinstance(points, pd.DataFrame):
        return (points[COORDINATES].values.astype(float),
                points['source_index'].values)
    coords = np.asarray(points, dtype=float)
    return coords, np.arange(len(coords))


def select_fps(points, k):
    """Greedy farthest-point sampling.

    Starts from the point farthest from the centroid, then repeatedly adds
    the point with the largest distance to its nearest selected point.
    Ties go to the lowest source index.

    Parameters
    ----------
    points : pd.DataFrame from `augment_energy`, or array (n, d)

    k : int
        1 <= k <= n.

    Returns
    -------
    selected : list of int
        Source indices in selection order.
    """
    coords, sources = _coordinates(points)
    if not 1 <= k <= len(coords):
        raise KTooLarge("cannot select {} of {} points".format(
            k, len(coords)))

    order = np.argsort(sources, kind='stable')
    coords, sources = coords[order], sources[order]

    centroid = coords.mean(axis=0, keepdims=True)
    start = int(np.argmax(scipy.spatial.distance.cdist(
        coords, centroid)[:, 0]))
    selected = [start]
    min_distance = scipy.spatial.distance.cdist(
        coords, coords[start:start + 1])[:, 0]
    min_distance[start] = -np.inf
    for _ in range(k - 1):
        farthest = int(np.argmax(min_distance))
        selected.append(farthest)
        min_distance = np.minimum(min_distance, scipy.spatial.distance.cdist(
            coords, coords[farthest:farthest + 1])[:, 0])
        min_distance[selected] = -np.inf
    return [int(sources[i]) for i in selected]


def select_random(n_points, k, seed):
    """k of range(n_points) uniformly without replacement, sorted."""
    if not 0 <= k <= n_points:
        raise KTooLarge("cannot select {} of {} points".format(k, n_points))
    rng = utils.make_rng(seed)
    return sorted(int(i) for i in rng.choice(n_points, size=k,
                                             replace=False))


def min_pairwise_distance(points, selected=None):
    """Smallest distance among `selected` rows (all rows if None)."""
    coords, sources = _coordinates(points)
    if selected is not None:
        lookup = {s: i for i, s in enumerate(sources)}
        coords = coords[[lookup[s] for s in selected]]
    if len(coords) < 2:
        return np.inf
    return float(scipy.spatial.distance.pdist(coords).min())


def selection_map(points, selected):
    """Screening table with a boolean `selected` column."""
    table = points.copy()
    table['selected'] = table['source_index'].isin(list(selected))
    return table
