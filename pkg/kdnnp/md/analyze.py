"""Trajectory analytics: MSD, self-diffusion and energy histograms."""

import logging
import numpy as np
import pandas as pd
import scipy.stats

from kdnnp.data.dataset import EmptyDataset

logger = logging.getLogger(__name__)

# 1 A^2/fs = 1e-16 cm^2 / 1e-15 s.
A2_PER_FS_TO_CM2_PER_S = 1e-1


class TooFewSamples(Exception):
    pass


class DegenerateFit(Exception):
    pass


def msd_curve(unwrapped, sample_time):
    """Multiple-time-origin MSD of unwrapped positions.

    Parameters
    ----------
    unwrapped : np.ndarray, shape=(S, N, 3)

    sample_time : float
        fs between consecutive samples.

    Returns
    -------
    curve : pd.DataFrame
        Columns lag (fs) and msd (A^2), lags 0 .. max(1, (S-1)//2) samples.
    """
    unwrapped = np.asarray(unwrapped, dtype=float)
    n_samples = len(unwrapped)
    if n_samples < 2:
        raise TooFewSamples("MSD needs >= 2 samples, got {}".format(
            n_samples))
    max_lag = max(1, (n_samples - 1) // 2)
    msd = np.zeros(max_lag + 1)
    for lag in range(1, max_lag + 1):
        step = unwrapped[lag:] - unwrapped[:-lag]
        msd[lag] = np.mean(np.sum(step ** 2, axis=2))
    return pd.DataFrame(dict(lag=np.arange(max_lag + 1) * sample_time,
                             msd=msd), columns=['lag', 'msd'])


def mean_square_displacement(trajectory):
    """MSD curve (A^2 vs fs) of a Trajectory, averaged over atoms and
    time origins."""
    if len(trajectory) < 2:
        raise TooFewSamples("MSD needs >= 2 samples, got {}".format(
            len(trajectory)))
    sample_time = trajectory.times[1] - trajectory.times[0]
    return msd_curve(trajectory.unwrapped_positions(), sample_time)


def self_diffusion(curve, fit_window=(0.2, 0.8)):
    """Einstein self-diffusion coefficient in cm^2/s.

    D = slope / 6 of a least-squares line through the MSD points whose lag
    lies within `fit_window` (fractions of the largest lag).

    Raises
    ------
    DegenerateFit
        If fewer than two points fall in the window.
    """
    lag = np.asarray(curve['lag'], dtype=float)
    msd = np.asarray(curve['msd'], dtype=float)
    start, end = fit_window
    if not 0.0 <= start < end <= 1.0:
        raise ValueError("fit_window must satisfy 0 <= start < end <= 1")
    selected = (lag >= start * lag.max()) & (lag <= end * lag.max())
    if np.count_nonzero(selected) < 2:
        raise DegenerateFit("fit window {} holds {} points".format(
            fit_window, np.count_nonzero(selected)))
    fit = scipy.stats.linregress(lag[selected], msd[selected])
    return fit.slope / 6.0 * A2_PER_FS_TO_CM2_PER_S


def _per_atom_energies(frames):
    energies = np.array([f.energy_per_atom for f in frames])
    if len(energies) == 0:
        raise EmptyDataset("energy statistics need at least one frame.")
    return energies


def energy_histogram(frames, n_bins=40, value_range=None, edges=None):
    """Histogram of per-atom energies.

    Parameters
    ----------
    frames : iterable of LabeledFrame

    n_bins : int
        Used when `edges` is None.

    value_range : (float, float) or None

    edges : array-like or None
        Explicit bin edges.

    Returns
    -------
    edges : np.ndarray
    counts : np.ndarray of int
    mean : float
    std : float
        Sample standard deviation (ddof=1); 0 for a single frame.
    """
    energies = _per_atom_energies(frames)
    bins = n_bins if edges is None else np.asarray(edges, dtype=float)
    counts, edges = np.histogram(energies, bins=bins, range=value_range)
    std = float(np.std(energies, ddof=1)) if len(energies) > 1 else 0.0
    return edges, counts, float(np.mean(energies)), std


def energy_summary(frames):
    """Mean, sample std, standard error and 95th percentile of per-atom
    energies."""
    energies = _per_atom_energies(frames)
    std = float(np.std(energies, ddof=1)) if len(energies) > 1 else 0.0
    return dict(n=len(energies), mean=float(np.mean(energies)), std=std,
                sem=std / np.sqrt(len(energies)),
                p95=float(np.percentile(energies, 95)))


def histogram_df(edges, counts):
    """Histogram as a table with bin bounds and counts."""
    return pd.DataFrame(dict(bin_left=edges[:-1], bin_right=edges[1:],
                             count=counts),
                        columns=['bin_left', 'bin_right', 'count'])
