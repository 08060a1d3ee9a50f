"""Geometric and microstructural feature extraction for streamlines.

Arc length, length filtering, per-streamline mean FA, deterministic uniform
resampling to a fixed point count, and dataset-level coordinate
normalization.  Mean FA is always computed from the full-resolution
streamline, never from a resampled copy, so every subsample of a streamline
shares one FA value.
"""

from dataclasses import dataclass
import warnings

import numpy as np

from . import _kernels
from .tract_io import Streamline, Tractogram


class TooFewPoints(ValueError):
    pass


class MissingChannel(ValueError):
    pass


class DegenerateDataWarning(UserWarning):
    """Zero-variance coordinates; normalization scale clamped to 1."""


@dataclass
class FeatureSample:
    """Fixed-length point array plus label and mean FA: the unit of training."""

    coords: np.ndarray  # (P, 3) float64, mm
    mean_fa: float
    label: int
    source_index: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (P, 3), got {self.coords.shape}")
        if not np.isfinite(self.mean_fa) or not 0.0 <= self.mean_fa <= 1.0:
            raise ValueError(f"mean_fa must be finite in [0, 1], got {self.mean_fa}")


@dataclass
class NormStats:
    """Dataset-level center and isotropic scale for network inputs."""

    mean: np.ndarray  # (3,)
    scale: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if not self.scale > 0:
            raise ValueError("scale must be positive")


def _points_of(s):
    if isinstance(s, Streamline):
        return s.points
    return np.asarray(s, dtype=np.float64)


def arc_length(s):
    """Polyline length in mm: sum of consecutive point-to-point distances."""
    pts = _points_of(s)
    if pts.shape[0] < 2:
        raise TooFewPoints(f"arc length needs >= 2 points, got {pts.shape[0]}")
    return float(_kernels.cumulative_lengths(pts)[-1])


def tract_arc_lengths(t):
    """Arc length of every streamline in a tractogram."""
    flat, offsets = _kernels.pack_ragged([s.points for s in t.streamlines])
    return _kernels.batch_arc_lengths(flat, offsets)


def filter_by_length(t, min_mm):
    """Keep streamlines with arc_length >= min_mm (inclusive), order preserved."""
    if min_mm < 0:
        raise ValueError("min_mm must be >= 0")
    if not t.streamlines:
        return Tractogram([], list(t.scalar_names), t.voxel_size, t.vox_to_ras, t.dim)
    keep = tract_arc_lengths(t) >= min_mm
    kept = [s for s, k in zip(t.streamlines, keep) if k]
    return Tractogram(kept, list(t.scalar_names), t.voxel_size, t.vox_to_ras, t.dim)


def mean_fa(s, channel, scalar_names):
    """Arithmetic mean of a named scalar channel over all original points."""
    names = list(scalar_names)
    if channel not in names:
        raise MissingChannel(f"channel {channel!r} not in {names}")
    if s.scalars is None:
        raise MissingChannel(f"streamline carries no scalars, wanted {channel!r}")
    return float(s.scalars[:, names.index(channel)].mean())


def resample_uniform(s, n_points):
    """Resample to n_points at equal arc-length spacing (linear interpolation).

    The first and last output points equal the original endpoints exactly.
    This is the deterministic representation used at inference time.
    """
    pts = _points_of(s)
    if pts.shape[0] < 2:
        raise TooFewPoints(f"resampling needs >= 2 points, got {pts.shape[0]}")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    return _kernels.resample_polyline(np.ascontiguousarray(pts), n_points)


def batch_resample(streamlines, n_points):
    """Uniform resampling of many streamlines at once -> (n, n_points, 3)."""
    pts_list = [_points_of(s) for s in streamlines]
    for p in pts_list:
        if p.shape[0] < 2:
            raise TooFewPoints("resampling needs >= 2 points")
    flat, offsets = _kernels.pack_ragged(pts_list)
    return _kernels.batch_resample(flat, offsets, n_points)


def fit_norm_stats(coords):
    """Fit center/scale from training coordinates.

    coords is anything stackable to (..., 3): a (N, P, 3) array or a list of
    (P, 3) arrays.  mean is the component-wise mean over all points; scale is
    one global standard deviation of the centered coordinates.  Zero variance
    clamps the scale to 1 and emits DegenerateDataWarning.
    """
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 1:
        raise ValueError("need at least one sample to fit normalization")
    mean = pts.mean(axis=0)
    scale = float((pts - mean).std())
    if scale == 0.0:
        warnings.warn("zero-variance coordinates; scale clamped to 1",
                      DegenerateDataWarning)
        scale = 1.0
    return NormStats(mean, scale)


def apply_norm(coords, stats):
    """Center and scale coordinates; shape-preserving."""
    return (np.asarray(coords, dtype=np.float64) - stats.mean) / stats.scale


def invert_norm(coords, stats):
    """Undo apply_norm."""
    return np.asarray(coords, dtype=np.float64) * stats.scale + stats.mean
