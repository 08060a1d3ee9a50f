"""Synthetic labeled tractograms for desk-scale end-to-end verification.

Target streamlines scatter around a fixed cubic Bezier centerline about
100 mm long; non-target streamlines scatter around a second centerline that
``geometry_overlap`` blends toward the first (0 = well-separated bundles,
1 = identical centerlines, i.e. no geometric class signal at all).  Per-point
FA is the class mean plus smooth noise, clamped to [0, 1].  Everything is
deterministic per seed, with one child RNG stream per streamline.
"""

from dataclasses import dataclass

import numpy as np

from .tract_io import Streamline, Tractogram

_BASE_CONTROL = np.array([
    [0.0, 0.0, 0.0],
    [25.0, 35.0, 8.0],
    [60.0, -20.0, 14.0],
    [92.0, 15.0, 4.0],
])
_NONTARGET_SHIFT = np.array([4.0, 30.0, -12.0])  # ~32 mm bundle separation
_CENTERLINE_MM = 100.0
_BUNDLE_SD = 1.2      # mm, per-streamline tube displacement
_JITTER_SD = 0.4      # mm, smooth within-streamline wobble
_JITTER_KNOTS = 4
_FA_KNOTS = 5


@dataclass
class SynthConfig:
    n_target: int = 100
    n_nontarget: int = 800
    points_min: int = 80
    points_max: int = 120
    fa_mean_target: float = 0.30
    fa_mean_nontarget: float = 0.55
    fa_noise_sd: float = 0.05
    geometry_overlap: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_target < 1 or self.n_nontarget < 1:
            raise ValueError("class counts must be >= 1")
        if not (2 <= self.points_min <= self.points_max):
            raise ValueError("need 2 <= points_min <= points_max")
        for v in (self.fa_mean_target, self.fa_mean_nontarget):
            if not 0.0 < v < 1.0:
                raise ValueError("FA class means must lie in (0, 1)")
        if self.fa_noise_sd < 0:
            raise ValueError("fa_noise_sd must be >= 0")
        if not 0.0 <= self.geometry_overlap <= 1.0:
            raise ValueError("geometry_overlap must be in [0, 1]")


def _bezier(control, t):
    u = 1.0 - t
    return (np.outer(u ** 3, control[0])
            + np.outer(3.0 * u ** 2 * t, control[1])
            + np.outer(3.0 * u * t ** 2, control[2])
            + np.outer(t ** 3, control[3]))


def _curve_length(control, n=2049):
    pts = _bezier(control, np.linspace(0.0, 1.0, n))
    return float(np.sqrt((np.diff(pts, axis=0) ** 2).sum(axis=1)).sum())


def _smooth_noise(rng, sd, n_knots, n_points, dims=None):
    """Gaussian values at a few knots, linearly interpolated along the curve."""
    shape = (n_knots,) if dims is None else (n_knots, dims)
    knots = rng.normal(0.0, sd, shape)
    x = np.linspace(0.0, 1.0, n_points)
    xk = np.linspace(0.0, 1.0, n_knots)
    if dims is None:
        return np.interp(x, xk, knots)
    return np.column_stack([np.interp(x, xk, knots[:, d]) for d in range(dims)])


def generate(cfg):
    """Build a labeled synthetic tractogram -> (Tractogram, labels array).

    Target streamlines come first (label 1), then non-target (label 0).  All
    streamlines are comfortably longer than 80 mm so a length filter passes
    them untouched.
    """
    scale = _CENTERLINE_MM / _curve_length(_BASE_CONTROL)
    control_target = _BASE_CONTROL * scale
    control_nontarget = control_target + (1.0 - cfg.geometry_overlap) * _NONTARGET_SHIFT

    streamlines = []
    labels = []
    stream_index = 0
    for label, count, control, fa_mean in (
            (1, cfg.n_target, control_target, cfg.fa_mean_target),
            (0, cfg.n_nontarget, control_nontarget, cfg.fa_mean_nontarget)):
        for _ in range(count):
            rng = np.random.default_rng([cfg.seed, stream_index])
            n = int(rng.integers(cfg.points_min, cfg.points_max + 1))
            center_offset = rng.normal(0.0, _BUNDLE_SD, 3)
            pts = (_bezier(control, np.linspace(0.0, 1.0, n))
                   + center_offset
                   + _smooth_noise(rng, _JITTER_SD, _JITTER_KNOTS, n, dims=3))
            fa = np.clip(fa_mean + _smooth_noise(rng, cfg.fa_noise_sd, _FA_KNOTS, n),
                         0.0, 1.0)
            streamlines.append(Streamline(pts, fa.reshape(-1, 1)))
            labels.append(label)
            stream_index += 1

    tract = Tractogram(streamlines, ["FA"])
    return tract, np.array(labels, dtype=np.int64)
