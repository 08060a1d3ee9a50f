"""Class balancing by repeated random point-subsampling of streamlines.

The minority class is oversampled by drawing several ordered random point
subsets per streamline, so every generated sample is real tracked data (a
subsequence of the source polyline) rather than a synthetic perturbation.
Plain repetition is kept as the ablation alternative.
"""

from dataclasses import dataclass
import math

import numpy as np

from .geometry import FeatureSample, TooFewPoints, mean_fa, resample_uniform

MODES = ("none", "repetition", "subsampling")


class SingleClassInput(ValueError):
    pass


@dataclass
class AugmentConfig:
    mode: str = "subsampling"
    factor: object = 8      # positive int, or "auto" = ceil(majority/minority)
    P: int = 60
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.factor != "auto":
            self.factor = int(self.factor)
            if self.factor < 1:
                raise ValueError("factor must be >= 1")
        if self.P < 2:
            raise ValueError("P must be >= 2")


def random_subsample(s, n_points, rng):
    """Pick n_points indices without replacement, sorted, endpoints always kept.

    Streamlines with fewer than n_points points are first densified to
    2*n_points by uniform arc-length interpolation, then subsampled.
    """
    pts = s.points if hasattr(s, "points") else np.asarray(s, dtype=np.float64)
    n = pts.shape[0]
    if n < 2:
        raise TooFewPoints(f"subsampling needs >= 2 points, got {n}")
    if n < n_points:
        pts = resample_uniform(pts, 2 * n_points)
        n = pts.shape[0]
    if n == n_points:
        return pts.copy()
    interior = rng.choice(n - 2, size=n_points - 2, replace=False) + 1
    idx = np.empty(n_points, dtype=np.int64)
    idx[0] = 0
    idx[-1] = n - 1
    idx[1:-1] = np.sort(interior)
    return pts[idx]


def _child_rng(seed, source_index):
    return np.random.default_rng([seed, source_index])


def balance_dataset(pairs, cfg, scalar_names=("FA",), channel="FA"):
    """Turn labeled streamlines into a balanced list of FeatureSamples.

    pairs is a sequence of (Streamline, label).  Minority-class streamlines
    contribute cfg.factor samples each, majority-class streamlines one sample
    each; mode "none" skips balancing entirely.  Mean FA is computed once per
    source streamline from its full-resolution points, so all copies share
    one value.  Output is deterministic given cfg.seed.
    """
    labels = np.array([lab for _, lab in pairs], dtype=np.int64)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise SingleClassInput(f"need both classes, got {set(classes.tolist())}")
    if classes.size > 2:
        raise ValueError(f"binary labels expected, got {set(classes.tolist())}")

    if counts[0] == counts[1]:
        minority = None  # already balanced
        factor = 1
    else:
        minority = classes[np.argmin(counts)]
        if cfg.factor == "auto":
            factor = math.ceil(counts.max() / counts.min())
        else:
            factor = cfg.factor

    out = []
    for i, (s, lab) in enumerate(pairs):
        fa = mean_fa(s, channel, scalar_names)
        rng = _child_rng(cfg.seed, i)
        if cfg.mode == "none":
            out.append(FeatureSample(resample_uniform(s, cfg.P), fa, lab, i))
        elif cfg.mode == "repetition":
            base = resample_uniform(s, cfg.P)
            copies = factor if lab == minority else 1
            for _ in range(copies):
                out.append(FeatureSample(base.copy(), fa, lab, i))
        else:  # subsampling
            draws = factor if lab == minority else 1
            for _ in range(draws):
                out.append(FeatureSample(random_subsample(s, cfg.P, rng), fa, lab, i))
    return out
