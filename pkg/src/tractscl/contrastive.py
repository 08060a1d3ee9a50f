"""Supervised contrastive loss with an FA-compatibility constraint on positives.

A pair (i, p) is positive when both samples carry the same class label and,
in "micro" mode, the absolute difference of their per-streamline mean FA is
strictly below a threshold.  The loss sums, over anchors that have at least
one positive, the mean negative log-ratio of the positive similarity against
all other samples in the batch, with similarities scaled by a temperature.
"""

from dataclasses import dataclass
import warnings

import numpy as np

MODES = ("label_only", "micro")


class DegenerateBatchWarning(UserWarning):
    """No anchor has a positive partner; the loss is 0 with zero gradient."""


@dataclass
class LossConfig:
    tau: float = 0.1
    t_fa: float = 0.1
    mode: str = "micro"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class PairMask:
    positive: np.ndarray   # (B, B) bool, positive[i, p] <=> p is a positive of anchor i
    candidate: np.ndarray  # (B, B) bool, everything except the anchor itself


def build_pair_mask(labels, mean_fas, cfg):
    """Positive/candidate masks from labels and per-streamline mean FA.

    positive[i, p] requires i != p, equal labels and (micro mode only)
    |fa_i - fa_p| < t_fa with strict inequality.
    """
    labels = np.asarray(labels)
    mean_fas = np.asarray(mean_fas, dtype=np.float64)
    b = labels.shape[0]
    if b < 2:
        raise ValueError(f"need a batch of >= 2, got {b}")
    if not np.isfinite(mean_fas).all():
        raise ValueError("mean FA values must be finite")
    off_diag = ~np.eye(b, dtype=bool)
    positive = (labels[:, None] == labels[None, :]) & off_diag
    if cfg.mode == "micro":
        positive &= np.abs(mean_fas[:, None] - mean_fas[None, :]) < cfg.t_fa
    return PairMask(positive=positive, candidate=off_diag)


def _check_unit_rows(z):
    norms = np.sqrt((z * z).sum(axis=1))
    if np.abs(norms - 1.0).max() > 1e-3:
        raise ValueError("contrastive features must be (approximately) unit-norm")


def supcon_loss(z, mask, tau):
    """Loss value only; see supcon_loss_and_grad."""
    return supcon_loss_and_grad(z, mask, tau)[0]


def supcon_loss_and_grad(z, mask, tau):
    """Contrastive loss, its gradient wrt z, and the contributing-anchor count.

    Returns (loss, dz, n_anchors).  The loss is the raw sum over anchors (the
    quantity optimized); divide by n_anchors for a batch-size-comparable
    value.  Anchors without positives contribute exactly zero loss and anchor
    gradient.  The per-anchor denominator is computed with log-sum-exp
    stabilization.
    """
    z = np.asarray(z)
    _check_unit_rows(z)
    b = z.shape[0]
    pos = mask.positive
    if pos.shape != (b, b):
        raise ValueError("mask shape does not match batch")

    pcount = pos.sum(axis=1)
    anchors = pcount > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        warnings.warn("no positive pairs in batch; contrastive loss is 0",
                      DegenerateBatchWarning)
        return 0.0, np.zeros_like(z), 0

    sim = (z @ z.T) / tau
    masked = sim.copy()
    np.fill_diagonal(masked, -np.inf)
    row_max = masked.max(axis=1)
    expd = np.exp(masked - row_max[:, None])
    lse = row_max + np.log(expd.sum(axis=1))

    pcount_safe = np.where(anchors, pcount, 1)
    per_anchor = (pos * (lse[:, None] - sim)).sum(axis=1) / pcount_safe
    loss = float(per_anchor[anchors].sum())

    # d loss / d sim[i, j]: softmax over candidates minus the positive mass
    softmax = expd / expd.sum(axis=1)[:, None]
    g = (softmax * anchors[:, None] - pos / pcount_safe[:, None]) / tau
    dz = g @ z + g.T @ z
    return loss, dz.astype(z.dtype, copy=False), n_anchors
