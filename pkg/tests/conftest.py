"""Shared test helpers: fixture builders and independent oracles.

BLAS/numba thread caps are applied before numpy is first imported so that
timing-sensitive acceptance criteria run single-threaded as stated.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import math

import numpy as np

from tractscl import nn
from tractscl.contrastive import LossConfig, build_pair_mask, supcon_loss_and_grad
from tractscl.tract_io import Streamline, Tractogram


# ---------------------------------------------------------------------------
# Fixture builders
# ---------------------------------------------------------------------------

def random_tractogram(rng, n_streams=None, max_points=12, with_fa=True,
                      f32_exact=True):
    """Random valid tractogram; f32_exact makes every float survive a TRK trip."""
    if n_streams is None:
        n_streams = int(rng.integers(0, 6))
    streams = []
    for _ in range(n_streams):
        m = int(rng.integers(2, max_points + 1))
        pts = rng.normal(0.0, 50.0, (m, 3))
        fa = rng.uniform(0.0, 1.0, (m, 1))
        if f32_exact:
            pts = pts.astype(np.float32).astype(np.float64)
            fa = fa.astype(np.float32).astype(np.float64)
        streams.append(Streamline(pts, fa if with_fa else None))
    affine = np.eye(4)
    affine[:3, 3] = rng.integers(-5, 6, 3).astype(np.float64)
    return Tractogram(
        streams,
        ["FA"] if with_fa else [],
        voxel_size=rng.integers(1, 4, 3).astype(np.float64),
        vox_to_ras=affine,
        dim=rng.integers(1, 200, 3),
    )


# ---------------------------------------------------------------------------
# Independent contrastive-loss oracle: literal double loop
# ---------------------------------------------------------------------------

def supcon_oracle(z, labels, fas, tau, t_fa, mode):
    """Literal per-anchor double-loop evaluation of the contrastive loss."""
    b = len(labels)
    total = 0.0
    for i in range(b):
        pos = [p for p in range(b)
               if p != i and labels[p] == labels[i]
               and (mode == "label_only" or abs(fas[i] - fas[p]) < t_fa)]
        if not pos:
            continue
        cand = [a for a in range(b) if a != i]
        denom = sum(math.exp(float(np.dot(z[i], z[a])) / tau) for a in cand)
        inner = 0.0
        for p in pos:
            inner += math.log(math.exp(float(np.dot(z[i], z[p])) / tau) / denom)
        total += -inner / len(pos)
    return total


def random_unit_rows(rng, b, dim):
    z = rng.normal(size=(b, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Full-network loss compositions and finite-difference gradient checking
# ---------------------------------------------------------------------------

def full_contrastive_loss(params, batch, labels, fas, tau=0.1, t_fa=0.1,
                          mode="micro", want_grads=False):
    """Contrastive loss through encoder + projection; classifier unused (grad 0)."""
    g, cache_e = nn.encode_forward(params, batch)
    z, cache_p = nn.project_forward(params, g)
    mask = build_pair_mask(labels, fas, LossConfig(tau=tau, t_fa=t_fa, mode=mode))
    loss, dz, _ = supcon_loss_and_grad(z, mask, tau)
    if not want_grads:
        return loss
    grads, dg = nn.project_backward(params, cache_p, dz)
    grads.update(nn.encode_backward(params, cache_e, dg))
    for name, arr in params.param_items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return loss, grads


def full_ce_loss(params, batch, labels, want_grads=False):
    """Cross-entropy through encoder + classifier; projection unused (grad 0)."""
    g, cache_e = nn.encode_forward(params, batch)
    logits, cache_c = nn.classify_forward(params, g)
    loss, dlogits = nn.softmax_cross_entropy(logits, labels)
    if not want_grads:
        return loss
    grads, dg = nn.classify_backward(params, cache_c, dlogits)
    grads.update(nn.encode_backward(params, cache_e, dg))
    for name, arr in params.param_items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return loss, grads


def fd_check_params(params, loss_fn, grads, h=1e-5, rtol=1e-4, atol=1e-7,
                    per_tensor_sample=None, rng=None):
    """Central finite differences against analytic grads for every tensor.

    Checks all components, or per_tensor_sample random components of each
    tensor.  Returns a list of failure descriptions (empty = pass).
    """
    failures = []
    for name, arr in params.param_items():
        flat = arr.reshape(-1)
        g_flat = grads[name].reshape(-1)
        if per_tensor_sample is None or flat.size <= per_tensor_sample:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=per_tensor_sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            an = g_flat[i]
            if abs(fd - an) > max(atol, rtol * abs(an)):
                failures.append(f"{name}[{i}]: analytic {an:.6e} vs fd {fd:.6e}")
    return failures
