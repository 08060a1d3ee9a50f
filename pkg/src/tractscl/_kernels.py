"""Low-level geometry kernels over ragged polyline batches.

Two interchangeable backends are provided: numba ``@njit`` loops and a
pure-numpy fallback.  The active backend is chosen at import time from the
``TRACTSCL_NUMBA`` environment variable:

* ``TRACTSCL_NUMBA=0`` - force the numpy fallback
* ``TRACTSCL_NUMBA=1`` - require numba (ImportError if unavailable)
* unset               - use numba when importable, numpy otherwise

Both backends implement the same contracts; float results may differ in the
last bits (summation order), so cross-backend comparisons need tolerances.
Ragged batches are passed as ``(flat, offsets)`` where ``flat`` is the
(total_points, 3) float64 stack and ``offsets`` has length n_streamlines+1.
"""

import os

import numpy as np

_env = os.environ.get("TRACTSCL_NUMBA", "").strip().lower()
_force_off = _env in ("0", "false", "off", "no")
_force_on = _env in ("1", "true", "on", "yes")

USING_NUMBA = False
if not _force_off:
    try:
        from numba import njit

        USING_NUMBA = True
    except ImportError:
        if _force_on:
            raise


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def cumulative_lengths_numpy(points):
    """Cumulative arc length along a polyline; cum[0] == 0."""
    d = np.diff(points, axis=0)
    out = np.empty(points.shape[0])
    out[0] = 0.0
    np.cumsum(np.sqrt((d * d).sum(axis=1)), out=out[1:])
    return out


def resample_polyline_numpy(points, n_out):
    """Resample to n_out points at uniform arc-length spacing.

    Endpoints of the output are the input endpoints exactly.  A degenerate
    polyline (total length zero) collapses to n_out copies of its first point.
    """
    cum = cumulative_lengths_numpy(points)
    total = cum[-1]
    out = np.empty((n_out, 3))
    if total == 0.0:
        out[:] = points[0]
        return out
    targets = np.linspace(0.0, total, n_out)
    for c in range(3):
        out[:, c] = np.interp(targets, cum, points[:, c])
    out[0] = points[0]
    out[-1] = points[-1]
    return out


def batch_arc_lengths_numpy(flat, offsets):
    n = offsets.shape[0] - 1
    out = np.empty(n)
    for i in range(n):
        d = np.diff(flat[offsets[i]:offsets[i + 1]], axis=0)
        out[i] = np.sqrt((d * d).sum(axis=1)).sum()
    return out


def batch_resample_numpy(flat, offsets, n_out):
    n = offsets.shape[0] - 1
    out = np.empty((n, n_out, 3))
    for i in range(n):
        out[i] = resample_polyline_numpy(flat[offsets[i]:offsets[i + 1]], n_out)
    return out


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if USING_NUMBA:

    @njit(cache=True)
    def _cumlen_nb(points):
        m = points.shape[0]
        out = np.empty(m)
        out[0] = 0.0
        acc = 0.0
        for i in range(1, m):
            dx = points[i, 0] - points[i - 1, 0]
            dy = points[i, 1] - points[i - 1, 1]
            dz = points[i, 2] - points[i - 1, 2]
            acc += np.sqrt(dx * dx + dy * dy + dz * dz)
            out[i] = acc
        return out

    @njit(cache=True)
    def _resample_nb(points, n_out):
        m = points.shape[0]
        cum = _cumlen_nb(points)
        total = cum[-1]
        out = np.empty((n_out, 3))
        if total == 0.0:
            for k in range(n_out):
                for c in range(3):
                    out[k, c] = points[0, c]
            return out
        j = 0
        for k in range(n_out):
            t = total * k / (n_out - 1)
            while j < m - 2 and cum[j + 1] < t:
                j += 1
            seg = cum[j + 1] - cum[j]
            a = (t - cum[j]) / seg if seg > 0.0 else 0.0
            for c in range(3):
                out[k, c] = points[j, c] + a * (points[j + 1, c] - points[j, c])
        for c in range(3):
            out[0, c] = points[0, c]
            out[n_out - 1, c] = points[m - 1, c]
        return out

    @njit(cache=True)
    def _batch_arc_lengths_nb(flat, offsets):
        n = offsets.shape[0] - 1
        out = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(offsets[i] + 1, offsets[i + 1]):
                dx = flat[j, 0] - flat[j - 1, 0]
                dy = flat[j, 1] - flat[j - 1, 1]
                dz = flat[j, 2] - flat[j - 1, 2]
                acc += np.sqrt(dx * dx + dy * dy + dz * dz)
            out[i] = acc
        return out

    @njit(cache=True)
    def _batch_resample_nb(flat, offsets, n_out):
        n = offsets.shape[0] - 1
        out = np.empty((n, n_out, 3))
        for i in range(n):
            out[i] = _resample_nb(flat[offsets[i]:offsets[i + 1]], n_out)
        return out

    cumulative_lengths_numba = _cumlen_nb
    resample_polyline_numba = _resample_nb
    batch_arc_lengths_numba = _batch_arc_lengths_nb
    batch_resample_numba = _batch_resample_nb
else:
    cumulative_lengths_numba = None
    resample_polyline_numba = None
    batch_arc_lengths_numba = None
    batch_resample_numba = None


# Active backend aliases -----------------------------------------------------

if USING_NUMBA:
    cumulative_lengths = cumulative_lengths_numba
    resample_polyline = resample_polyline_numba
    batch_arc_lengths = batch_arc_lengths_numba
    batch_resample = batch_resample_numba
else:
    cumulative_lengths = cumulative_lengths_numpy
    resample_polyline = resample_polyline_numpy
    batch_arc_lengths = batch_arc_lengths_numpy
    batch_resample = batch_resample_numpy


def pack_ragged(arrays):
    """Stack a list of (m_i, 3) arrays into (flat, offsets) for batch kernels."""
    offsets = np.zeros(len(arrays) + 1, dtype=np.int64)
    for i, a in enumerate(arrays):
        offsets[i + 1] = offsets[i] + a.shape[0]
    if arrays:
        flat = np.ascontiguousarray(np.concatenate(arrays, axis=0), dtype=np.float64)
    else:
        flat = np.empty((0, 3))
    return flat, offsets
