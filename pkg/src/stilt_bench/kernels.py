"""Hot numeric kernels, each with a numba loop version and a numpy version.

The public names (``gelu_forward``, ``gelu_backward``, ``signed_rank_counts``,
``confusion_matrix``) dispatch to the loop versions when numba is enabled
(see :mod:`stilt_bench._accel`) and to the numpy versions otherwise. Both
variants stay importable so the benchmark and parity tests can call them
directly.
"""

import math

import numpy as np
from scipy.special import erf

from ._accel import USE_NUMBA, njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- GeLU (exact erf form) ---------------------------------------------------

@njit
def _gelu_forward_loop(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out.reshape(x.shape)


@njit
def _gelu_backward_loop(x, grad_out):
    flat = x.ravel()
    g = grad_out.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
        out[i] = g[i] * (cdf + v * pdf)
    return out.reshape(x.shape)


def _gelu_forward_np(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_backward_np(x, grad_out):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return grad_out * (cdf + x * pdf)


# -- signed-rank null distribution --------------------------------------------

@njit
def _signed_rank_counts_loop(doubled_ranks):
    total = 0
    for r in doubled_ranks:
        total += r
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        for s in range(reach, -1, -1):
            c = counts[s]
            if c:
                counts[s + r] += c
        reach += r
    return counts


def _signed_rank_counts_np(doubled_ranks):
    doubled_ranks = np.asarray(doubled_ranks, dtype=np.int64)
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    return counts


# -- confusion matrix ---------------------------------------------------------

@njit
def _confusion_matrix_loop(labels, preds, n_classes):
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    for i in range(labels.size):
        out[labels[i], preds[i]] += 1
    return out


def _confusion_matrix_np(labels, preds, n_classes):
    flat = np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes).astype(np.int64)


def gelu_forward(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _gelu_forward_loop(x) if USE_NUMBA else _gelu_forward_np(x)


def gelu_backward(x, grad_out):
    x = np.ascontiguousarray(x, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if USE_NUMBA:
        return _gelu_backward_loop(x, grad_out)
    return _gelu_backward_np(x, grad_out)


def signed_rank_counts(doubled_ranks):
    """Count sign assignments by their positive doubled-rank sum.

    ``counts[s]`` is the number of the ``2**n`` sign vectors whose positive
    entries have doubled ranks summing to ``s``. Doubling makes average
    ranks of ties integral.
    """
    doubled_ranks = np.ascontiguousarray(doubled_ranks, dtype=np.int64)
    if USE_NUMBA:
        return _signed_rank_counts_loop(doubled_ranks)
    return _signed_rank_counts_np(doubled_ranks)


def confusion_matrix(labels, preds, n_classes=3):
    """Row = true class, column = predicted class."""
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    preds = np.ascontiguousarray(preds, dtype=np.int64)
    if USE_NUMBA:
        return _confusion_matrix_loop(labels, preds, n_classes)
    return _confusion_matrix_np(labels, preds, n_classes)
