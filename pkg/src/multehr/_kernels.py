"""Hot row-indexed kernels with numba acceleration and a pure-numpy fallback.

Every kernel here sits on the per-edge path of the encoder (gather rows,
scatter-add rows, segment max/sum for attention softmax), which dominates
runtime once graphs reach a few ten-thousand edges.  The numba versions are
plain single-threaded loops so results are bit-identical to the numpy path.

Set MULTEHR_NO_NUMBA=1 to force the numpy implementations (useful on
platforms where numba is unavailable or for A/B timing; see
benchmarks/kernel_bench.py).
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("MULTEHR_NO_NUMBA", "0") not in ("1", "true", "yes")

if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def _scatter_add_rows_np(src, idx, n_rows):
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def _scatter_add_vec_np(src, idx, n):
    out = np.zeros(n, dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def _segment_max_np(values, idx, n):
    out = np.full(n, -np.inf, dtype=values.dtype)
    np.maximum.at(out, idx, values)
    return out


if USE_NUMBA:

    @njit(cache=True)
    def _scatter_add_rows_nb(src, idx, n_rows):
        out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
        for j in range(idx.shape[0]):
            i = idx[j]
            for k in range(src.shape[1]):
                out[i, k] += src[j, k]
        return out

    @njit(cache=True)
    def _scatter_add_vec_nb(src, idx, n):
        out = np.zeros(n, dtype=src.dtype)
        for j in range(idx.shape[0]):
            out[idx[j]] += src[j]
        return out

    @njit(cache=True)
    def _segment_max_nb(values, idx, n):
        out = np.full(n, -np.inf, dtype=values.dtype)
        for j in range(idx.shape[0]):
            i = idx[j]
            if values[j] > out[i]:
                out[i] = values[j]
        return out


def scatter_add_rows(src, idx, n_rows):
    """Sum rows of ``src`` into an (n_rows, src.shape[1]) zero matrix at ``idx``."""
    src = np.ascontiguousarray(src)
    if USE_NUMBA:
        return _scatter_add_rows_nb(src, idx, n_rows)
    return _scatter_add_rows_np(src, idx, n_rows)


def scatter_add_vec(src, idx, n):
    """Sum entries of 1-D ``src`` into an n-vector of zeros at ``idx``."""
    src = np.ascontiguousarray(src)
    if USE_NUMBA:
        return _scatter_add_vec_nb(src, idx, n)
    return _scatter_add_vec_np(src, idx, n)


def segment_max(values, idx, n):
    """Per-segment max of 1-D ``values``; empty segments return -inf."""
    values = np.ascontiguousarray(values)
    if USE_NUMBA:
        return _segment_max_nb(values, idx, n)
    return _segment_max_np(values, idx, n)
