"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``REFTOK_DISABLE_NUMBA``
is unset (or ``0``). Both paths are always importable so tests and the
benchmark can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_FLAG = os.environ.get("REFTOK_DISABLE_NUMBA", "0").strip().lower()
USE_NUMBA = HAVE_NUMBA and _FLAG in ("", "0", "false", "no")

# rows per block in the numpy distance scan; bounds the N*K*D temporary
_NP_BLOCK = 256


# ---------------------------------------------------------------------------
# nearest code search

def nearest_code_numpy(x: np.ndarray, codes: np.ndarray):
    """Exact squared-L2 nearest code per row. Ties resolve to the lowest index."""
    n = x.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=x.dtype)
    for s in range(0, n, _NP_BLOCK):
        diff = x[s:s + _NP_BLOCK, None, :] - codes[None, :, :]
        d = np.einsum("nkd,nkd->nk", diff, diff)
        # np.argmin returns the first occurrence of the minimum
        j = np.argmin(d, axis=1)
        idx[s:s + _NP_BLOCK] = j
        dist[s:s + _NP_BLOCK] = d[np.arange(j.shape[0]), j]
    return idx, dist


def _nearest_code_loop(x, codes):
    n, dim = x.shape
    k = codes.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=x.dtype)
    for i in range(n):
        best = np.inf
        best_j = 0
        for j in range(k):
            acc = 0.0
            for d in range(dim):
                t = x[i, d] - codes[j, d]
                acc += t * t
                if acc >= best:
                    break
            if acc < best:
                best = acc
                best_j = j
        idx[i] = best_j
        dist[i] = best
    return idx, dist


# ---------------------------------------------------------------------------
# centroid accumulation for Lloyd steps

def accumulate_centroids_numpy(x: np.ndarray, idx: np.ndarray, k: int):
    """Per-code sums and counts of the rows assigned to each code."""
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, idx, x)
    counts = np.bincount(idx, minlength=k).astype(np.int64)
    return sums, counts


def _accumulate_centroids_loop(x, idx, k):
    n, dim = x.shape
    sums = np.zeros((k, dim), dtype=np.float64)
    counts = np.zeros(k, dtype=np.int64)
    for i in range(n):
        j = idx[i]
        counts[j] += 1
        for d in range(dim):
            sums[j, d] += x[i, d]
    return sums, counts


# ---------------------------------------------------------------------------
# separable "valid" filtering over the last two axes (SSIM windows)

def filter2d_valid_numpy(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate each (H, W) plane of ``img`` (shape (F, H, W)) with
    ``outer(kernel, kernel)``, keeping only fully-covered positions."""
    win = kernel.shape[0]
    v = np.lib.stride_tricks.sliding_window_view(img, win, axis=1)
    tmp = np.einsum("fhwk,k->fhw", v, kernel)
    h = np.lib.stride_tricks.sliding_window_view(tmp, win, axis=2)
    return np.einsum("fhwk,k->fhw", h, kernel)


def _filter2d_valid_loop(img, kernel):
    f, hgt, wid = img.shape
    win = kernel.shape[0]
    oh = hgt - win + 1
    ow = wid - win + 1
    tmp = np.zeros((f, oh, wid), dtype=np.float64)
    for a in range(f):
        for y in range(oh):
            for x in range(wid):
                acc = 0.0
                for k in range(win):
                    acc += img[a, y + k, x] * kernel[k]
                tmp[a, y, x] = acc
    out = np.zeros((f, oh, ow), dtype=np.float64)
    for a in range(f):
        for y in range(oh):
            for x in range(ow):
                acc = 0.0
                for k in range(win):
                    acc += tmp[a, y, x + k] * kernel[k]
                out[a, y, x] = acc
    return out


if HAVE_NUMBA:
    nearest_code_numba = njit(cache=False, nogil=True)(_nearest_code_loop)
    accumulate_centroids_numba = njit(cache=False, nogil=True)(_accumulate_centroids_loop)
    filter2d_valid_numba = njit(cache=False, nogil=True)(_filter2d_valid_loop)
else:  # pragma: no cover
    nearest_code_numba = nearest_code_numpy
    accumulate_centroids_numba = accumulate_centroids_numpy
    filter2d_valid_numba = filter2d_valid_numpy


def nearest_code(x: np.ndarray, codes: np.ndarray):
    x = np.ascontiguousarray(x)
    codes = np.ascontiguousarray(codes, dtype=x.dtype)
    if USE_NUMBA:
        return nearest_code_numba(x, codes)
    return nearest_code_numpy(x, codes)


def accumulate_centroids(x: np.ndarray, idx: np.ndarray, k: int):
    x = np.ascontiguousarray(x, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if USE_NUMBA:
        return accumulate_centroids_numba(x, idx, k)
    return accumulate_centroids_numpy(x, idx, k)


def filter2d_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    img = np.ascontiguousarray(img, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if USE_NUMBA:
        return filter2d_valid_numba(img, kernel)
    return filter2d_valid_numpy(img, kernel)
