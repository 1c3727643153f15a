# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must stay identical to ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, log1p, sqrt, INFINITY

cnp.import_array()


def group_mask(int grid_h, int grid_w, int n_target, double mean_side,
               const double[:] uniforms):
    cdef int n = grid_h * grid_w
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] mask_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[:] mask = mask_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] added_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[:] added = added_arr
    cdef Py_ssize_t n_uni = uniforms.shape[0]
    cdef Py_ssize_t k = 0
    cdef int count = 0, n_added = 0
    cdef int free, r, idx, seed, sr, sc, h, w, top, left, i, j, t
    cdef int excess, pick
    cdef cnp.int64_t tmp
    cdef double geo_p = 1.0 / mean_side
    cdef double log_q = log1p(-geo_p) if geo_p < 1.0 else 0.0

    if n_target > n:
        raise ValueError("n_target exceeds grid size")
    if n_target <= 0:
        return mask_arr
    if n_uni < 6 * n:
        raise ValueError("need at least 6*n uniforms")

    while count < n_target:
        free = n - count
        r = <int>floor(uniforms[k] * free)
        k += 1
        if r >= free:
            r = free - 1
        seed = -1
        idx = 0
        for i in range(n):
            if mask[i] == 0:
                if idx == r:
                    seed = i
                    break
                idx += 1
        sr = seed // grid_w
        sc = seed % grid_w
        if log_q == 0.0:
            h = 1
            w = 1
        else:
            h = 1 + <int>floor(log1p(-uniforms[k]) / log_q)
            w = 1 + <int>floor(log1p(-uniforms[k + 1]) / log_q)
        k += 2
        if h > grid_h:
            h = grid_h
        if w > grid_w:
            w = grid_w
        top = sr - <int>floor(uniforms[k] * h) + grid_h
        left = sc - <int>floor(uniforms[k + 1] * w) + grid_w
        k += 2
        n_added = 0
        for i in range(h):
            for j in range(w):
                t = ((top + i) % grid_h) * grid_w + (left + j) % grid_w
                if mask[t] == 0:
                    mask[t] = 1
                    added[n_added] = t
                    n_added += 1
        count += n_added

    excess = count - n_target
    for i in range(excess):
        pick = i + <int>floor(uniforms[k] * (n_added - i))
        k += 1
        if pick >= n_added:
            pick = n_added - 1
        tmp = added[i]
        added[i] = added[pick]
        added[pick] = tmp
        mask[added[i]] = 0
    return mask_arr


def directed_min_dist(const cnp.int64_t[:, :] a, const cnp.int64_t[:, :] b):
    cdef Py_ssize_t na = a.shape[0], nb = b.shape[0], i, j
    cdef cnp.int64_t dy, dx, d2, best
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(na, dtype=np.float64)
    if nb == 0:
        raise ValueError("empty target point set")
    for i in range(na):
        best = -1
        for j in range(nb):
            dy = a[i, 0] - b[j, 0]
            dx = a[i, 1] - b[j, 1]
            d2 = dy * dy + dx * dx
            if best < 0 or d2 < best:
                best = d2
        out[i] = sqrt(<double>best)
    return out


def silhouette_samples(const double[:, :] x, const cnp.int64_t[:] labels,
                       int n_clusters):
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1], i, j, c, f
    cdef double acc, diff, a, b, m
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sums_arr = np.zeros(n_clusters, dtype=np.float64)
    cdef double[:] sums = sums_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts_arr = np.zeros(n_clusters, dtype=np.int64)
    cdef cnp.int64_t[:] counts = counts_arr
    for i in range(n):
        counts[labels[i]] += 1
    for i in range(n):
        for c in range(n_clusters):
            sums[c] = 0.0
        for j in range(n):
            if j == i:
                continue
            acc = 0.0
            for f in range(dim):
                diff = x[i, f] - x[j, f]
                acc += diff * diff
            sums[labels[j]] += sqrt(acc)
        c = labels[i]
        if counts[c] <= 1:
            out[i] = 0.0
            continue
        a = sums[c] / (counts[c] - 1)
        b = INFINITY
        for j in range(n_clusters):
            if j != c and counts[j] > 0 and sums[j] / counts[j] < b:
                b = sums[j] / counts[j]
        if b == INFINITY:
            out[i] = 0.0
            continue
        m = a if a > b else b
        out[i] = 0.0 if m == 0.0 else (b - a) / m
    return out


def tie_grouped_counts(const double[:] sorted_scores, const cnp.int64_t[:] sorted_labels):
    """Cumulative (tp, fp) at each distinct threshold of a descending sweep."""
    cdef Py_ssize_t n = sorted_scores.shape[0], i, g = 0
    cdef cnp.int64_t tp = 0, fp = 0
    cdef cnp.ndarray[cnp.int64_t, ndim=1] tps = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] fps = np.empty(n, dtype=np.int64)
    for i in range(n):
        if sorted_labels[i]:
            tp += 1
        else:
            fp += 1
        if i == n - 1 or sorted_scores[i + 1] != sorted_scores[i]:
            tps[g] = tp
            fps[g] = fp
            g += 1
    return tps[:g], fps[:g]
