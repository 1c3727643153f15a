"""Pure Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same four functions with the same results (bitwise
for the integer-valued outputs, to rounding for the float reductions).
"""
import math

import numpy as np


def group_mask(grid_h, grid_w, n_target, mean_side, uniforms):
    n = grid_h * grid_w
    mask = np.zeros(n, dtype=np.uint8)
    if n_target > n:
        raise ValueError("n_target exceeds grid size")
    if n_target <= 0:
        return mask
    if len(uniforms) < 6 * n:
        raise ValueError("need at least 6*n uniforms")
    u = uniforms
    geo_p = 1.0 / mean_side
    log_q = math.log1p(-geo_p) if geo_p < 1.0 else 0.0
    k = 0
    count = 0
    added = []
    while count < n_target:
        free = n - count
        r = min(int(math.floor(u[k] * free)), free - 1)
        k += 1
        seed = np.flatnonzero(mask == 0)[r]
        sr, sc = divmod(int(seed), grid_w)
        if log_q == 0.0:
            h = w = 1
        else:
            h = 1 + int(math.floor(math.log1p(-u[k]) / log_q))
            w = 1 + int(math.floor(math.log1p(-u[k + 1]) / log_q))
        k += 2
        h, w = min(h, grid_h), min(w, grid_w)
        # blocks wrap around the grid edges (torus), keeping coverage position-uniform
        top = sr - int(math.floor(u[k] * h))
        left = sc - int(math.floor(u[k + 1] * w))
        k += 2
        added = []
        for i in range(h):
            for j in range(w):
                t = ((top + i) % grid_h) * grid_w + (left + j) % grid_w
                if not mask[t]:
                    mask[t] = 1
                    added.append(t)
        count += len(added)

    # trim the overshoot uniformly among the last block's tokens
    for i in range(count - n_target):
        pick = min(i + int(math.floor(u[k] * (len(added) - i))), len(added) - 1)
        k += 1
        added[i], added[pick] = added[pick], added[i]
        mask[added[i]] = 0
    return mask


def directed_min_dist(a, b):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if len(b) == 0:
        raise ValueError("empty target point set")
    out = np.empty(len(a), dtype=np.float64)
    for start in range(0, len(a), 1024):
        chunk = a[start:start + 1024]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        out[start:start + 1024] = np.sqrt(d2.min(1).astype(np.float64))
    return out


def silhouette_samples(x, labels, n_clusters):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(x)
    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(dist, 0.0)
    onehot = np.zeros((n, n_clusters))
    onehot[np.arange(n), labels] = 1.0
    sums = dist @ onehot
    counts = onehot.sum(0)
    out = np.zeros(n)
    for i in range(n):
        c = labels[i]
        if counts[c] <= 1:
            continue
        a = sums[i, c] / (counts[c] - 1)
        others = [sums[i, j] / counts[j] for j in range(n_clusters)
                  if j != c and counts[j] > 0]
        if not others:
            continue
        b = min(others)
        m = max(a, b)
        out[i] = 0.0 if m == 0.0 else (b - a) / m
    return out


def tie_grouped_counts(sorted_scores, sorted_labels):
    sorted_scores = np.asarray(sorted_scores, dtype=np.float64)
    pos = np.asarray(sorted_labels, dtype=np.int64) != 0
    tp = np.cumsum(pos, dtype=np.int64)
    fp = np.cumsum(~pos, dtype=np.int64)
    last = np.ones(len(sorted_scores), dtype=bool)
    last[:-1] = sorted_scores[1:] != sorted_scores[:-1]
    return tp[last], fp[last]
