"""Embedding extraction and manifold-quality metrics (k-means, Rand index,
silhouette), plus CSV export for external plotting."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from . import kernels
from .classification import class_token_features, soc  # noqa: F401  (soc re-exported)
from .config import RunConfig
from .data import Dataset
from .vit import VisionTransformer


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    ids: list
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if len(self.ids) != len(self.embeddings):
            raise ValueError("ids and embeddings differ in length")
        if not np.isfinite(self.embeddings).all():
            raise ValueError("embeddings contain non-finite values")


def extract_features(backbone: VisionTransformer, dataset: Dataset) -> EmbeddingSet:
    feats = class_token_features(backbone, dataset.images).double().numpy()
    return EmbeddingSet(feats, list(dataset.ids), np.asarray(dataset.labels))


def export_embeddings(path, emb: EmbeddingSet):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        d = emb.embeddings.shape[1]
        writer.writerow(["id", "label"] + [f"e_{i}" for i in range(d)])
        for sid, lab, row in zip(emb.ids, emb.labels, emb.embeddings):
            writer.writerow([sid, int(lab)] + [repr(float(v)) for v in row])


@dataclass
class ClusterResult:
    assignment: np.ndarray
    inertia: float
    degenerate: bool = False


def _lloyd(x, centers, max_iter, tol):
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        assign = d2.argmin(1)
        new = centers.copy()
        for k in range(len(centers)):
            members = x[assign == k]
            if len(members):
                new[k] = members.mean(0)
        shift = float(((new - centers) ** 2).sum())
        centers = new
        if shift <= tol:
            break
    d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
    assign = d2.argmin(1)
    return assign, float(d2[np.arange(len(x)), assign].sum())


def kmeans(x, k=2, restarts=10, max_iter=300, tol=1e-6, seed=0) -> ClusterResult:
    """Lloyd's algorithm with greedy farthest-point seeding from a random
    first centre; the lowest-inertia restart wins. Labels are canonicalised
    so that row 0 is in cluster 0, the next new cluster is 1, and so on."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise ValueError(f"need at least {k} points, got {len(x)}")
    if np.all(x == x[0]):
        return ClusterResult(np.zeros(len(x), dtype=np.int64), 0.0, degenerate=True)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers = [x[rng.integers(len(x))]]
        for _ in range(1, k):
            d2 = np.min([((x - c) ** 2).sum(1) for c in centers], axis=0)
            centers.append(x[int(d2.argmax())])
        assign, inertia = _lloyd(x, np.array(centers), max_iter, tol)
        if best is None or inertia < best[1]:
            best = (assign, inertia)
    assign = _canonical(best[0])
    return ClusterResult(assign, best[1], degenerate=len(np.unique(assign)) < k)


def _canonical(assign):
    mapping = {}
    out = np.empty(len(assign), dtype=np.int64)
    for i, a in enumerate(assign):
        out[i] = mapping.setdefault(int(a), len(mapping))
    return out


def cluster2(embeddings, seed=0, restarts=10, max_iter=300, tol=1e-6) -> ClusterResult:
    return kmeans(embeddings, 2, restarts, max_iter, tol, seed)


def rand_index(labels, clusters):
    """Fraction of point pairs on which the two partitions agree."""
    labels, clusters = np.asarray(labels).ravel(), np.asarray(clusters).ravel()
    if len(labels) != len(clusters):
        raise ValueError("labels and clusters differ in length")
    n = len(labels)
    if n < 2:
        raise ValueError("Rand index needs at least 2 points")
    _, li = np.unique(labels, return_inverse=True)
    _, ci = np.unique(clusters, return_inverse=True)
    table = np.zeros((li.max() + 1, ci.max() + 1), dtype=np.int64)
    np.add.at(table, (li, ci), 1)
    same_both = sum(comb(int(v), 2) for v in table.ravel())
    same_label = sum(comb(int(v), 2) for v in table.sum(1))
    same_cluster = sum(comb(int(v), 2) for v in table.sum(0))
    total = comb(n, 2)
    agree = total + 2 * same_both - same_label - same_cluster
    return agree / total


def silhouette(embeddings, clusters):
    """Mean silhouette (Euclidean); singleton clusters contribute 0."""
    x = np.ascontiguousarray(embeddings, dtype=np.float64)
    _, ci = np.unique(np.asarray(clusters).ravel(), return_inverse=True)
    if len(ci) != len(x):
        raise ValueError("embeddings and clusters differ in length")
    k = int(ci.max()) + 1 if len(ci) else 0
    if k < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    return float(np.mean(kernels.silhouette_samples(x, ci.astype(np.int64), k)))


def cluster_eval(backbone: VisionTransformer, dataset: Dataset, cfg: RunConfig):
    """Two-cluster analysis of class-token embeddings against binary groups
    (label 0 vs any other label)."""
    emb = extract_features(backbone, dataset)
    groups = (emb.labels > 0).astype(np.int64)
    c = cfg.cluster
    res = cluster2(emb.embeddings, cfg.seed, c.restarts, c.max_iter, c.tol)
    report = {"n": len(groups), "rand_index": rand_index(groups, res.assignment),
              "degenerate": res.degenerate, "inertia": res.inertia,
              "silhouette": None if res.degenerate else silhouette(emb.embeddings, res.assignment)}
    return report, emb
