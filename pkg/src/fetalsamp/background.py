"""Auxiliary background labels from artifact intensities.

Voxels that are background in the template but non-zero in the image are
clustered by intensity into ``k`` auxiliary labels (IDs 8, 9, ...), ordered
by ascending cluster centre. Collapsing those labels to 0 restores the
template exactly.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import InvalidInputError, check_positive_int, check_same_grid
from .volume import LabelVolume

FIRST_AUX_LABEL = 8


def _segment_cost(c1, c2, cw, i, j):
    """Weighted SSE of sorted values [i, j) from prefix sums (vectorised)."""
    w = cw[j] - cw[i]
    s = c1[j] - c1[i]
    return np.maximum(c2[j] - c2[i] - s * s / w, 0.0)


def optimal_kmeans_1d(values, k, weights=None):
    """Globally optimal 1-D k-means.

    Uses the monotone-split dynamic programme, evaluated level by level with
    divide and conquer so each layer costs O(n log n) vectorised work.

    Returns ``(centers, boundaries, sse)`` where ``centers`` ascend and
    ``boundaries`` are the k+1 split indices into the sorted values.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(x, kind="stable")
    x = x[order]
    w = np.ones_like(x) if weights is None else np.asarray(weights, np.float64).ravel()[order]
    n = x.size
    if n == 0:
        raise InvalidInputError("no values to cluster")
    k = min(check_positive_int(k, "k"), n)
    cw = np.concatenate([[0.0], np.cumsum(w)])
    c1 = np.concatenate([[0.0], np.cumsum(w * x)])
    c2 = np.concatenate([[0.0], np.cumsum(w * x * x)])

    # cost[j] = best SSE of the first j values using m clusters
    cost = np.zeros(n + 1)
    cost[1:] = _segment_cost(c1, c2, cw, np.zeros(n, dtype=np.int64), np.arange(1, n + 1))
    argmins = []
    for m in range(2, k + 1):
        new_cost = np.full(n + 1, np.inf)
        arg = np.zeros(n + 1, dtype=np.int64)
        # tasks: j range [jlo, jhi], split range [olo, ohi]
        jlo = np.array([m]); jhi = np.array([n])
        olo = np.array([m - 1]); ohi = np.array([n - 1])
        while jlo.size:
            mid = (jlo + jhi) // 2
            hi = np.minimum(mid - 1, ohi)
            cnt = hi - olo + 1
            seg = np.repeat(np.arange(mid.size), cnt)
            starts = np.repeat(olo - np.concatenate([[0], np.cumsum(cnt)[:-1]]), cnt)
            cand = np.arange(seg.size) + starts
            jj = mid[seg]
            vals = cost[cand] + _segment_cost(c1, c2, cw, cand, jj)
            # leftmost argmin per segment
            seg_min = np.minimum.reduceat(vals, np.concatenate([[0], np.cumsum(cnt)[:-1]]))
            hit = vals <= seg_min[seg]
            idx = np.flatnonzero(hit)
            first = cand[idx[np.unique(seg[idx], return_index=True)[1]]]
            new_cost[mid] = seg_min
            arg[mid] = first
            left = mid - 1 >= jlo
            right = mid + 1 <= jhi
            jlo, jhi, olo, ohi = (
                np.concatenate([jlo[left], mid[right] + 1]),
                np.concatenate([mid[left] - 1, jhi[right]]),
                np.concatenate([olo[left], first[right]]),
                np.concatenate([first[left], ohi[right]]),
            )
        argmins.append(arg)
        cost = new_cost

    bounds = [n]
    j = n
    for arg in reversed(argmins):
        j = int(arg[j])
        bounds.append(j)
    bounds.append(0)
    bounds = np.array(bounds[::-1])
    centers = np.array([(c1[b] - c1[a]) / (cw[b] - cw[a]) for a, b in zip(bounds[:-1], bounds[1:])])
    return centers, bounds, float(cost[n])


class KMeans1D(ClusterMixin, BaseEstimator):
    """Exact 1-D k-means on unique values weighted by multiplicity.

    ``random_state`` is accepted for interface parity; the solution is
    deterministic and does not depend on it.
    """

    def __init__(self, n_clusters=4, random_state=None):
        self.n_clusters = n_clusters
        self.random_state = random_state

    def fit(self, X, y=None):
        x = np.asarray(X, dtype=np.float64).ravel()
        if x.size == 0:
            raise InvalidInputError("no values to cluster")
        uniq, counts = np.unique(x, return_counts=True)
        k = min(check_positive_int(self.n_clusters, "n_clusters"), uniq.size)
        centers, bounds, sse = optimal_kmeans_1d(uniq, k, counts)
        self.cluster_centers_ = centers
        self.inertia_ = sse
        # first unique value of each cluster after the first
        self._edges = uniq[bounds[1:-1]]
        self.labels_ = self.predict(x)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.searchsorted(self._edges, np.asarray(X, dtype=np.float64), side="right")


@dataclass(frozen=True)
class BackgroundSplit:
    generation_map: LabelVolume
    gt_mapping: dict
    k: int
    cluster_centers: tuple


def subdivide_background(template, image, k, seed=0):
    """Label artifact voxels (background with non-zero intensity) by intensity cluster."""
    check_same_grid(template, image, "template and image")
    k = check_positive_int(k, "k")
    artifact = (template.labels == 0) & (image.values > 0)
    if not artifact.any():
        return BackgroundSplit(template, {}, 0, ())
    vals = image.values[artifact]
    lo, hi = vals.min(), vals.max()
    scaled = (vals - lo) / (hi - lo) if hi > lo else np.zeros_like(vals)
    if k == 1:
        assign = np.zeros(vals.size, dtype=np.int64)
        centers = np.array([scaled.mean()])
    else:
        km = KMeans1D(k, random_state=seed).fit(scaled)
        assign, centers = km.labels_, km.cluster_centers_
    k_eff = centers.size
    base = max(FIRST_AUX_LABEL, max(template.nomenclature) + 1)
    labels = np.array(template.labels)
    labels[artifact] = base + assign
    nomenclature = dict(template.nomenclature)
    for i in range(k_eff):
        nomenclature[base + i] = f"bg_artifact_{i + 1}"
    return BackgroundSplit(LabelVolume(labels, template.affine, nomenclature),
                           {base + i: 0 for i in range(k_eff)}, k_eff,
                           tuple(float(c) for c in centers))


def collapse_to_gt(split):
    labels = np.array(split.generation_map.labels)
    nomenclature = dict(split.generation_map.nomenclature)
    for aux in split.gt_mapping:
        labels[labels == aux] = 0
        nomenclature.pop(aux, None)
    return LabelVolume(labels, split.generation_map.affine, nomenclature)
