"""Shape-driven subgroup discovery and per-template sampling weights.

The pipeline is min-max scaling with a boost on selected columns, projection
onto the leading principal components, full-covariance Gaussian mixture
clustering, and finally weights that make every occupied subgroup equally
likely while keeping templates inside a subgroup equally likely.
"""

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import InvalidInputError, check_matrix, check_positive_int
from .features import FeatureConfig

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-9


# --------------------------------------------------------------------------
# Scaling
# --------------------------------------------------------------------------

class BoostedMinMaxScaler(TransformerMixin, BaseEstimator):
    """Per-column min-max scaling to [0, 1], then multiply boosted columns.

    Constant columns map to 0.

    Parameters
    ----------
    boost_mask : array-like of bool, optional
        Columns to boost. Defaults to the mask of the default FeatureConfig.
    boost_factor : float, default=2.0
    """

    def __init__(self, boost_mask=None, boost_factor=2.0):
        self.boost_mask = boost_mask
        self.boost_factor = boost_factor

    def fit(self, X, y=None):
        X = check_matrix(X)
        if X.shape[0] < 2:
            raise InvalidInputError("cannot scale a single template")
        mask = (FeatureConfig().boost_mask if self.boost_mask is None
                else np.asarray(self.boost_mask, dtype=bool))
        if mask.shape != (X.shape[1],):
            raise InvalidInputError(
                f"boost mask has {mask.size} entries for {X.shape[1]} columns")
        self.data_min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        self.boost_mask_ = mask
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "data_min_")
        X = check_matrix(X, n_features=self.n_features_in_)
        span = self.data_max_ - self.data_min_
        constant = span == 0
        scaled = (X - self.data_min_) / np.where(constant, 1.0, span)
        scaled[:, constant] = 0.0
        scaled[:, self.boost_mask_] *= self.boost_factor
        return scaled


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------

class CovariancePCA(TransformerMixin, BaseEstimator):
    """Principal components of the column-centred sample covariance.

    Components are computed from the SVD of the centred data. Each component
    is sign-flipped so that its entry of largest magnitude is positive.
    Variances that vanish to rounding are reported as exactly 0.
    """

    def __init__(self, n_components=3):
        self.n_components = n_components

    def fit(self, X, y=None):
        n_comp = check_positive_int(self.n_components, "n_components")
        X = check_matrix(X)
        n, d = X.shape
        if n < n_comp + 1:
            raise InvalidInputError(
                f"PCA with {n_comp} components needs at least {n_comp + 1} samples, got {n}")
        if d < n_comp:
            raise InvalidInputError(f"cannot extract {n_comp} components from {d} columns")
        mean = X.mean(axis=0)
        centered = X - mean
        _, s, vt = np.linalg.svd(centered, full_matrices=True)
        components = vt[:n_comp].copy()
        idx = np.argmax(np.abs(components), axis=1)
        signs = np.sign(components[np.arange(n_comp), idx])
        components *= signs[:, None]
        sv = np.zeros(n_comp)
        sv[:min(n_comp, s.size)] = s[:n_comp]
        cutoff = (s[0] if s.size else 0.0) * max(n, d) * np.finfo(float).eps
        sv[sv <= cutoff] = 0.0
        self.mean_ = mean
        self.components_ = components
        self.explained_variance_ = sv ** 2 / (n - 1)
        self.total_variance_ = float(np.sum(centered ** 2) / (n - 1))
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise InvalidInputError(
                f"expected {self.n_features_in_} columns, got shape {X.shape}")
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z) @ self.components_ + self.mean_


# --------------------------------------------------------------------------
# Gaussian mixture
# --------------------------------------------------------------------------

def _kmeans_plusplus(X, k, rng):
    """Greedy k-means++ seeding.

    Each new centre is the best of ``2 + log(k)`` candidates drawn with
    probability proportional to squared distance, judged by the resulting
    potential (sum of squared distances to the nearest centre).
    """
    n = X.shape[0]
    trials = 2 + int(np.log(k))
    centers = [int(rng.integers(n))]
    d2 = np.sum((X - X[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            cand = np.minimum(np.searchsorted(np.cumsum(d2), rng.random(trials) * total), n - 1)
        else:
            cand = rng.integers(n, size=trials)
        cand_d2 = np.minimum(d2[None], np.sum((X[None] - X[cand][:, None]) ** 2, axis=2))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        centers.append(int(cand[best]))
        d2 = cand_d2[best]
    return X[centers]


def _estimate_params(X, resp, reg_covar):
    n, d = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(resp.dtype).eps
    means = resp.T @ X / nk[:, None]
    covs = np.empty((resp.shape[1], d, d))
    for k in range(resp.shape[1]):
        diff = X - means[k]
        covs[k] = (resp[:, k] * diff.T) @ diff / nk[k]
        covs[k] = 0.5 * (covs[k] + covs[k].T)
        covs[k].flat[::d + 1] += reg_covar
    return nk / n, means, covs


def _weighted_log_prob(X, weights, means, covs):
    n, d = X.shape
    out = np.empty((n, weights.size))
    for k in range(weights.size):
        chol = np.linalg.cholesky(covs[k])
        sol = np.linalg.solve(chol, (X - means[k]).T)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        with np.errstate(divide="ignore"):
            log_w = np.log(weights[k])
        out[:, k] = -0.5 * (d * np.log(2 * np.pi) + log_det + np.sum(sol ** 2, axis=0)) + log_w
    return out


class FullCovarianceGMM(ClusterMixin, BaseEstimator):
    """Gaussian mixture with full covariances fitted by EM.

    Initialisation is greedy k-means++ seeding from ``random_state`` followed
    by a hard nearest-centre assignment (a single initialisation). Iteration
    stops when the mean per-sample log-likelihood changes by less than ``tol``.

    Attributes
    ----------
    weights_, means_, covariances_ : ndarray
    log_likelihood_ : float
        Mean per-sample log-likelihood of the returned parameters.
    log_likelihood_history_ : list of float
        One entry per E-step.
    converged_ : bool
    n_iter_ : int
    """

    def __init__(self, n_components=1, reg_covar=1e-6, tol=1e-4, max_iter=200,
                 random_state=0):
        self.n_components = n_components
        self.reg_covar = reg_covar
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        k = check_positive_int(self.n_components, "n_components")
        X = check_matrix(X)
        if X.shape[0] < k:
            raise InvalidInputError(f"{X.shape[0]} points cannot form {k} components")
        rng = np.random.default_rng(self.random_state)
        centers = _kmeans_plusplus(X, k, rng)
        dist = ((X[:, None, :] - centers[None]) ** 2).sum(axis=2)
        resp = np.zeros((X.shape[0], k))
        resp[np.arange(X.shape[0]), np.argmin(dist, axis=1)] = 1.0

        params = _estimate_params(X, resp, self.reg_covar)
        history = []
        best = None
        prev = -np.inf
        self.converged_ = False
        for it in range(1, self.max_iter + 1):
            wlp = _weighted_log_prob(X, *params)
            log_norm = logsumexp(wlp, axis=1)
            ll = float(np.mean(log_norm))
            history.append(ll)
            if best is None or ll >= best[0]:
                best = (ll, params, it)
            if abs(ll - prev) < self.tol:
                self.converged_ = True
                break
            prev = ll
            resp = np.exp(wlp - log_norm[:, None])
            params = _estimate_params(X, resp, self.reg_covar)

        if not self.converged_:
            logger.warning("EM did not converge in %d iterations; keeping best iterate",
                           self.max_iter)
        ll, (weights, means, covs), it = (best if not self.converged_
                                          else (history[-1], params, len(history)))
        self.weights_ = weights
        self.means_ = means
        self.covariances_ = covs
        self.log_likelihood_ = ll
        self.log_likelihood_history_ = history
        self.n_iter_ = it
        self.n_features_in_ = X.shape[1]
        self.labels_ = self.predict(X)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "means_")
        return check_matrix(X, n_features=self.n_features_in_)

    def score_samples(self, X):
        X = self._check_X(X)
        return logsumexp(_weighted_log_prob(X, self.weights_, self.means_, self.covariances_),
                         axis=1)

    def predict_proba(self, X):
        X = self._check_X(X)
        wlp = _weighted_log_prob(X, self.weights_, self.means_, self.covariances_)
        return np.exp(wlp - logsumexp(wlp, axis=1)[:, None])

    def predict(self, X):
        X = self._check_X(X)
        # argmax picks the lowest component index on ties
        return np.argmax(_weighted_log_prob(X, self.weights_, self.means_, self.covariances_),
                         axis=1)


# --------------------------------------------------------------------------
# Functional surface and result records
# --------------------------------------------------------------------------

@dataclass
class ScaledFeatureMatrix:
    template_ids: list
    matrix: np.ndarray
    data_min: np.ndarray
    data_max: np.ndarray
    boost_mask: np.ndarray
    boost_factor: float = 2.0


@dataclass
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray


@dataclass
class GmmModel:
    K: int
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    seed: int
    log_likelihood: float
    converged: bool = True
    n_iter: int = 0
    log_likelihood_history: list = field(default_factory=list)

    def to_estimator(self):
        est = FullCovarianceGMM(n_components=self.K, random_state=self.seed)
        est.weights_ = np.asarray(self.weights)
        est.means_ = np.asarray(self.means)
        est.covariances_ = np.asarray(self.covariances)
        est.n_features_in_ = est.means_.shape[1]
        return est


def scale_and_boost(vectors, cfg=None):
    """Scale a list of CharacteristicVector into a ScaledFeatureMatrix."""
    cfg = cfg or FeatureConfig()
    if len(vectors) < 2:
        raise InvalidInputError("cannot scale a single template")
    X = np.vstack([v.values for v in vectors])
    if X.shape[1] != cfg.n_features:
        raise InvalidInputError(f"vectors have {X.shape[1]} values, expected {cfg.n_features}")
    scaler = BoostedMinMaxScaler(cfg.boost_mask, cfg.boost_factor).fit(X)
    return ScaledFeatureMatrix([v.template_id for v in vectors], scaler.transform(X),
                               scaler.data_min_, scaler.data_max_, scaler.boost_mask_,
                               cfg.boost_factor)


def fit_pca(matrix, n_components=3):
    X = matrix.matrix if isinstance(matrix, ScaledFeatureMatrix) else matrix
    pca = CovariancePCA(n_components).fit(X)
    return PcaBasis(pca.mean_, pca.components_, pca.explained_variance_)


def project(matrix, basis):
    X = np.asarray(matrix.matrix if isinstance(matrix, ScaledFeatureMatrix) else matrix,
                   dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != basis.components.shape[1]:
        raise InvalidInputError(
            f"column count mismatch: data {X.shape}, basis {basis.components.shape}")
    return (X - basis.mean) @ basis.components.T


def fit_gmm(points, K, seed, **kwargs):
    gmm = FullCovarianceGMM(n_components=K, random_state=seed, **kwargs).fit(points)
    return GmmModel(K, gmm.weights_, gmm.means_, gmm.covariances_, seed,
                    gmm.log_likelihood_, gmm.converged_, gmm.n_iter_,
                    list(gmm.log_likelihood_history_))


def assign_subgroups(model, points):
    return model.to_estimator().predict(points)


def eq1_weights(assignments, K):
    """Weights 1 / (occupied subgroups * subgroup size) per template."""
    if not assignments:
        raise InvalidInputError("empty assignment map")
    K = check_positive_int(K, "K")
    sizes = {}
    for tid, g in assignments.items():
        g = int(g)
        if not 0 <= g < K:
            raise InvalidInputError(f"template {tid!r} has subgroup {g} outside [0, {K})")
        sizes[g] = sizes.get(g, 0) + 1
    occupied = len(sizes)
    return {tid: 1.0 / (occupied * sizes[int(g)]) for tid, g in assignments.items()}


def uniform_weights(template_ids):
    return eq1_weights({t: 0 for t in template_ids}, 1)


# --------------------------------------------------------------------------
# Pools and the sampling table
# --------------------------------------------------------------------------

@dataclass
class PoolWeights:
    pool_id: str
    weights: dict
    fraction: float
    subgroups: dict = None


@dataclass
class SamplingEntry:
    pool: str
    subgroup: int
    weight: float


@dataclass
class SamplingTable:
    entries: dict
    pool_fractions: dict

    def total(self):
        return math.fsum(e.weight for e in self.entries.values())

    def pool_total(self, pool_id):
        return math.fsum(e.weight for e in self.entries.values() if e.pool == pool_id)

    def rows(self):
        order = {p: i for i, p in enumerate(self.pool_fractions)}
        return sorted(((tid, e) for tid, e in self.entries.items()),
                      key=lambda r: (order[r[1].pool], r[0]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["template_id", "pool", "subgroup", "weight"])
            for tid, e in self.rows():
                w.writerow([tid, e.pool, e.subgroup, format(e.weight, ".9g")])

    @classmethod
    def from_csv(cls, path):
        entries, fractions = {}, {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                e = SamplingEntry(row["pool"], int(row["subgroup"]), float(row["weight"]))
                entries[row["template_id"]] = e
                fractions[e.pool] = fractions.get(e.pool, 0.0) + e.weight
        return cls(entries, fractions)


def combine_pools(pools):
    """Scale each pool's normalised weights by its fraction and merge.

    ``pools`` holds PoolWeights or ``(pool_id, weights, fraction[, subgroups])``
    tuples.
    """
    pools = [p if isinstance(p, PoolWeights) else PoolWeights(*p) for p in pools]
    if not pools:
        raise InvalidInputError("no pools given")
    errors = []
    for p in pools:
        if not p.fraction > 0:
            errors.append(f"pool {p.pool_id!r}: fraction must be > 0, got {p.fraction}")
        s = math.fsum(p.weights.values())
        if abs(s - 1.0) > WEIGHT_TOL:
            errors.append(f"pool {p.pool_id!r}: weights sum to {s!r}, not 1")
        if any(not w > 0 for w in p.weights.values()):
            errors.append(f"pool {p.pool_id!r}: weights must be positive")
    total = math.fsum(p.fraction for p in pools)
    if abs(total - 1.0) > WEIGHT_TOL:
        errors.append("pool fractions " + ", ".join(
            f"{p.pool_id}={p.fraction}" for p in pools) + f" sum to {total}, not 1")
    if len({p.pool_id for p in pools}) != len(pools):
        errors.append("duplicate pool ids")
    if errors:
        raise InvalidInputError("; ".join(errors))

    entries = {}
    for p in pools:
        for tid, w in p.weights.items():
            if tid in entries:
                raise InvalidInputError(f"template {tid!r} appears in more than one pool")
            sub = int(p.subgroups[tid]) if p.subgroups else 0
            entries[tid] = SamplingEntry(p.pool_id, sub, w * p.fraction)
    return SamplingTable(entries, {p.pool_id: p.fraction for p in pools})


# --------------------------------------------------------------------------
# End-to-end estimator
# --------------------------------------------------------------------------

class DataDrivenSampler(ClusterMixin, BaseEstimator):
    """Scale, boost, project and cluster feature vectors; derive sampling weights.

    Parameters
    ----------
    n_subgroups : int
        Number of mixture components.
    n_pca_components : int, default=3
    boost_mask : array-like of bool, optional
    boost_factor : float, default=2.0
    random_state : int, default=0
    reg_covar, tol, max_iter
        Passed to :class:`FullCovarianceGMM`.

    Attributes
    ----------
    labels_ : ndarray of int
        Subgroup per row of the fitted matrix.
    sample_weight_ : ndarray
        Sampling weight per row; sums to 1.
    scaler_, pca_, gmm_ : fitted sub-estimators
    embedding_ : ndarray of shape (n, n_pca_components)
    """

    def __init__(self, n_subgroups=4, n_pca_components=3, boost_mask=None, boost_factor=2.0,
                 random_state=0, reg_covar=1e-6, tol=1e-4, max_iter=200):
        self.n_subgroups = n_subgroups
        self.n_pca_components = n_pca_components
        self.boost_mask = boost_mask
        self.boost_factor = boost_factor
        self.random_state = random_state
        self.reg_covar = reg_covar
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_matrix(X)
        k = check_positive_int(self.n_subgroups, "n_subgroups")
        if k > X.shape[0]:
            raise InvalidInputError(f"K={k} exceeds the pool size {X.shape[0]}")
        self.scaler_ = BoostedMinMaxScaler(self.boost_mask, self.boost_factor).fit(X)
        scaled = self.scaler_.transform(X)
        self.pca_ = CovariancePCA(self.n_pca_components).fit(scaled)
        self.embedding_ = self.pca_.transform(scaled)
        self.gmm_ = FullCovarianceGMM(k, self.reg_covar, self.tol, self.max_iter,
                                      self.random_state).fit(self.embedding_)
        self.labels_ = self.gmm_.predict(self.embedding_)
        w = eq1_weights(dict(enumerate(self.labels_)), k)
        self.sample_weight_ = np.array([w[i] for i in range(X.shape[0])])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "gmm_")
        return self.pca_.transform(self.scaler_.transform(X))

    def predict(self, X):
        return self.gmm_.predict(self.transform(X))

    def to_dict(self):
        """JSON-ready summary of every fitted parameter."""
        check_is_fitted(self, "gmm_")
        g = self.gmm_
        return {
            "n_subgroups": int(self.n_subgroups),
            "seed": int(self.random_state),
            "scaler": {"min": self.scaler_.data_min_.tolist(),
                       "max": self.scaler_.data_max_.tolist(),
                       "boost_mask": self.scaler_.boost_mask_.tolist(),
                       "boost_factor": float(self.boost_factor)},
            "pca": {"mean": self.pca_.mean_.tolist(),
                    "components": self.pca_.components_.tolist(),
                    "explained_variance": self.pca_.explained_variance_.tolist()},
            "gmm": {"weights": g.weights_.tolist(), "means": g.means_.tolist(),
                    "covariances": g.covariances_.tolist(),
                    "log_likelihood": g.log_likelihood_, "converged": bool(g.converged_),
                    "n_iter": int(g.n_iter_)},
        }
