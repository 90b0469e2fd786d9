import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal
from sklearn.base import clone

from fetalsamp import InvalidInputError
from fetalsamp.features import CharacteristicVector, FeatureConfig
from fetalsamp.sampler import (BoostedMinMaxScaler, CovariancePCA, DataDrivenSampler,
                               FullCovarianceGMM, SamplingTable, assign_subgroups, combine_pools,
                               eq1_weights, fit_gmm, fit_pca, project, scale_and_boost)


def covariance_oracle(X, k=3):
    """Top-k eigenpairs of the explicit sample covariance matrix."""
    C = np.cov(X.T, ddof=1)
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals)[::-1][:k]
    return vals[order], vecs[:, order].T


def separated_clusters(seed, n_per=100, sep=10.0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0, 0, 0], [sep, 0, 0], [0, sep, sep]], float)
    X = np.vstack([rng.normal(c, 1.0, size=(n_per, 3)) for c in centers])
    y = np.repeat(np.arange(3), n_per)
    return X, y


def best_permutation_accuracy(pred, truth, k):
    best = 0.0
    for perm in itertools.permutations(range(k)):
        best = max(best, np.mean(np.array(perm)[pred] == truth))
    return best


# ----- scaling ------------------------------------------------------------

class TestScaling:
    def test_unboosted_and_boosted(self):
        X = np.array([[10.0, 10.0], [20.0, 20.0]])
        out = BoostedMinMaxScaler(boost_mask=[False, True]).fit_transform(X)
        assert out.tolist() == [[0.0, 0.0], [1.0, 2.0]]

    def test_constant_column(self):
        X = np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
        out = BoostedMinMaxScaler(boost_mask=[True, False]).fit_transform(X)
        assert out[:, 0].tolist() == [0.0, 0.0, 0.0]

    def test_single_template_rejected(self):
        with pytest.raises(InvalidInputError, match="single template"):
            scale_and_boost([CharacteristicVector("a", np.ones(21))])

    def test_ranges(self, rng):
        vecs = [CharacteristicVector(str(i), rng.uniform(0, 100, 21)) for i in range(9)]
        m = scale_and_boost(vecs)
        mask = FeatureConfig().boost_mask
        assert m.matrix[:, ~mask].min() >= 0 and m.matrix[:, ~mask].max() <= 1
        assert m.matrix[:, mask].max() == pytest.approx(2.0)
        assert m.template_ids == [str(i) for i in range(9)]


# ----- PCA ----------------------------------------------------------------

class TestPCA:
    def test_matches_covariance_eigensolve(self, rng):
        X = rng.normal(size=(10, 21))
        pca = CovariancePCA(3).fit(X)
        vals, vecs = covariance_oracle(X)
        for c, v in zip(pca.components_, vecs):
            assert abs(c @ v) > 1 - 1e-8
        assert np.allclose(pca.explained_variance_, vals, rtol=1e-8)

    def test_rank_one(self, rng):
        direction = rng.normal(size=21)
        X = np.outer(rng.normal(size=8), direction)
        basis = fit_pca(X)
        ev = basis.explained_variance
        assert ev[0] > 0 and ev[1] == 0 and ev[2] == 0
        G = basis.components @ basis.components.T
        assert np.allclose(G, np.eye(3), atol=1e-9)

    def test_identical_rows(self):
        X = np.tile(np.arange(21.0), (5, 1))
        basis = fit_pca(X)
        assert np.all(basis.explained_variance == 0)
        assert np.all(project(X, basis) == 0)
        assert np.allclose(basis.components @ basis.components.T, np.eye(3), atol=1e-9)

    def test_too_few_samples(self, rng):
        with pytest.raises(InvalidInputError):
            fit_pca(rng.normal(size=(3, 21)))

    def test_sign_convention(self, rng):
        pca = CovariancePCA().fit(rng.normal(size=(12, 21)))
        for c in pca.components_:
            assert c[np.argmax(np.abs(c))] > 0

    def test_projection_properties(self, rng):
        X = rng.normal(size=(15, 21))
        basis = fit_pca(X)
        assert np.allclose(project(basis.mean[None], basis), 0)
        # captured variance of the projection equals the top-3 eigenvalues
        Z = project(X, basis)
        full = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1]
        assert np.allclose(Z.var(axis=0, ddof=1), full[:3], rtol=1e-9)
        assert np.allclose(basis.explained_variance, full[:3], rtol=1e-9)
        # adding a direction orthogonal to all components changes nothing
        v = rng.normal(size=21)
        v -= basis.components.T @ (basis.components @ v)
        assert np.allclose(project(X + v, basis), Z, atol=1e-10)

    def test_column_mismatch(self, rng):
        basis = fit_pca(rng.normal(size=(6, 21)))
        with pytest.raises(InvalidInputError):
            project(rng.normal(size=(2, 20)), basis)


# ----- GMM ----------------------------------------------------------------

class TestGMM:
    def test_single_component(self, rng):
        X = rng.normal(size=(50, 3)) @ np.diag([1.0, 2.0, 0.5]) + 3
        m = fit_gmm(X, 1, seed=0)
        assert m.weights[0] == pytest.approx(1.0)
        assert np.allclose(m.means[0], X.mean(axis=0))
        cov = np.cov(X.T, ddof=0) + 1e-6 * np.eye(3)
        assert np.allclose(m.covariances[0], cov)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_recovers_separated_clusters(self, seed):
        X, y = separated_clusters(seed)
        model = fit_gmm(X, 3, seed)
        pred = assign_subgroups(model, X)
        assert best_permutation_accuracy(pred, y, 3) >= 0.99
        assert np.all(np.diff(model.log_likelihood_history) >= -1e-12)

    def test_deterministic(self):
        X, _ = separated_clusters(5)
        a, b = fit_gmm(X, 3, 7), fit_gmm(X, 3, 7)
        for name in ("weights", "means", "covariances"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert a.log_likelihood == b.log_likelihood

    def test_too_few_points(self):
        with pytest.raises(InvalidInputError):
            fit_gmm(np.zeros((2, 3)), 3, 0)

    def test_covariances_spd(self):
        X, _ = separated_clusters(3)
        m = fit_gmm(X, 4, 0)
        for c in m.covariances:
            assert np.allclose(c, c.T)
            assert np.linalg.eigvalsh(c).min() > 0
        assert math.isclose(m.weights.sum(), 1.0, rel_tol=1e-12)

    def test_non_convergence_flagged(self, caplog):
        X, _ = separated_clusters(4)
        gmm = FullCovarianceGMM(3, max_iter=1, tol=1e-300, random_state=0).fit(X)
        assert not gmm.converged_
        assert "did not converge" in caplog.text

    def test_assignment_matches_density_oracle(self):
        X, _ = separated_clusters(8, n_per=30, sep=3.0)
        model = fit_gmm(X, 3, 1)
        dens = np.column_stack([
            w * multivariate_normal(mu, cov).pdf(X)
            for w, mu, cov in zip(model.weights, model.means, model.covariances)])
        assert np.array_equal(assign_subgroups(model, X), np.argmax(dens, axis=1))

    def test_point_at_mean(self):
        X, _ = separated_clusters(9)
        model = fit_gmm(X, 3, 0)
        assert assign_subgroups(model, model.means).tolist() == [0, 1, 2]

    def test_partition(self):
        X, _ = separated_clusters(10)
        labels = assign_subgroups(fit_gmm(X, 3, 0), X)
        assert labels.shape == (X.shape[0],)
        assert set(labels.tolist()) <= {0, 1, 2}


# ----- weights ------------------------------------------------------------

class TestSubgroupWeights:
    def test_ten_member_group(self):
        assign = {f"t{i}": i % 4 for i in range(40)}
        w = eq1_weights(assign, 4)
        assert w["t0"] == pytest.approx(0.025, abs=1e-15)

    def test_singleton_and_nine(self):
        assign = {"s": 0, **{f"n{i}": 1 for i in range(9)}}
        w = eq1_weights(assign, 2)
        assert w["s"] == 0.5
        assert w["n3"] == pytest.approx(1 / 18, abs=1e-15)

    def test_one_occupied_group_is_uniform(self):
        w = eq1_weights({f"t{i}": 2 for i in range(7)}, 5)
        assert all(v == pytest.approx(1 / 7) for v in w.values())

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            eq1_weights({}, 3)
        with pytest.raises(InvalidInputError):
            eq1_weights({"a": 3}, 3)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31), n=st.integers(1, 200), k=st.integers(1, 12))
    def test_properties(self, seed, n, k):
        rng = np.random.default_rng(seed)
        assign = {f"t{i}": int(g) for i, g in enumerate(rng.integers(0, k, n))}
        w = eq1_weights(assign, k)
        occupied = len(set(assign.values()))
        assert math.isclose(math.fsum(w.values()), 1.0, abs_tol=1e-9)
        sizes = {}
        for t, g in assign.items():
            sizes.setdefault(g, []).append(w[t])
        for g, ws in sizes.items():
            assert len(set(ws)) == 1
            assert abs(math.fsum(ws) - 1 / occupied) < 1e-9
        # smaller subgroups never get smaller per-template weights
        by_size = sorted((len(ws), ws[0]) for ws in sizes.values())
        for (s1, w1), (s2, w2) in zip(by_size, by_size[1:]):
            if s1 < s2:
                assert w1 >= w2


class TestPools:
    def test_half_half(self):
        feta = eq1_weights({f"f{i}": i % 4 for i in range(80)}, 4)
        dhcp = eq1_weights({f"d{i}": i % 8 for i in range(265)}, 8)
        table = combine_pools([("feta", feta, 0.5), ("dhcp", dhcp, 0.5)])
        assert abs(table.pool_total("dhcp") - 0.5) < 1e-9
        assert abs(table.total() - 1.0) < 1e-9

    def test_single_pool_unchanged(self):
        w = eq1_weights({"a": 0, "b": 1, "c": 1}, 2)
        table = combine_pools([("only", w, 1.0)])
        assert {t: e.weight for t, e in table.entries.items()} == w

    def test_bad_fractions(self):
        w = {"a": 1.0}
        with pytest.raises(InvalidInputError, match="sum to"):
            combine_pools([("p", w, 0.6), ("q", {"b": 1.0}, 0.6)])

    def test_duplicate_template(self):
        with pytest.raises(InvalidInputError):
            combine_pools([("p", {"a": 1.0}, 0.5), ("q", {"a": 1.0}, 0.5)])

    def test_csv_round_trip(self, tmp_path):
        assign = {f"t{i}": i % 3 for i in range(9)}
        table = combine_pools([("p", eq1_weights(assign, 3), 1.0, assign)])
        table.to_csv(tmp_path / "t.csv")
        back = SamplingTable.from_csv(tmp_path / "t.csv")
        assert back.entries.keys() == table.entries.keys()
        assert abs(back.total() - 1) < 1e-9
        assert (tmp_path / "t.csv").read_text().splitlines()[0] == "template_id,pool,subgroup,weight"


# ----- end-to-end estimator --------------------------------------------------

def test_data_driven_sampler_pipeline(rng):
    X = np.vstack([rng.normal(m, 1.0, size=(15, 21)) for m in (0.0, 10.0, 20.0)])
    X = np.abs(X)
    s = DataDrivenSampler(n_subgroups=3, random_state=4).fit(X)
    assert s.embedding_.shape == (45, 3)
    assert math.isclose(s.sample_weight_.sum(), 1.0, abs_tol=1e-12)
    for g in np.unique(s.labels_):
        assert s.sample_weight_[s.labels_ == g].sum() == pytest.approx(1 / len(np.unique(s.labels_)))
    again = clone(s).fit(X)
    assert np.array_equal(again.labels_, s.labels_)
    assert np.array_equal(s.predict(X), s.labels_)
    assert s.to_dict()["gmm"]["converged"]


def test_sampler_rejects_k_above_pool_size(rng):
    with pytest.raises(InvalidInputError):
        DataDrivenSampler(n_subgroups=9).fit(rng.normal(size=(5, 21)))
