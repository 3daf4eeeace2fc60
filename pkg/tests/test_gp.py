import itertools
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusebo.gp import (
    JITTER_MAX,
    FactorizationError,
    KernelParams,
    _factorize,
    fit,
    gram_matrix,
    kernel_eval,
    tune_lambda,
)
from fusebo.metric import DistanceCache, EdgeWeights, all_pairs_distances
from fusebo.space import Net, SpaceConfig, enumerate_space, random_net

from oracles import dense_gp

S30 = SpaceConfig.of_size(3, 0)
S41 = SpaceConfig.of_size(4, 1)


@pytest.fixture(scope="module")
def space41():
    nets, dist = all_pairs_distances(S41)
    return nets, dist, {x: i for i, x in enumerate(nets)}


def oracle_posterior(space41, pts, y, queries, lam, noise):
    nets, dist, index = space41
    ip = [index[x] for x in pts]
    iq = [index[x] for x in queries]
    K = np.exp(-lam * dist[np.ix_(ip, ip)] ** 2)
    ks = np.exp(-lam * dist[np.ix_(ip, iq)] ** 2)
    return dense_gp(K, y, ks, np.ones(len(iq)), noise)


class TestKernel:
    def test_values(self):
        flat = Net.flat(S30.modalities)
        nested = enumerate_space(S30)[0]
        p = KernelParams(0.5)
        assert kernel_eval(flat, flat, p, S30) == 1.0
        assert kernel_eval(flat, nested, p, S30) == pytest.approx(math.exp(-0.5), abs=1e-15)
        assert math.exp(-0.5) == pytest.approx(0.60653, abs=5e-6)
        assert p.shape_fn(p.resolved_cap) < 1e-12

    def test_symmetric_and_monotone(self, space41):
        nets, dist, _ = space41
        p = KernelParams(0.5)
        rng = np.random.default_rng(2)
        idx = rng.choice(len(nets), 12, replace=False)
        pts = [nets[i] for i in idx]
        K = gram_matrix(pts, p, p.cache(S41))
        np.testing.assert_array_equal(K, K.T)
        np.testing.assert_array_equal(np.diag(K), 1.0)
        D = dist[np.ix_(idx, idx)]
        for a, b, c in itertools.permutations(range(12), 3):
            if D[a, b] < D[a, c]:
                assert K[a, b] > K[a, c]

    def test_bad_params(self):
        for lam in (0, -1):
            with pytest.raises(ValueError):
                KernelParams(lam)
        with pytest.raises(ValueError):
            KernelParams(shape="laplace")


class TestFit:
    def test_single_point(self):
        x = Net.flat(S30.modalities)
        m = fit([x], [0.7], KernelParams(), S30)
        mu, var = m.posterior(x)
        assert mu == pytest.approx(0.7, abs=1e-15)
        # standardized prior 1, noise 1: 1 - 1/2
        assert var == pytest.approx(0.5, abs=1e-9)

    def test_two_saturated_points(self):
        space = SpaceConfig.of_size(3, 3)
        a, b = Net.flat(space.modalities, 0), Net.flat(space.modalities, 3)
        params = KernelParams(0.5, cap=12.0)
        m = fit([a, b], [1.0, 3.0], params, space)
        assert m.cache.distance(a, b) == 12.0
        # y = [1, 3] -> mean 2, std 1, z = [-1, 1]; each point shrinks to z/2
        k = math.exp(-0.5 * 144)
        A = np.array([[2.0, k], [k, 2.0]])
        z_post = np.array([[1.0, k], [k, 1.0]]) @ np.linalg.solve(A, [-1.0, 1.0])
        np.testing.assert_allclose(m.predict([a, b])[0], 2.0 + z_post, atol=1e-12)
        np.testing.assert_allclose(m.predict([a, b])[0], [1.5, 2.5], atol=1e-12)

    def test_three_point_oracle(self):
        nets = enumerate_space(S30)
        _, dist = all_pairs_distances(S30)
        pts, y = nets[:3], [0.2, -1.0, 0.5]
        m = fit(pts, y, KernelParams(0.5), S30)
        K = np.exp(-0.5 * dist[:3, :3] ** 2)
        ks = np.exp(-0.5 * dist[:3, :] ** 2)
        mu, var, lml = dense_gp(K, y, ks, np.ones(4), 1.0)
        got_mu, got_var = m.predict(nets)
        np.testing.assert_allclose(got_mu, mu, atol=1e-10)
        np.testing.assert_allclose(got_var, var, atol=1e-10)
        assert m.log_marginal_likelihood() == pytest.approx(lml, abs=1e-10)

    def test_small_models_match_dense_oracle(self, space41):
        nets = space41[0]
        rng = np.random.default_rng(21)
        for _ in range(40):
            size = int(rng.integers(1, 6))
            idx = rng.choice(len(nets), size + 6, replace=False)
            pts = [nets[i] for i in idx[:size]]
            queries = [nets[i] for i in idx]
            y = rng.normal(size=size)
            lam = float(rng.choice([0.1, 0.5, 2.0]))
            noise = float(rng.choice([1.0, 0.1, 1e-3]))
            m = fit(pts, y, KernelParams(lam), S41, noise)
            mu, var, lml = oracle_posterior(space41, pts, y, queries, lam, noise + m.jitter)
            got_mu, got_var = m.predict(queries)
            np.testing.assert_allclose(got_mu, mu, atol=1e-10)
            np.testing.assert_allclose(got_var, var, atol=1e-10)
            assert m.log_marginal_likelihood() == pytest.approx(lml, abs=1e-10)

    def test_interpolates_without_noise(self, space41):
        nets = space41[0]
        rng = np.random.default_rng(4)
        for size in (2, 5, 10):
            pts = [nets[i] for i in rng.choice(len(nets), size, replace=False)]
            y = rng.uniform(0, 1, size)
            m = fit(pts, y, KernelParams(0.5), S41, noise_variance=1e-12)
            np.testing.assert_allclose(m.predict(pts)[0], y, atol=1e-6)

    def test_factor_reproduces_gram(self, space41):
        nets = space41[0]
        pts = nets[::300]
        m = fit(pts, np.arange(len(pts), dtype=float), KernelParams(0.5), S41, 0.3)
        K = gram_matrix(pts, m.params, m.cache) + (0.3 + m.jitter) * np.eye(len(pts))
        np.testing.assert_allclose(m.chol @ m.chol.T, K, atol=1e-8)

    def test_training_point_variance(self, space41):
        nets = space41[0]
        pts = nets[:6]
        y = np.array([0.1, 0.4, 0.35, 0.9, 0.5, 0.2])
        m = fit(pts, y, KernelParams(0.5), S41, 1.0)
        _, var = m.predict(pts)
        assert np.all(var > 0) and np.all(var < y.std() ** 2)

    def test_far_query_reverts_to_prior(self):
        space = SpaceConfig.of_size(3, 3)
        a, b = Net.flat(space.modalities, 0), Net.flat(space.modalities, 3)
        c = Net.flat(space.modalities, 2)
        m = fit([b, c], [2.0, 4.0], KernelParams(5.0), space)
        mu, var = m.posterior(a)
        assert mu == pytest.approx(3.0, abs=1e-12)
        assert var == pytest.approx(1.0, abs=1e-12)
        assert m.posterior(c)[1] < 1.0

    def test_constant_observations(self):
        nets = enumerate_space(S30)
        m = fit(nets[:3], [2.0, 2.0, 2.0], KernelParams(), S30)
        assert m.std == 1.0
        np.testing.assert_allclose(m.predict(nets)[0], 2.0, atol=1e-12)

    def test_affine_equivariance(self, space41):
        nets = space41[0]
        rng = np.random.default_rng(8)
        pts = [nets[i] for i in rng.choice(len(nets), 7, replace=False)]
        q = [nets[i] for i in rng.choice(len(nets), 20, replace=False)]
        y = rng.normal(size=7)
        m1 = fit(pts, y, KernelParams(), S41)
        m2 = fit(pts, 5 * y + 3, KernelParams(), S41)
        mu1, v1 = m1.predict(q)
        mu2, v2 = m2.predict(q)
        np.testing.assert_allclose(mu2, 5 * mu1 + 3, atol=1e-12)
        np.testing.assert_allclose(v2, 25 * v1, atol=1e-12)

    def test_permutation_invariance(self, space41):
        nets = space41[0]
        rng = np.random.default_rng(6)
        idx = rng.choice(len(nets), 9, replace=False)
        pts = [nets[i] for i in idx]
        y = rng.normal(size=9)
        perm = rng.permutation(9)
        m1 = fit(pts, y, KernelParams(), S41)
        m2 = fit([pts[i] for i in perm], y[perm], KernelParams(), S41)
        assert m1.log_marginal_likelihood() == pytest.approx(m2.log_marginal_likelihood(), abs=1e-12)
        np.testing.assert_allclose(m1.predict(nets[:50])[0], m2.predict(nets[:50])[0], atol=1e-12)

    def test_rejects_bad_input(self):
        x = Net.flat(S30.modalities)
        with pytest.raises(ValueError):
            fit([], [], KernelParams(), S30)
        with pytest.raises(ValueError):
            fit([x, x], [1.0, 2.0], KernelParams(), S30)
        with pytest.raises(ValueError):
            fit([x], [1.0, 2.0], KernelParams(), S30)
        with pytest.raises(ValueError):
            fit([x], [1.0], KernelParams(), S30, cache=DistanceCache(S30, EdgeWeights(2.0, 1.0)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_extra_point_never_raises_variance(self, seed, size):
        rng = np.random.default_rng(seed)
        pts = []
        while len(pts) < size + 1:
            x = random_net(S41, rng)
            if x not in pts:
                pts.append(x)
        y = rng.normal(size=size + 1)
        q = pts[-1]
        before = fit(pts[:-1], y[:-1], KernelParams(), S41)
        after = fit(pts, y, KernelParams(), S41)
        # compare in standardized units, where the prior variance is 1
        v0 = before.posterior(q)[1] / before.std**2
        v1 = after.posterior(q)[1] / after.std**2
        assert v1 <= v0 + 1e-12


class TestLikelihood:
    def test_single_point_closed_form(self):
        x = Net.flat(S30.modalities)
        m = fit([x], [3.3], KernelParams(), S30)
        expected = -0.5 * math.log(2) - 0.5 * math.log(2 * math.pi)
        assert m.log_marginal_likelihood() == pytest.approx(expected, abs=1e-9)

    def test_grid_argmax_matches_oracle(self, space41):
        nets = space41[0]
        rng = np.random.default_rng(13)
        pts = [nets[i] for i in rng.choice(len(nets), 8, replace=False)]
        y = rng.normal(size=8)
        grid = [0.1, 0.5, 1.0]
        lmls = []
        for lam in grid:
            *_, lml = oracle_posterior(space41, pts, y, pts, lam, 1.0)
            lmls.append(lml)
        got = tune_lambda(pts, y, grid, S41)
        assert got.lam == grid[int(np.argmax(lmls))]
        for lam, ref in zip(grid, lmls):
            assert fit(pts, y, KernelParams(lam), S41).log_marginal_likelihood() == pytest.approx(ref, abs=1e-10)


class TestTuneLambda:
    def test_single_entry(self):
        nets = enumerate_space(S30)
        assert tune_lambda(nets[:2], [0.0, 1.0], [0.7], S30).lam == 0.7

    def test_duplicates_ignored(self, space41):
        nets = space41[0]
        pts, y = nets[:5], [0.1, 0.3, 0.2, 0.9, 0.4]
        a = tune_lambda(pts, y, [0.1, 0.5, 0.5, 1.0, 0.1], S41)
        b = tune_lambda(pts, y, [0.1, 0.5, 1.0], S41)
        assert a == b

    def test_ties_go_to_smaller(self):
        # one point: the likelihood does not depend on lambda at all
        x = Net.flat(S30.modalities)
        assert tune_lambda([x], [1.0], [2.0, 0.3, 1.0], S30).lam == 0.3

    def test_smooth_clusters_prefer_wide_kernel(self, space41):
        nets, dist, index = space41
        # two tight clusters, each sharing one value
        c1 = nets[0]
        c2 = nets[int(np.argmax(dist[0]))]
        members = []
        for c, val in ((c1, 0.0), (c2, 1.0)):
            row = dist[index[c]]
            close = [nets[i] for i in np.flatnonzero((row >= 1) & (row <= 2))[:3]]
            members += [(c, val)] + [(x, val) for x in close]
        pts, y = zip(*members)
        grid = [0.1, 0.25, 0.5, 1.0, 2.0]
        lmls = [oracle_posterior(space41, pts, y, pts, lam, 1.0)[2] for lam in grid]
        best = tune_lambda(pts, y, grid, S41)
        assert best.lam == grid[int(np.argmax(lmls))]
        assert best.lam <= 0.5


class TestJitter:
    def test_escalation_stops_at_cap(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(FactorizationError):
            _factorize(bad)

    def test_small_dip_is_repaired(self):
        # smallest eigenvalue -1e-7 needs jitter 1e-6
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(4, 4)))
        K = q @ np.diag([2.0, 1.0, 0.5, -1e-7]) @ q.T
        _, jitter = _factorize(K)
        assert jitter == pytest.approx(1e-6)

    def test_random_gram_matrices(self, space41, caplog):
        nets = space41[0]
        rng = np.random.default_rng(1234)
        params = KernelParams()
        cache = params.cache(S41)
        jitters = []
        with caplog.at_level(logging.DEBUG, logger="fusebo.gp"):
            for _ in range(1000):
                size = int(rng.integers(2, 16))
                pts = [nets[i] for i in rng.choice(len(nets), size, replace=False)]
                m = fit(pts, rng.normal(size=size), params, S41, 0.0, cache=cache)
                jitters.append(m.jitter)
        assert max(jitters) <= JITTER_MAX
        assert sum("jitter" in r.getMessage() for r in caplog.records) == 1000
