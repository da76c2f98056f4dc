import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchrbm.preprocess import (EPS_STD, Whitener, apply_whitener,
                                 apply_whitener_batch, fit_whitener,
                                 normalize_batch, normalize_patch)


class TestNormalizePatch:
    def test_two_element_example(self):
        # mean 2, population std 1 -> exactly [-1, 1]
        out = normalize_patch(np.array([1.0, 3.0]))
        assert np.allclose(out, [-1.0, 1.0], atol=1e-15)

    def test_four_element_oracle(self):
        v = np.array([0.0, 0.25, 0.5, 1.0])
        mu = v.mean()
        sd = np.sqrt(((v - mu) ** 2).mean())  # population convention
        assert np.allclose(normalize_patch(v), (v - mu) / sd, atol=1e-15)

    def test_flat_patch_maps_to_zero(self):
        assert np.array_equal(normalize_patch(np.full(256, 0.7)), np.zeros(256))

    def test_near_flat_threshold(self):
        v = np.full(16, 0.5)
        v[0] += EPS_STD / 100
        assert np.array_equal(normalize_patch(v), np.zeros(16))

    def test_single_element_rejected(self):
        with pytest.raises(ValueError):
            normalize_patch(np.array([0.5]))

    @given(arrays(np.float64, 64, elements=st.floats(0, 1)))
    @settings(max_examples=50)
    def test_output_moments(self, v):
        out = normalize_patch(v)
        if np.any(out):
            assert abs(out.mean()) < 1e-10
            assert abs(out.std() - 1.0) < 1e-10

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        X = rng.random((10, 64))
        X[3] = 0.25  # one flat row
        B = normalize_batch(X)
        for i in range(10):
            assert np.allclose(B[i], normalize_patch(X[i]), atol=1e-14)


class TestWhitener:
    def setup_method(self):
        rng = np.random.default_rng(42)
        # anisotropic data with a per-sample DC offset baked in
        latent = rng.standard_normal((500, 8)) * np.array([5, 3, 2, 1, .5, .2, .1, .05])
        mix = rng.standard_normal((8, 20))
        self.X = latent @ mix + rng.random((500, 1))

    def test_whitened_covariance_is_identity(self):
        w = fit_whitener(self.X, retain=1.0)
        Y = apply_whitener_batch(w, self.X)
        cov = Y.T @ Y / Y.shape[0]
        assert np.max(np.abs(cov - np.eye(w.d_keep))) < 1e-8

    def test_retain_fraction(self):
        w99 = fit_whitener(self.X, retain=0.99)
        w50 = fit_whitener(self.X, retain=0.50)
        assert w99.variance_retained >= 0.99
        assert w50.d_keep <= w99.d_keep
        # minimality: one fewer component would fall below the target
        Xc = self.X - self.X.mean(axis=1, keepdims=True)
        eig = np.sort(np.linalg.eigvalsh(Xc.T @ Xc / Xc.shape[0]))[::-1]
        mass = np.cumsum(eig) / eig.sum()
        assert mass[w99.d_keep - 1] >= 0.99
        if w99.d_keep > 1:
            assert mass[w99.d_keep - 2] < 0.99

    def test_n_components_override(self):
        w = fit_whitener(self.X, n_components=5)
        assert w.d_keep == 5

    def test_eigenvalues_descending_positive(self):
        w = fit_whitener(self.X)
        assert np.all(w.eigenvalues > 0)
        assert np.all(np.diff(w.eigenvalues) <= 0)

    def test_inverse_reconstructs_centered_data(self):
        w = fit_whitener(self.X, retain=1.0)
        Xc = self.X - self.X.mean(axis=1, keepdims=True)
        Y = Xc @ w.basis
        back = Y @ w.inv_basis
        # reconstruction is exact on the retained subspace
        assert np.max(np.abs(back @ w.basis - Y)) < 1e-8

    def test_degenerate_directions_dropped(self):
        # rank-2 data in 6 dims: tiny eigenvalues must be dropped, not inverted
        rng = np.random.default_rng(1)
        X = rng.standard_normal((200, 2)) @ rng.standard_normal((2, 6))
        w = fit_whitener(X, retain=1.0)
        assert w.d_keep <= 2
        assert np.all(np.isfinite(w.basis))

    def test_single_sample_matches_batch(self):
        w = fit_whitener(self.X)
        one = apply_whitener(w, self.X[7])
        batch = apply_whitener_batch(w, self.X)[7]
        assert np.allclose(one, batch, atol=1e-14)

    def test_dimension_mismatch_rejected(self):
        w = fit_whitener(self.X)
        with pytest.raises(ValueError):
            apply_whitener(w, np.zeros(w.d_in + 1))

    def test_retain_bounds_rejected(self):
        with pytest.raises(ValueError):
            fit_whitener(self.X, retain=0.0)
        with pytest.raises(ValueError):
            fit_whitener(self.X, retain=1.5)
