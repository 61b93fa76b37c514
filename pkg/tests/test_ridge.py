import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroencode import ridge


def system(seed, t=40, p=12, v=8):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(t, p)), rng.normal(size=(t, v))


class TestFit:
    def test_identity_design(self):
        y = np.random.default_rng(0).normal(size=(6, 3))
        np.testing.assert_allclose(ridge.fit_ridge(np.eye(6), y, 0.0).beta, y, atol=1e-12)

    def test_shrinkage_limit(self):
        x, y = system(1)
        assert np.abs(ridge.fit_ridge(x, y, 1e12).beta).max() < 1e-6

    def test_normal_equations_small(self):
        x, y = system(2, 20, 5, 3)
        np.testing.assert_allclose(ridge.fit_ridge(x, y, 1.0).beta, ridge.ridge_normal_equations(x, y, 1.0),
                                   atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_normal_equations_grid(self, seed):
        x, y = system(100 + seed)
        for a in ridge.DEFAULT_ALPHAS:
            np.testing.assert_allclose(ridge.fit_ridge(x, y, a).beta, ridge.ridge_normal_equations(x, y, a),
                                       atol=1e-8)

    def test_per_target_alpha(self):
        x, y = system(3)
        a = np.array([0.1, 1, 10, 100, 0.5, 2, 3, 4])
        beta = ridge.fit_ridge(x, y, a).beta
        for v in range(8):
            np.testing.assert_allclose(beta[:, v], ridge.ridge_normal_equations(x, y[:, v], a[v]), atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_monotone_shrinkage(self, seed, a1, a2):
        x, y = system(seed, 30, 6, 3)
        lo, hi = sorted([a1, a2])
        n_lo = np.linalg.norm(ridge.fit_ridge(x, y, lo).beta, axis=0)
        n_hi = np.linalg.norm(ridge.fit_ridge(x, y, hi).beta, axis=0)
        assert np.all(n_lo >= n_hi - 1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 7))
    def test_separable(self, seed, drop):
        x, y = system(seed)
        a = np.logspace(-1, 2, 8)
        full = ridge.fit_ridge(x, y, a).beta
        keep = np.arange(8) != drop
        part = ridge.fit_ridge(x, y[:, keep], a[keep]).beta
        np.testing.assert_allclose(part, full[:, keep], atol=1e-12)

    def test_zero_column_dropped(self):
        x, y = system(4)
        x[:, 3] = 0.0
        with pytest.warns(RuntimeWarning, match="all-zero"):
            fit = ridge.fit_ridge(x, y, 1.0)
        assert fit.dropped[3] and np.all(fit.beta[3] == 0)

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            ridge.fit_ridge(*system(0), -1.0)

    def test_sample_mismatch(self):
        with pytest.raises(ValueError):
            ridge.fit_ridge(np.zeros((5, 2)), np.zeros((4, 1)), 1.0)


class TestPredict:
    def test_zero_beta_gives_mean(self):
        fit = ridge.RidgeFit(np.zeros((3, 2)), np.ones(2), np.zeros(3), np.ones(3), np.array([1.5, -2.0]))
        np.testing.assert_array_equal(ridge.predict(fit, np.ones((4, 3))), np.tile([1.5, -2.0], (4, 1)))

    def test_least_squares_projection(self):
        x, y = system(5, 30, 4, 2)
        pred = ridge.predict(ridge.fit_ridge(x, y, 0.0), x)
        np.testing.assert_allclose(pred, x @ np.linalg.lstsq(x, y, rcond=None)[0], atol=1e-10)

    def test_planted_round_trip(self):
        x, _ = system(6, 50, 5)
        y = x @ np.random.default_rng(7).normal(size=(5, 4))
        rho = ridge.score_temporal(y, ridge.predict(ridge.fit_ridge(x, y, 0.0), x))
        np.testing.assert_allclose(rho, 1.0, atol=1e-12)

    def test_standardize_stats(self):
        x, y = system(8)
        x = 3 * x + 5
        fit = ridge.fit_ridge(x, y, 2.0, standardize=True)
        xs = (x - x.mean(0)) / x.std(0)
        np.testing.assert_allclose(fit.beta, ridge.ridge_normal_equations(xs, y - y.mean(0), 2.0), atol=1e-10)
        np.testing.assert_allclose(ridge.predict(fit, x), xs @ fit.beta + y.mean(0), atol=1e-12)

    def test_shape_mismatch(self):
        fit = ridge.fit_ridge(*system(0), 1.0)
        with pytest.raises(ValueError):
            ridge.predict(fit, np.zeros((3, 5)))


class TestScore:
    def test_identity(self):
        r = np.random.default_rng(0).normal(size=(10, 4))
        np.testing.assert_allclose(ridge.score_temporal(r, r), 1.0, atol=1e-12)

    def test_sign_flip(self):
        r = np.random.default_rng(0).normal(size=(10, 4))
        np.testing.assert_allclose(ridge.score_temporal(r, -r), -1.0, atol=1e-12)

    def test_hand_value(self):
        assert abs(ridge.score_temporal(np.array([1.0, 2, 3]), np.array([1.0, 2, 2]))[0] - 0.866) < 1e-3

    def test_flat_column(self):
        r = np.random.default_rng(0).normal(size=(10, 2))
        p = r.copy()
        p[:, 1] = 4.2
        rho, flat = ridge.score_temporal(r, p, return_flags=True)
        assert rho[1] == 0.0 and flat.tolist() == [False, True]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100), st.floats(0.01, 100),
           st.floats(-100, 100))
    def test_affine_invariance(self, seed, a, b, c, d):
        rng = np.random.default_rng(seed)
        r, p = rng.normal(size=(2, 12, 3))
        np.testing.assert_allclose(ridge.score_temporal(a * r + b, c * p + d), ridge.score_temporal(r, p),
                                   atol=1e-9)

    @pytest.mark.parametrize("shapes", [((5, 2), (5, 3)), ((2, 1), (2, 1))])
    def test_errors(self, shapes):
        with pytest.raises(ValueError):
            ridge.score_temporal(np.ones(shapes[0]), np.ones(shapes[1]))


class TestCrossValidation:
    def test_folds_contiguous_chunks(self):
        folds = ridge.chunk_folds(103, 5, 10)
        assert sorted(np.concatenate(folds).tolist()) == list(range(103))
        for f in folds:
            assert np.all(np.diff(f) == 1)
            assert f[0] % 10 == 0

    def test_insufficient_rows(self):
        with pytest.raises(ValueError):
            ridge.cv_select_alpha(*system(0, 40), ridge.CvConfig(n_folds=5, chunk_length=10))

    def test_noiseless_picks_smallest(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 5))
        y = x @ rng.normal(size=(5, 3))
        cfg = ridge.CvConfig(alphas=(1e-6, 1e-3, 1.0, 1e3), n_folds=5, chunk_length=10)
        scores = ridge.cv_scores(x, y, cfg)
        sel = ridge.cv_select_alpha(x, y, cfg)
        best = ridge.select_alphas(scores, cfg.alphas)
        np.testing.assert_array_equal(sel, best)
        assert np.all(sel <= 1e-3)

    def test_tie_goes_to_larger(self):
        scores = np.array([[0.5, 0.2], [0.5, 0.3], [0.4, 0.3]])
        np.testing.assert_array_equal(ridge.select_alphas(scores, [1.0, 10.0, 100.0]), [10.0, 100.0])

    def test_noise_output_in_grid(self):
        x, y = system(9, 120, 6, 5)
        cfg = ridge.CvConfig(chunk_length=10)
        assert set(ridge.cv_select_alpha(x, y, cfg)) <= set(cfg.alphas)

    def test_duplicate_voxels(self):
        x, y = system(10, 120, 6, 3)
        y = np.c_[y, y[:, 1]]
        sel = ridge.cv_select_alpha(x, y, ridge.CvConfig(chunk_length=10))
        assert sel[1] == sel[3]

    @pytest.mark.parametrize("kw", [dict(alphas=(2.0, 1.0)), dict(alphas=()), dict(alphas=(0.0, 1.0)),
                                    dict(n_folds=1), dict(chunk_length=0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            ridge.CvConfig(**kw)

    def test_fit_cv_refits_on_all_rows(self):
        x, y = system(11, 120, 6, 3)
        cfg = ridge.CvConfig(chunk_length=10)
        fit = ridge.fit_cv(x, y, cfg)
        np.testing.assert_allclose(fit.beta, ridge.fit_ridge(x, y, fit.alphas).beta, atol=1e-14)
        assert fit.meta["n_rows"] == 120


def test_fit_file_round_trip(tmp_path):
    fit = ridge.fit_cv(*system(12, 120, 4, 2), ridge.CvConfig(chunk_length=10))
    ridge.save_fit(tmp_path / "f.bin", fit, {"subject": "S01"})
    got = ridge.load_fit(tmp_path / "f.bin")
    np.testing.assert_array_equal(got.beta, fit.beta)
    np.testing.assert_array_equal(got.alphas, fit.alphas)
    assert got.meta["subject"] == "S01"
