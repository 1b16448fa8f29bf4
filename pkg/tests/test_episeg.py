import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from imilia import episeg
from imilia.episeg import EpiSegError, EpiSegModel

from oracles import pool_rational


# -- pooling ------------------------------------------------------------------


def test_pool_examples():
    np.testing.assert_array_equal(episeg.pool_mask(np.ones((28, 28)), 14), np.ones((2, 2)))
    np.testing.assert_array_equal(episeg.pool_mask(np.zeros((30, 45)), 14), np.zeros((2, 3)))
    m = np.zeros((14, 14), dtype=np.uint8)
    m.flat[np.random.default_rng(0).choice(196, 49, replace=False)] = 1
    assert episeg.pool_mask(m, 14).tolist() == [[0.25]]
    with pytest.raises(EpiSegError):
        episeg.pool_mask(m, 0)
    with pytest.raises(EpiSegError):
        episeg.pool_mask(np.ones((10, 20)), 14)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 9), st.integers(0, 2**31))
def test_pool_exact_against_rational_means(h, w, P, seed):
    if h < P or w < P:
        return
    mask = np.random.default_rng(seed).integers(0, 2, (h, w))
    got = episeg.pool_mask(mask, P)
    want = pool_rational(mask, P)
    assert got.shape == (h // P, w // P)
    assert [[float(v) for v in row] for row in want] == got.tolist()


# -- fitting ------------------------------------------------------------------


def _soft_data(seed, n=200, d=6):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = 1.0 / (1.0 + np.exp(-(2 * X[:, 0] - X[:, 1] + 0.3 * rng.standard_normal(n))))
    return X, y


def test_fit_separable_direction():
    m = episeg.fit(np.array([[-1.0], [1.0]]), np.array([0.0, 1.0]), C=1e4)
    assert 1 / (1 + np.exp(-(m.weights[0] + m.bias))) >= 0.9


@pytest.mark.parametrize("seed", range(5))
def test_fit_reaches_stationary_point(seed):
    X, y = _soft_data(seed)
    m = episeg.fit(X, y, C=1e-2)
    gw, gb = episeg.objective_grad(X, y, m.weights, m.bias, 1e-2)
    assert max(np.abs(gw).max(), abs(gb)) < 1e-6


def test_fit_objective_beats_perturbations():
    X, y = _soft_data(1)
    m = episeg.fit(X, y, C=1e-2)
    f0 = episeg.objective(X, y, m.weights, m.bias, 1e-2)
    rng = np.random.default_rng(0)
    for _ in range(100):
        scale = 10.0 ** rng.uniform(-4, 0)
        w = m.weights + scale * rng.standard_normal(m.weights.size)
        b = m.bias + scale * rng.standard_normal()
        assert f0 <= episeg.objective(X, y, w, b, 1e-2) + 1e-9


@pytest.mark.parametrize("C", [1e-3, 1e-2, 1.0])
def test_soft_fit_on_binary_labels_matches_classic_logistic_regression(C):
    rng = np.random.default_rng(int(C * 1000))
    X = rng.standard_normal((300, 5))
    y = (X[:, 0] - 0.5 * X[:, 2] + rng.standard_normal(300) > 0).astype(float)
    m = episeg.fit(X, y, C=C)
    ref = LogisticRegression(C=C, tol=1e-12, max_iter=10_000, solver="newton-cg").fit(X, y)
    theta = np.r_[m.weights, m.bias]
    ref_theta = np.r_[ref.coef_[0], ref.intercept_[0]]
    assert np.linalg.norm(theta - ref_theta) < 1e-6


def test_fit_rejects_degenerate_input():
    X = np.zeros((4, 2))
    with pytest.raises(EpiSegError):
        episeg.fit(X, np.ones(4))
    with pytest.raises(EpiSegError):
        episeg.fit(np.array([[np.nan, 0.0], [1.0, 1.0]]), np.array([0.0, 1.0]))
    with pytest.raises(EpiSegError):
        episeg.fit(np.ones((2, 2)), np.array([0.0, 1.5]))


def test_select_C_prefers_regularization_with_noise_dims():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((150, 40))
    X[:, 1:] *= 0.3
    y = (1 / (1 + np.exp(-3 * X[:, 0])) > rng.uniform(size=150)).astype(float)
    grid = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0]
    assert episeg.select_C(X, y, grid, 3, 0) < max(grid)


def test_select_C_single_value_and_ties():
    X, y = _soft_data(2, d=2)
    assert episeg.select_C(X, y, [0.5]) == 0.5
    # in one dimension every C ranks patches identically, so AP ties and the smallest C wins
    X1 = X[:, :1]
    assert episeg.select_C(X1, y, [10.0, 1.0, 0.1]) == 0.1
    with pytest.raises(EpiSegError):
        episeg.select_C(X, y, [])


# -- inference ----------------------------------------------------------------


def test_infer_zero_model_is_half():
    m = EpiSegModel(np.zeros(4), 0.0, 1e-2)
    np.testing.assert_array_equal(episeg.infer_tile(m, np.random.default_rng(0).standard_normal((73, 73, 4))),
                                  np.full((73, 73), 0.5))
    with pytest.raises(EpiSegError):
        episeg.infer_tile(m, np.zeros((5, 5, 3)))


def test_infer_translation_and_monotonicity(rng):
    m = EpiSegModel(rng.standard_normal(3), 0.2, 1e-2)
    G = rng.standard_normal((20, 20, 3))
    out = episeg.infer_tile(m, G)
    shifted = episeg.infer_tile(m, np.roll(G, (3, -5), axis=(0, 1)))
    np.testing.assert_array_equal(np.roll(out, (3, -5), axis=(0, 1)), shifted)
    bigger = episeg.infer_tile(m, G + 0.1 * m.weights)
    assert (bigger > out).all()


def test_crop_window_geometry():
    assert episeg.EPISEG_TILE // episeg.PATCH == 73
    assert episeg.crop_window(1022, 224, 14) == (28, 16)


def test_infer_extreme_tile_crop(rng):
    m = EpiSegModel(rng.standard_normal(3), 0.0, 1e-2)
    G = rng.standard_normal((73, 73, 3))
    out = episeg.infer_extreme_tile(m, G)
    assert out.shape == (16, 16)
    np.testing.assert_array_equal(out, episeg.infer_tile(m, G)[28:44, 28:44])
    uniform = np.broadcast_to(rng.standard_normal(3), (73, 73, 3))
    np.testing.assert_array_equal(episeg.infer_extreme_tile(m, uniform), episeg.infer_tile(m, uniform)[:16, :16])
    with pytest.raises(EpiSegError):
        episeg.infer_extreme_tile(m, G[:70])


def test_expand_patch_grid_interior_and_border(rng):
    slide = rng.standard_normal((200, 200, 2))
    tile_x, tile_y = 100 * 14, 90 * 14
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        g = episeg.expand_patch_grid(slide, tile_x, tile_y)
    assert g.shape == (73, 73, 2)
    np.testing.assert_array_equal(g[28:44, 28:44], slide[90:106, 100:116])
    with pytest.warns(UserWarning, match="border"):
        b = episeg.expand_patch_grid(slide, 0, 0)
    assert b.shape == (73, 73, 2)
    np.testing.assert_array_equal(b[28:44, 28:44], slide[0:16, 0:16])
    np.testing.assert_array_equal(b[27, 28:44], slide[1, 0:16])   # mirrored about row 0


def test_expand_tile_region_mirrors(rng):
    img = rng.integers(0, 255, (600, 600, 3)).astype(np.uint8)
    with pytest.warns(UserWarning):
        region = episeg.expand_tile_region(img, 0, 0)
    assert region.shape == (1022, 1022, 3)
    np.testing.assert_array_equal(region[399:623, 399:623], img[:224, :224])


def test_binarize():
    np.testing.assert_array_equal(episeg.binarize(np.full((2, 2), 0.5)), np.ones((28, 28)))
    g = np.zeros((3, 3))
    g[1, 2] = 0.9
    E = episeg.binarize(g, 0.5, 14)
    assert E.sum() == 196 and E[14:28, 28:42].all()
    with pytest.raises(EpiSegError):
        episeg.binarize(g, 1.0)


# -- files --------------------------------------------------------------------


def test_model_and_pgm_round_trips(tmp_path, rng):
    m = EpiSegModel(rng.standard_normal(5), -0.3, 1e-2)
    m2 = EpiSegModel.load(m.save(tmp_path / "m.json"))
    np.testing.assert_array_equal(m.weights, m2.weights)
    assert (m2.bias, m2.C) == (m.bias, m.C)

    mask = rng.integers(0, 2, (30, 17)).astype(bool)
    episeg.write_mask(tmp_path / "e.pgm", mask)
    np.testing.assert_array_equal(episeg.read_mask(tmp_path / "e.pgm"), mask)
    assert (tmp_path / "e.pgm").read_bytes().startswith(b"P5\n17 30\n255\n")

    prob = rng.uniform(size=(16, 16))
    episeg.write_prob(tmp_path / "p.pgm", prob)
    assert np.abs(episeg.read_prob(tmp_path / "p.pgm") - prob).max() <= 0.5 / 65535 + 1e-12


def test_patch_grid_round_trip(tmp_path, rng):
    g = rng.standard_normal((4, 5, 3)).astype(np.float32)
    episeg.write_patch_grid(g, tmp_path / "g", mpp=0.5)
    np.testing.assert_array_equal(episeg.read_patch_grid(tmp_path / "g.json"), g)
