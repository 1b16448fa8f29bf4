import math
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imilia import chowder
from imilia.chowder import ChowderConfig, ChowderModel, TileScoreTable
from imilia.ingest import FeatureMatrix, make_folds

from oracles import grad_check, random_grad_instance, selection_oracle


def _model(d=6, K=3, r=4, hidden=(8, 5), seed=0):
    cfg = ChowderConfig(K=K, r=r, mlp_hidden=hidden, mlp_dropout=(0.5,) * len(hidden))
    return ChowderModel.init(cfg, d, np.random.default_rng(seed))


# -- loss -------------------------------------------------------------------


def test_loss_closed_forms():
    assert chowder.loss(0.0, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert chowder.loss(-3.0, 0) == pytest.approx(0.048587, abs=5e-7)
    assert chowder.loss(-3.0, 0) == pytest.approx(math.log1p(math.exp(-3.0)), rel=1e-15)
    assert 0.0 <= chowder.loss(40.0, 1) < 1e-17
    assert chowder.loss(-800.0, 1) == pytest.approx(800.0)


def test_loss_rejects_bad_label():
    with pytest.raises(ValueError):
        chowder.loss(0.0, 2)


# -- selection ----------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 60), K=st.integers(1, 4), r=st.integers(1, 10), seed=st.integers(0, 2**31))
def test_selection_matches_sort_oracle(n, K, r, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(-5, 6, size=(n, K)).astype(float)   # plenty of ties
    idx = chowder.select_extremes(scores, r)
    assert idx.shape == (K, 2 * r)
    for k, (top, bottom) in enumerate(selection_oracle(scores, r)):
        assert scores[idx[k, :r], k].tolist() == top
        assert scores[idx[k, r:], k].tolist() == bottom


def test_selection_ties_go_to_lower_index():
    scores = np.array([[1.0], [3.0], [3.0], [1.0], [2.0]])
    idx = chowder.select_extremes(scores, 2)
    assert idx[0].tolist() == [1, 2, 0, 3]


def test_selection_pads_with_extreme_entry():
    scores = np.array([[0.5], [-1.0]])
    idx = chowder.select_extremes(scores, 3)
    assert idx[0].tolist() == [0, 0, 1, 1, 1, 0]
    assert scores[idx[0], 0].tolist() == [0.5, 0.5, -1.0, -1.0, -1.0, 0.5]


# -- forward invariances ------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 50), seed=st.integers(0, 2**31))
def test_forward_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    model = _model(seed=seed % 1000)
    X = rng.standard_normal((n, model.d))
    perm = rng.permutation(n)
    z1, s1 = chowder.forward(model, X)
    z2, s2 = chowder.forward(model, X[perm])
    assert z1 == z2
    np.testing.assert_array_equal(s1[perm], s2)


def test_duplicate_non_extreme_tile_leaves_logit_unchanged(rng):
    model = _model(K=2, r=3)
    X = rng.standard_normal((30, model.d))
    z, scores = chowder.forward(model, X)
    idx = chowder.select_extremes(scores, model.config.r)
    free = sorted(set(range(30)) - set(idx.ravel().tolist()))
    assert free
    z_dup, _ = chowder.forward(model, np.vstack([X, X[free[0]]]))
    assert z_dup == z


def test_small_bags_are_scorable(rng):
    model = _model(r=25)
    for n in (1, 2, 49):
        z, s = chowder.forward(model, rng.standard_normal((n, model.d)))
        assert math.isfinite(z) and s.shape == (n, 3)


def test_forward_dimension_mismatch():
    model = _model(d=6)
    with pytest.raises(ValueError):
        chowder.forward(model, np.zeros((4, 5)))


def test_train_mode_needs_rng(rng):
    model = _model()
    X = rng.standard_normal((10, model.d))
    with pytest.raises(ValueError):
        chowder.forward(model, X, train_mode=True)
    z_a, _ = chowder.forward(model, X, train_mode=True, rng=np.random.default_rng(1))
    z_b, _ = chowder.forward(model, X, train_mode=True, rng=np.random.default_rng(1))
    assert z_a == z_b


# -- gradients ----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_central_differences(seed):
    model, X, label = random_grad_instance(seed)
    assert grad_check(model, X, label) < 1e-3


def test_unselected_tiles_get_no_gradient(rng):
    model = _model(K=2, r=3)
    X = rng.standard_normal((40, model.d))
    _, scores = chowder.forward(model, X)
    idx = chowder.select_extremes(scores, 3)
    free = sorted(set(range(40)) - set(idx.ravel().tolist()))
    _, g1 = chowder.backward(model, X, 1)
    X2 = X.copy()
    X2[free] *= 1.0 + 1e-9   # move non-extreme tiles slightly without reordering
    _, g2 = chowder.backward(model, X2, 1)
    np.testing.assert_array_equal(g1["score_w"], g2["score_w"])


def test_zero_weights_route_to_tied_tiles():
    cfg = ChowderConfig(K=1, r=2, mlp_hidden=(3,), mlp_dropout=(0.5,))
    model = ChowderModel.init(cfg, 2, np.random.default_rng(0))
    model.params["score_w"][:] = 0.0
    model.params["score_b"][:] = 0.0
    X = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [5.0, -1.0]])
    _, grads = chowder.backward(model, X, 1)
    # every score ties at 0, so both halves take tiles 0 and 1
    c = chowder._forward(model, X, False, None)
    assert c.idx[0].tolist() == [0, 1, 0, 1]
    per_tile = np.zeros((4, 1))
    np.add.at(per_tile[:, 0], [0, 1, 0, 1], _input_grad(model, c, 1))
    np.testing.assert_allclose(grads["score_w"], X.T @ per_tile, rtol=1e-6)
    np.testing.assert_allclose(grads["score_b"], per_tile.sum(0), rtol=1e-6)


def _input_grad(model, c, label):
    """dL/d(selected scores) by finite differences through the MLP alone."""
    h0 = c.acts[0]

    def mlp(h):
        a = chowder.sigmoid(h @ model.params["fc0_w"] + model.params["fc0_b"])
        return chowder.loss(float(a @ model.params["out_w"][:, 0] + model.params["out_b"][0]), label)

    out = np.empty_like(h0)
    for i in range(h0.size):
        e = np.zeros_like(h0)
        e[i] = 1e-6
        out[i] = (mlp(h0 + e) - mlp(h0 - e)) / 2e-6
    return out


# -- optimiser ----------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    opt = chowder.Adam(lr=0.1)
    opt.step(params, {"w": np.array([3.0, -0.01, 0.0])})
    np.testing.assert_allclose(params["w"], [0.9, -1.9, 0.5], atol=1e-6)


# -- training -----------------------------------------------------------------


def test_train_fold_learns_separable_cohort(small_cohort):
    _, records, _ = small_cohort
    folds = make_folds(records, 4, seed=0)
    tr = [r for r in records if folds.assignment[r.slide_id] != 0]
    va = [r for r in records if folds.assignment[r.slide_id] == 0]
    cfg = ChowderConfig(K=2, r=5, mlp_hidden=(16, 8), n_epochs=20, batch_size=8)
    res = chowder.train_fold(tr, va, cfg)
    assert len(res.log) == 20
    assert 1 <= res.best_epoch <= 20
    assert res.log[res.best_epoch - 1].valid_auc >= 0.95


def test_train_fold_is_deterministic_and_float32_exact(small_cohort, tmp_path):
    _, records, _ = small_cohort
    cfg = ChowderConfig(K=2, r=3, mlp_hidden=(6,), mlp_dropout=(0.5,), n_epochs=3, batch_size=8, max_tiles=30)
    a = chowder.train_fold(records[:20], records[20:], cfg).model
    b = chowder.train_fold(records[:20], records[20:], cfg).model
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
        np.testing.assert_array_equal(a.params[k], a.params[k].astype(np.float32))
    chowder.save_model(a, tmp_path / "m")
    c = chowder.load_model(tmp_path / "m.json")
    W = chowder.load_features(records[0])
    assert chowder.forward(a, W)[0] == chowder.forward(c, W)[0]


def test_train_fold_rejects_single_class(small_cohort):
    _, records, _ = small_cohort
    pos = [r for r in records if r.label == 1]
    with pytest.raises(ValueError):
        chowder.train_fold(pos, [], ChowderConfig(n_epochs=1))


def test_standardize_flag_round_trips(small_cohort, tmp_path):
    _, records, _ = small_cohort
    cfg = ChowderConfig(K=1, r=2, mlp_hidden=(4,), mlp_dropout=(0.0,), n_epochs=1, standardize=True)
    m = chowder.train_fold(records[:20], [], cfg).model
    assert m.input_mean is not None
    chowder.save_model(m, tmp_path / "s")
    m2 = chowder.load_model(tmp_path / "s")
    np.testing.assert_array_equal(m.input_std, m2.input_std)


def test_cross_validate_gives_one_oof_per_slide(small_cohort):
    _, records, _ = small_cohort
    folds = make_folds(records, 4, seed=1)
    cfg = ChowderConfig(K=1, r=3, mlp_hidden=(4,), mlp_dropout=(0.5,), n_epochs=2, batch_size=16)
    cv = chowder.cross_validate(records, folds, cfg)
    assert len(cv.models) == 4
    assert sorted(cv.oof) == sorted(r.slide_id for r in records)
    assert 0.0 <= cv.auc(records) <= 1.0


def test_parallel_folds_match_serial(small_cohort):
    _, records, _ = small_cohort
    folds = make_folds(records, 2, seed=0)
    cfg = ChowderConfig(K=1, r=2, mlp_hidden=(4,), mlp_dropout=(0.5,), n_epochs=2, batch_size=16)
    serial = chowder.cross_validate(records, folds, cfg, workers=1)
    parallel = chowder.cross_validate(records, folds, cfg, workers=2)
    assert serial.oof == parallel.oof


# -- ensembling ---------------------------------------------------------------


def test_ensemble_single_model_is_identity(rng):
    m = _model()
    W = FeatureMatrix(rng.standard_normal((12, m.d)), [f"t{i}" for i in range(12)])
    p, table = chowder.ensemble_predict([m], W, "s")
    z, s = chowder.forward(m, W)
    assert p == float(chowder.sigmoid(z))
    ens = table.select(table.model_id == "ensemble")
    np.testing.assert_array_equal(ens.score, s.ravel())


def test_ensemble_arithmetic_examples():
    assert np.mean([0.2, 0.8]) == 0.5
    cfg = ChowderConfig(K=1, r=1, mlp_hidden=(2,), mlp_dropout=(0.0,))
    a = ChowderModel.init(cfg, 1, np.random.default_rng(0))
    b = a.copy()
    a.params["score_w"][:] = 1.0
    b.params["score_w"][:] = -0.5
    a.params["score_b"][:] = b.params["score_b"][:] = 0.0
    W = FeatureMatrix(np.array([[1.0]]), ["t0"])
    _, table = chowder.ensemble_predict([a, b], W)
    assert table.select(table.model_id == "ensemble").score.tolist() == [0.25]


def test_ensemble_probability_is_member_mean(rng):
    models = [_model(seed=s) for s in range(5)]
    W = FeatureMatrix(rng.standard_normal((30, 6)), [f"t{i}" for i in range(30)])
    p, _ = chowder.ensemble_predict(models, W)
    members = [float(chowder.sigmoid(chowder.forward(m, W)[0])) for m in models]
    assert abs(p - sum(members) / 5) <= 1e-12


def test_ensemble_rejects_empty_and_mismatched(rng):
    W = FeatureMatrix(rng.standard_normal((3, 6)), ["a", "b", "c"])
    with pytest.raises(ValueError):
        chowder.ensemble_predict([], W)
    with pytest.raises(ValueError):
        chowder.ensemble_predict([_model(K=2), _model(K=3)], W)


# -- extremes -----------------------------------------------------------------


def _table(rows):
    t = TileScoreTable.concat([TileScoreTable.from_scores(s, [t], np.array([[v]]), "ensemble") for s, t, v in rows])
    return t


def test_extremes_top_one():
    t = _table([("s", "a", -1.0), ("s", "b", 0.0), ("s", "c", 2.0)])
    assert chowder.extract_extremes(t, 1, "max") == [("s", "c", 2.0)]
    assert chowder.extract_extremes(t, 1, "min") == [("s", "a", -1.0)]


def test_extremes_tie_break_is_lexicographic():
    t = _table([("s2", "a", 1.0), ("s1", "z", 1.0), ("s1", "b", 1.0), ("s0", "q", 0.0)])
    assert chowder.extract_extremes(t, 2, "max") == [("s1", "b", 1.0), ("s1", "z", 1.0)]


def test_extremes_average_channels_and_warn(caplog):
    t = TileScoreTable.from_scores("s", ["a", "b"], np.array([[1.0, 3.0], [0.0, 5.0]]), "ensemble")
    with caplog.at_level(logging.WARNING):
        out = chowder.extract_extremes(t, 5, "max")
    assert out == [("s", "b", 2.5), ("s", "a", 2.0)]
    assert "only 2 available" in caplog.text


def test_score_table_csv_round_trip(tmp_path, rng):
    t = TileScoreTable.from_scores("s", ["a", "b", "c"], rng.standard_normal((3, 2)), "0")
    t2 = TileScoreTable.from_csv(t.to_csv(tmp_path / "t.csv"))
    np.testing.assert_array_equal(t.score, t2.score)
    assert t2.tile_id.tolist() == t.tile_id.tolist()
