import math

import numpy as np
import pytest

from csforest.errors import ModelFormatError, ParameterError
from csforest.forest import (Forest, ForestParams, fit_regression_forest, kernel_weights,
                             load_forest, oob_predict, predict, save_forest)

FAST = ForestParams(num_trees=100, seed=7)


def manual_forest(x, labels, est_rows, split_row=0):
    """Forest of single-leaf trees whose leaves hold ``est_rows[t]``."""
    T = len(est_rows)
    k = len(est_rows[0])
    sub = np.array([[split_row, *rows] for rows in est_rows], dtype=np.int64)
    return Forest(
        label_kind="regression", params=ForestParams(num_trees=max(T, 2)),
        x=np.asarray(x, float), labels=np.asarray(labels, float),
        weights=np.ones(len(labels)), offsets=np.arange(T + 1, dtype=np.int64),
        feat=np.full(T, -1, dtype=np.int64), thr=np.zeros(T), left=np.full(T, -1, dtype=np.int64),
        right=np.full(T, -1, dtype=np.int64), lo=np.zeros(T, dtype=np.int64),
        hi=np.full(T, k, dtype=np.int64), sub=sub, n_split=1,
    )


def leaf_of(forest, t, xrow):
    g = forest.offsets[t]
    while forest.left[g] >= 0:
        g = forest.left[g] if xrow[forest.feat[g]] <= forest.thr[g] else forest.right[g]
    return g


def reorder_trees(forest, order):
    feat, thr, left, right, lo, hi, offsets = [], [], [], [], [], [], [0]
    for t in order:
        s = forest.tree_nodes(t)
        shift = offsets[-1] - forest.offsets[t]
        feat.append(forest.feat[s]); thr.append(forest.thr[s]); lo.append(forest.lo[s]); hi.append(forest.hi[s])
        left.append(np.where(forest.left[s] >= 0, forest.left[s] + shift, -1))
        right.append(np.where(forest.right[s] >= 0, forest.right[s] + shift, -1))
        offsets.append(offsets[-1] + s.stop - s.start)
    return Forest(label_kind=forest.label_kind, params=forest.params, x=forest.x, labels=forest.labels,
                  weights=forest.weights, offsets=np.array(offsets), feat=np.concatenate(feat),
                  thr=np.concatenate(thr), left=np.concatenate(left), right=np.concatenate(right),
                  lo=np.concatenate(lo), hi=np.concatenate(hi), sub=forest.sub[order],
                  n_split=forest.n_split)


@pytest.fixture(scope="module")
def noisy():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(400, 4))
    y = 2 * x[:, 0] + np.sin(6 * x[:, 1]) + rng.normal(scale=0.5, size=400)
    return x, y, fit_regression_forest(x, y, params=FAST)


class TestParams:
    def test_defaults(self):
        p = ForestParams()
        assert (p.num_trees, p.subsample_fraction, p.honesty_fraction, p.min_node_size) == (2000, 0.5, 0.5, 5)
        assert p.resolve_mtry(6) == 6
        assert p.resolve_mtry(1000) == math.ceil(math.sqrt(1000) + 20)

    @pytest.mark.parametrize("kw", [dict(num_trees=1), dict(subsample_fraction=0), dict(subsample_fraction=1.2),
                                    dict(honesty_fraction=1.0), dict(mtry=0), dict(min_node_size=0),
                                    dict(seed=-1)])
    def test_rejects(self, kw):
        with pytest.raises(ParameterError):
            ForestParams(**kw)

    def test_mtry_above_p(self):
        with pytest.raises(ParameterError):
            fit_regression_forest(np.zeros((10, 2)), np.zeros(10), params=ForestParams(num_trees=2, mtry=3))


class TestRegressionForest:
    def test_constant_labels(self, rng):
        x = rng.uniform(size=(100, 3))
        f = fit_regression_forest(x, np.full(100, 7.0), params=FAST)
        np.testing.assert_array_equal(predict(f, rng.uniform(size=(20, 3))), 7.0)
        np.testing.assert_array_equal(oob_predict(f), 7.0)
        # single-leaf trees only
        assert np.all(f.left == -1)

    def test_step_function(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(200, 1))
        f = fit_regression_forest(x, (x[:, 0] > 0.5).astype(float), params=ForestParams(num_trees=500, seed=1))
        grid = np.linspace(0.005, 0.995, 199)[:, None]
        assert np.mean((predict(f, grid) - (grid[:, 0] > 0.5)) ** 2) < 0.01

    def test_zero_weights_match_refit_on_positive_rows(self, rng):
        x = rng.uniform(size=(300, 3))
        y = x[:, 0] + rng.normal(size=300)
        w = np.zeros(300)
        keep = rng.permutation(300)[:150]
        w[np.sort(keep)] = 1.0
        keep = np.sort(keep)
        params = ForestParams(num_trees=50, seed=11)
        full = fit_regression_forest(x, y, w, params)
        part = fit_regression_forest(x[keep], y[keep], params=params)
        xq = rng.uniform(size=(40, 3))
        np.testing.assert_array_equal(predict(full, xq), predict(part, xq))
        # zero-weight rows never enter a subsample
        assert not np.isin(full.sub, np.flatnonzero(w == 0)).any()

    def test_zero_total_weight(self):
        with pytest.raises(ParameterError):
            fit_regression_forest(np.zeros((5, 1)), np.zeros(5), np.zeros(5), FAST)

    def test_dimension_mismatch(self, noisy):
        with pytest.raises(ParameterError):
            predict(noisy[2], np.zeros((3, 5)))

    def test_kernel_weights_reproduce_predictions(self, noisy, rng):
        x, y, f = noisy
        xq = rng.uniform(size=(50, 4))
        pred = predict(f, xq)
        for r in range(50):
            alpha = kernel_weights(f, xq[r])
            assert alpha.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(alpha >= 0)
            assert alpha @ y == pytest.approx(pred[r], abs=1e-10)

    def test_kernel_weights_sum_to_one(self, noisy, rng):
        f = noisy[2]
        for xr in rng.uniform(size=(100, 4)):
            assert abs(kernel_weights(f, xr).sum() - 1) < 1e-12

    def test_oob_kernel_matches_oob_prediction(self, noisy):
        x, y, f = noisy
        oob = oob_predict(f)
        for i in range(0, 400, 40):
            alpha = kernel_weights(f, x[i], oob_id=i)
            assert alpha[i] == 0.0
            assert alpha @ y == pytest.approx(oob[i], abs=1e-10)

    def test_tree_order_invariance(self, noisy, rng):
        f = noisy[2]
        xq = rng.uniform(size=(30, 4))
        g = reorder_trees(f, rng.permutation(f.num_trees))
        np.testing.assert_allclose(predict(g, xq), predict(f, xq), rtol=0, atol=1e-12)

    def test_oob_mse_exceeds_in_sample(self):
        wins = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x = rng.uniform(size=(300, 3))
            y = x[:, 0] + rng.normal(size=300)
            f = fit_regression_forest(x, y, params=ForestParams(num_trees=50, seed=seed))
            wins += np.mean((oob_predict(f) - y) ** 2) >= np.mean((predict(f, x) - y) ** 2)
        assert wins >= 19


class TestManualForests:
    def test_single_leaf_mean(self):
        f = manual_forest(np.zeros((3, 1)), [0, 1, 3], [[1, 2], [1, 2]])
        np.testing.assert_array_equal(predict(f, np.array([[0.3], [9.0]])), 2.0)

    def test_single_unit_leaf(self):
        f = manual_forest(np.zeros((3, 1)), [0, 1, 3], [[2], [2]])
        np.testing.assert_array_equal(kernel_weights(f, [0.0]), [0, 0, 1])

    def test_duplicate_trees(self):
        one = manual_forest(np.zeros((4, 1)), [0, 1, 3, 4], [[1, 2, 3]])
        two = manual_forest(np.zeros((4, 1)), [0, 1, 3, 4], [[1, 2, 3], [1, 2, 3]])
        np.testing.assert_array_equal(kernel_weights(one, [0.0]), kernel_weights(two, [0.0]))


class TestOob:
    def test_two_tree_forest(self, rng):
        x = rng.uniform(size=(60, 2))
        y = rng.normal(size=60)
        f = fit_regression_forest(x, y, params=ForestParams(num_trees=2, seed=5, min_node_size=2))
        inbag = f.inbag
        only_first = np.flatnonzero((inbag[0] == 1) & (inbag[1] == 0))
        assert only_first.size
        oob = oob_predict(f)
        for i in only_first:
            g = leaf_of(f, 1, x[i])
            members = f.est[1, f.lo[g]:f.hi[g]]
            assert oob[i] == pytest.approx(y[members].mean(), abs=1e-12)

    def test_fallback_when_in_bag_everywhere(self, rng, caplog):
        x = rng.uniform(size=(20, 1))
        y = rng.normal(size=20)
        f = fit_regression_forest(x, y, params=ForestParams(num_trees=2, subsample_fraction=1.0, seed=1))
        assert f.oob_fallbacks().size == 20
        with caplog.at_level("WARNING"):
            np.testing.assert_allclose(oob_predict(f), predict(f, x))
        assert "in-bag for every tree" in caplog.text


class TestStructure:
    def test_subsample_accounting(self, noisy):
        f = noisy[2]
        assert f.split.shape[1] + f.est.shape[1] == math.ceil(0.5 * 400)
        for t in range(f.num_trees):
            assert not np.intersect1d(f.split[t], f.est[t]).size
            assert np.unique(f.sub[t]).size == f.sub.shape[1]

    def test_leaves_hold_estimation_units(self, noisy):
        f = noisy[2]
        leaves = f.left == -1
        assert np.all(f.hi[leaves] > f.lo[leaves])

    def test_routing_rule(self, noisy):
        f = noisy[2]
        internal = np.flatnonzero(f.left >= 0)
        g = internal[0]
        xr = np.full(4, 0.5)
        xr[f.feat[g]] = f.thr[g]
        # x equal to the threshold goes left
        assert f.thr[g] == xr[f.feat[g]]

    def test_determinism(self, noisy):
        x, y, f = noisy
        g = fit_regression_forest(x, y, params=FAST)
        for k in ("offsets", "feat", "thr", "left", "right", "lo", "hi", "sub"):
            np.testing.assert_array_equal(getattr(f, k), getattr(g, k))

    def test_honesty(self, rng):
        x = rng.uniform(size=(200, 3))
        y = x[:, 0] + rng.normal(scale=0.1, size=200)
        params = ForestParams(num_trees=5, seed=9)
        f = fit_regression_forest(x, y, params=params)
        for t in range(f.num_trees):
            y2 = y.copy()
            y2[f.est[t]] = rng.normal(size=f.est.shape[1]) * 100
            g = fit_regression_forest(x, y2, params=params)
            a, b = f.tree_nodes(t), g.tree_nodes(t)
            np.testing.assert_array_equal(f.feat[a], g.feat[b])
            np.testing.assert_array_equal(f.thr[a], g.thr[b])
            # the relabelled units do move other trees, so the check is not vacuous
            assert not np.array_equal(f.thr, g.thr)

    def test_roundtrip(self, noisy, tmp_path, rng):
        f = noisy[2]
        save_forest(f, tmp_path / "f.npz")
        g = load_forest(tmp_path / "f.npz")
        xq = rng.uniform(size=(25, 4))
        assert predict(g, xq).tobytes() == predict(f, xq).tobytes()
        assert oob_predict(g).tobytes() == oob_predict(f).tobytes()
        assert g.params == f.params

    def test_roundtrip_is_byte_stable(self, noisy, tmp_path):
        save_forest(noisy[2], tmp_path / "a.npz")
        save_forest(noisy[2], tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_rejects_foreign_rng(self, noisy):
        arrays = noisy[2].to_arrays()
        import json
        meta = json.loads(str(arrays["meta"][()]))
        meta["rng"] = "mt19937"
        arrays["meta"] = np.array(json.dumps(meta))
        with pytest.raises(ModelFormatError):
            Forest.from_arrays(arrays)
