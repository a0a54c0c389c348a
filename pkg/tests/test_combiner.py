import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbfn import combiner as cb
from sbfn.datasets import synth_sine
from sbfn.errors import ConfigurationError, NumericError, ShapeError, SolverError


# -- units and feature map ---------------------------------------------------------------

def test_gaussian_unit_examples():
    assert cb.gaussian_unit([1.0, 2.0], [1.0, 2.0], 0.7) == 1.0
    assert cb.gaussian_unit([3.0, 4.0], [0.0, 0.0], 5.0) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert cb.gaussian_unit([1e3], [0.0], 1.0) == 0.0
    assert 0 < cb.gaussian_unit([3.0], [0.0], 1.0) < 0.02


def test_gaussian_unit_floor():
    v = cb.gaussian_unit([1e-6], [0.0], 0.0)
    assert v == pytest.approx(math.exp(-0.5))


def test_feature_map_examples():
    layer = cb.RbfLayer(np.array([[0.3, 0.7]]), [1.0])
    np.testing.assert_array_equal(cb.feature_map([0.3, 0.7], layer), [1.0])
    two = cb.RbfLayer(np.array([[-1.0, 0.0], [1.0, 0.0]]), [0.5, 0.5])
    np.testing.assert_allclose(cb.feature_map([0.0, 3.0], two, normalize_rows=True), [0.5, 0.5], atol=1e-15)


def test_feature_map_matches_unit_oracle():
    rng = np.random.default_rng(0)
    C, s = rng.normal(size=(6, 4)), rng.uniform(0.5, 2.0, 6)
    layer = cb.RbfLayer(C, s)
    row = rng.normal(size=4)
    oracle = np.array([cb.gaussian_unit(row, C[k], s[k]) for k in range(6)])
    np.testing.assert_allclose(cb.feature_map(row, layer), oracle, rtol=1e-14)
    np.testing.assert_allclose(cb.feature_map(row, layer, True), oracle / oracle.sum(), rtol=1e-14)


def test_feature_map_dimension_mismatch():
    with pytest.raises(ShapeError):
        cb.feature_map([1.0, 2.0, 3.0], cb.RbfLayer(np.zeros((2, 2)), [1.0, 1.0]))


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_features_in_unit_interval_and_normalized_rows_sum_to_one(K, d, seed):
    rng = np.random.default_rng(seed)
    layer = cb.RbfLayer(rng.normal(size=(K, d)), rng.uniform(0.1, 3, K))
    rows = rng.normal(size=(8, d)) * 2
    H = cb.feature_matrix(rows, layer)
    assert np.all((H >= 0) & (H <= 1))
    Hn = cb.feature_matrix(rows, layer, "sum")
    sums = Hn.sum(axis=1)
    ok = H.sum(axis=1) > cb.SUM_FLOOR
    np.testing.assert_allclose(sums[ok], 1.0, atol=1e-12)


def test_layernorm_rows():
    rng = np.random.default_rng(1)
    layer = cb.RbfLayer(rng.normal(size=(5, 3)), np.ones(5))
    Hn = cb.feature_matrix(rng.normal(size=(4, 3)), layer, "layernorm")
    np.testing.assert_allclose(Hn.mean(axis=1), 0, atol=1e-12)


# -- running moments ---------------------------------------------------------------------

def test_g1_example():
    layer = cb.RbfLayer.running("G1", 1)
    for v in (1.0, 2.0, 3.0):
        cb.update_moments(layer, [v])
    assert layer.centers[0, 0] == pytest.approx(2.0)
    assert layer.scales[0] == pytest.approx(1.0)


def test_g2_example():
    layer = cb.RbfLayer.running("G2", 1, window=2)
    for v in (1.0, 2.0, 3.0):
        cb.update_moments(layer, [v])
    assert layer.centers[0, 0] == 2.5
    assert layer.scales[0] == pytest.approx(np.std([2.0, 3.0], ddof=1))


def test_g3_example():
    layer = cb.RbfLayer.running("G3", 2)
    cb.update_moments(layer, [1.0, 4.0])
    np.testing.assert_allclose(layer.scales, [3 / math.sqrt(2)] * 2, rtol=1e-15)
    assert layer.scales[0] == pytest.approx(2.12132, abs=1e-5)


def test_g3_scale_against_pairwise_oracle():
    z = np.random.default_rng(3).normal(size=7)
    oracle = [max(abs(z[j] - z[p]) for p in range(7) if p != j) / math.sqrt(7) for j in range(7)]
    np.testing.assert_allclose(cb.g3_scales(z), oracle, rtol=1e-15)


def test_single_observation_uses_floor():
    for v in ("G1", "G2"):
        layer = cb.RbfLayer.running(v, 3)
        cb.update_moments(layer, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(layer.scales, [cb.SCALE_FLOOR] * 3)


def test_g1_tracks_batch_statistics():
    rng = np.random.default_rng(5)
    obs = rng.normal(3.0, 2.0, size=(500, 4))
    layer = cb.RbfLayer.running("G1", 4)
    for t, row in enumerate(obs, start=1):
        cb.update_moments(layer, row)
        if t % 100 == 0:
            np.testing.assert_allclose(layer.centers[:, 0], obs[:t].mean(axis=0), rtol=1e-12)
            np.testing.assert_allclose(layer.scales, obs[:t].std(axis=0, ddof=1), rtol=1e-10)


def test_update_moments_rejects_kmeans_layer():
    with pytest.raises(ConfigurationError):
        cb.update_moments(cb.RbfLayer(np.zeros((2, 2)), [1, 1]), [0.0, 0.0])


# -- k-means -----------------------------------------------------------------------------

def _wcss(X, C):
    d = ((X[:, None, :] - C[None]) ** 2).sum(2)
    return d.min(axis=1).sum()


def _naive_lloyd(X, K, rng, iters=300):
    C = X[rng.choice(len(X), K, replace=False)].copy()
    for _ in range(iters):
        a = np.array([np.argmin([np.sum((x - c) ** 2) for c in C]) for x in X])
        new = np.array([X[a == k].mean(axis=0) if np.any(a == k) else C[k] for k in range(K)])
        if np.allclose(new, C):
            break
        C = new
    return C


def test_kmeans_k_equals_n():
    X = np.random.default_rng(0).normal(size=(6, 3))
    C, s = cb.kmeans_centers(X, 6, seed=1)
    assert sorted(map(tuple, C)) == sorted(map(tuple, X))
    np.testing.assert_array_equal(s, [cb.SCALE_FLOOR] * 6)


def test_kmeans_separated_clouds():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, size=(30, 2))
    b = rng.uniform(10, 11, size=(30, 2))
    C, _ = cb.kmeans_centers(np.vstack([a, b]), 2, seed=0)
    boxes = [(a.min(0), a.max(0)), (b.min(0), b.max(0))]
    for lo, hi in boxes:
        assert sum(np.all((c >= lo) & (c <= hi)) for c in C) == 1


def test_kmeans_not_worse_than_random_restart_oracle():
    train, _ = synth_sine(seed=0)
    X = train.features
    C, _ = cb.kmeans_centers(X, 5, seed=0)
    rng = np.random.default_rng(123)
    oracle = min(_wcss(X, _naive_lloyd(X, 5, rng)) for _ in range(10))
    assert _wcss(X, C) <= oracle * (1 + 1e-9)


def test_kmeans_deterministic_and_scales():
    X = np.random.default_rng(4).normal(size=(80, 3))
    C1, s1 = cb.kmeans_centers(X, 4, seed=9)
    C2, s2 = cb.kmeans_centers(X, 4, seed=9)
    assert C1.tobytes() == C2.tobytes() and s1.tobytes() == s2.tobytes()
    d = np.sqrt(((X[:, None] - C1[None]) ** 2).sum(2))
    a = d.argmin(1)
    for k in range(4):
        assert s1[k] == pytest.approx(d[a == k, k].mean(), rel=1e-12)


def test_kmeans_refine_keeps_unit_order():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 1, size=(20, 2))
    b = rng.uniform(10, 11, size=(20, 2))
    X = np.vstack([a, b])
    C, s = cb.kmeans_refine(X, [[9.0, 9.0], [2.0, 2.0]])    # start near b, then a
    np.testing.assert_allclose(C, [b.mean(0), a.mean(0)])
    C2, s2 = cb.kmeans_refine(X, C)                          # converged centres are a fixed point
    assert C2.tobytes() == C.tobytes() and s2.tobytes() == s.tobytes()
    with pytest.raises(ShapeError):
        cb.kmeans_refine(X, np.zeros((2, 3)))


def test_kmeans_needs_enough_rows():
    with pytest.raises(ConfigurationError):
        cb.kmeans_centers(np.zeros((3, 2)), 4)


def test_grid_centers_data_independent():
    rng = np.random.default_rng(0)
    X1 = rng.uniform(-3, 3, size=(100, 2))
    X2 = np.vstack([X1, rng.uniform(-0.1, 0.1, size=(500, 2))])   # same box, different density
    C1, s1 = cb.grid_centers(X1, 10)
    C2, s2 = cb.grid_centers(X2, 10)
    np.testing.assert_array_equal(C1, C2)
    np.testing.assert_array_equal(s1, s2)
    assert len(C1) == 10 and np.all(s1 == s1[0])


# -- ridge and first-order updates -------------------------------------------------------

def _hand_elimination_2x2(F, y, lam):
    a11 = sum(r[0] * r[0] for r in F) + lam
    a12 = sum(r[0] * r[1] for r in F)
    a22 = sum(r[1] * r[1] for r in F) + lam
    b1 = sum(r[0] * t for r, t in zip(F, y))
    b2 = sum(r[1] * t for r, t in zip(F, y))
    m = a12 / a11
    x2 = (b2 - m * b1) / (a22 - m * a12)
    x1 = (b1 - a12 * x2) / a11
    return np.array([x1, x2])


def test_ridge_hand_oracle():
    F, y = [[1, 0], [1, 1], [0, 1]], [1, 2, 1]
    alpha = cb.ridge_solve(np.array(F, float), np.array(y, float), 0.5)
    np.testing.assert_allclose(alpha, _hand_elimination_2x2(F, y, 0.5), rtol=0, atol=1e-10)
    np.testing.assert_allclose(alpha, [6 / 7, 6 / 7], atol=1e-12)


def test_ridge_identity_design():
    y = np.array([1.5, -2.0, 0.25])
    np.testing.assert_allclose(cb.ridge_solve(np.eye(3), y, 0.0), y, atol=1e-14)


def test_ridge_shrinks_monotonically():
    rng = np.random.default_rng(0)
    F, y = rng.normal(size=(20, 4)), rng.normal(size=20)
    norms = [np.linalg.norm(cb.ridge_solve(F, y, lam)) for lam in (0.1, 1, 10, 100, 1e4, 1e8)]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-6


def test_ridge_singular_at_zero():
    F = np.array([[1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(SolverError) as ei:
        cb.ridge_solve(F, [1.0, 2.0], 0.0)
    assert "lambda2" in str(ei.value)
    cb.ridge_solve(F, [1.0, 2.0], 1e-3)


def test_sgd_regression_examples():
    F = np.array([[1.0, 0.5], [0.2, 0.3]])
    a = np.array([0.4, -1.0])
    np.testing.assert_array_equal(cb.sgd_step_regression(a, F, F @ a, 0.7, 0.0), a)
    x, y, eta, lam = np.array([0.3, 0.9]), 1.7, 0.05, 0.2
    manual = a - eta * ((x @ a - y) * x + lam * a)
    np.testing.assert_allclose(cb.sgd_step_regression(a, x[None], [y], eta, lam), manual, atol=1e-15)


def test_sgd_regression_converges_to_ridge():
    rng = np.random.default_rng(1)
    F, y = rng.uniform(0, 1, size=(40, 3)), rng.normal(size=40)
    lam = 0.3
    target = cb.ridge_solve(F, y, lam * len(y))   # (1/b) data term vs summed normal equations
    a = np.zeros(3)
    for _ in range(20000):
        a = cb.sgd_step_regression(a, F, y, 0.5, lam)
    assert np.linalg.norm(a - target) / np.linalg.norm(target) < 1e-4


def test_sgd_regression_non_finite():
    with pytest.raises(NumericError):
        cb.sgd_step_regression([1e308], [[1e308]], [0.0], 1e10, 0.0)


def _ce(alpha, F, Y, T):
    Z = F @ alpha / T
    Z = Z - Z.max(axis=1, keepdims=True)
    logp = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    return -np.mean(np.sum(Y * logp, axis=1))


def test_sgd_classification_fd():
    rng = np.random.default_rng(2)
    F, a, T = rng.uniform(0, 1, size=(7, 4)), rng.normal(size=(4, 3)), 3.0
    Y = np.eye(3)[rng.integers(3, size=7)]
    g = (a - cb.sgd_step_classification(a, F, Y, 1.0, T))
    num = np.zeros_like(a)
    h = 1e-6
    for idx in np.ndindex(a.shape):
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        num[idx] = (_ce(ap, F, Y, T) - _ce(am, F, Y, T)) / (2 * h)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-5


def test_sgd_classification_binary_matches_logistic():
    rng = np.random.default_rng(3)
    F, a, T = rng.normal(size=(9, 3)), rng.normal(size=(3, 2)), 2.0
    y = rng.integers(2, size=9)
    g = a - cb.sgd_step_classification(a, F, np.eye(2)[y], 1.0, T)
    # two-class softmax is a logistic model on w = (a1 - a0) / T
    w = (a[:, 1] - a[:, 0]) / T
    p1 = 1 / (1 + np.exp(-(F @ w)))
    gw = F.T @ (p1 - y) / len(y)
    np.testing.assert_allclose(g[:, 1], gw / T, rtol=1e-12)
    np.testing.assert_allclose(g[:, 0], -gw / T, rtol=1e-12)


def test_sgd_classification_zero_gradient_at_targets():
    # with T -> small and separable logits P equals one-hot to machine precision
    F = np.eye(2)
    a = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    out = cb.sgd_step_classification(a, F, np.eye(2), 0.1, 1.0)
    np.testing.assert_array_equal(out, a)


# -- centre gradients --------------------------------------------------------------------

def _centre_fd(layer, rows, labels, weights, h=1e-6):
    num = np.zeros_like(layer.centers)
    for idx in np.ndindex(layer.centers.shape):
        lp, lm = layer.copy(), layer.copy()
        lp.centers[idx] += h
        lm.centers[idx] -= h
        num[idx] = (cb.classification_loss_grads(rows, labels, lp, weights)[0]
                    - cb.classification_loss_grads(rows, labels, lm, weights)[0]) / (2 * h)
    return num


@pytest.mark.parametrize("norm", [None, "sum", "layernorm"])
@pytest.mark.parametrize("K", [1, 4])
def test_centre_and_alpha_gradients_fd(norm, K):
    if norm == "layernorm" and K == 1:
        pytest.skip("layernorm of a single feature is constant")
    rng = np.random.default_rng(K)
    rows = rng.uniform(0, 1, size=(6, 6))
    layer = cb.RbfLayer(rng.uniform(0, 1, size=(K, 6)), rng.uniform(0.5, 1.0, K))
    w = cb.CombinerWeights(rng.normal(size=(K, 3)), 3.0, norm is not None, norm or "sum")
    labels = rng.integers(3, size=6)
    _, g_alpha, g_c = cb.classification_loss_grads(rows, labels, layer, w)
    num = _centre_fd(layer, rows, labels, w)
    if np.linalg.norm(num) > 1e-10:
        assert np.linalg.norm(g_c - num) / np.linalg.norm(num) < 1e-4
    else:
        assert np.linalg.norm(g_c) < 1e-8
    h, na = 1e-6, np.zeros_like(w.alpha)
    for idx in np.ndindex(w.alpha.shape):
        wp = cb.CombinerWeights(w.alpha.copy(), w.temperature, w.normalize_rows, w.norm_kind)
        wm = cb.CombinerWeights(w.alpha.copy(), w.temperature, w.normalize_rows, w.norm_kind)
        wp.alpha[idx] += h
        wm.alpha[idx] -= h
        na[idx] = (cb.classification_loss_grads(rows, labels, layer, wp)[0]
                   - cb.classification_loss_grads(rows, labels, layer, wm)[0]) / (2 * h)
    assert np.linalg.norm(g_alpha - na) / np.linalg.norm(na) < 1e-5


def test_gradient_step_centers():
    layer = cb.RbfLayer(np.ones((2, 3)), [1.0, 1.0])
    same = cb.gradient_step_centers(layer, np.zeros((2, 3)), 0.5)
    np.testing.assert_array_equal(same.centers, layer.centers)
    moved = cb.gradient_step_centers(layer, np.ones((2, 3)), 0.5)
    np.testing.assert_array_equal(moved.centers, 0.5 * np.ones((2, 3)))
    np.testing.assert_array_equal(layer.centers, np.ones((2, 3)))
    with pytest.raises(NumericError):
        cb.gradient_step_centers(layer, np.full((2, 3), np.inf), 0.5)


# -- prediction and serialisation ----------------------------------------------------------

def test_predict_regression_examples():
    layer = cb.RbfLayer(np.array([[0.5, 0.5]]), [1.0])
    assert cb.predict_regression([0.5, 0.5], layer, cb.CombinerWeights([2.5])) == 2.5
    assert cb.predict_regression([0.1, 0.9], layer, cb.CombinerWeights([0.0])) == 0.0
    rng = np.random.default_rng(6)
    big = cb.RbfLayer(rng.normal(size=(5, 3)), rng.uniform(0.5, 2, 5))
    a = rng.normal(size=5)
    row = rng.normal(size=3)
    manual = sum(a[k] * cb.gaussian_unit(row, big.centers[k], big.scales[k]) for k in range(5))
    assert cb.predict_regression(row, big, cb.CombinerWeights(a)) == pytest.approx(manual, abs=1e-12)
    with pytest.raises(ShapeError):
        cb.predict_regression(row, big, cb.CombinerWeights(a[:3]))


def test_predict_classification_examples():
    rng = np.random.default_rng(7)
    layer = cb.RbfLayer(rng.uniform(size=(4, 20)), np.ones(4))
    row = rng.uniform(size=20)
    p0 = cb.predict_classification(row, layer, cb.CombinerWeights(np.zeros((4, 10)), 3.0))
    np.testing.assert_allclose(p0, np.full(10, 0.1), atol=1e-15)
    a = rng.normal(size=(4, 10))
    p = cb.predict_classification(row, layer, cb.CombinerWeights(a, 1.0, True))
    assert abs(p.sum() - 1) < 1e-12
    for T in (0.1, 3.0, 50.0):
        q = cb.predict_classification(row, layer, cb.CombinerWeights(a, T, True))
        assert q.argmax() == p.argmax()


def test_combiner_json_round_trip():
    rng = np.random.default_rng(8)
    layer = cb.RbfLayer(rng.normal(size=(3, 6)), rng.uniform(0.1, 1, 3))
    w = cb.CombinerWeights(rng.normal(size=(3, 2)) / 7, 3.0, True, "sum")
    from sbfn.structured import simplex
    tc = cb.TrainedCombiner(layer, w, simplex(2))
    back = cb.TrainedCombiner.from_json(tc.to_json())
    assert back.layer.centers.tobytes() == layer.centers.tobytes()
    assert back.layer.scales.tobytes() == layer.scales.tobytes()
    assert back.weights.alpha.tobytes() == w.alpha.tobytes()
    assert back.geometry == tc.geometry and back.weights.temperature == 3.0
