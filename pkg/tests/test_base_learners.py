import numpy as np
import pytest

from sbfn import base_learners as bl
from sbfn.errors import ConfigurationError, NumericError, ShapeError


def _net(hidden=(5, 4), in_dim=3, out_dim=1, seed=0, act="relu", scale=1.0):
    cfg = bl.PredictorConfig(hidden, init_scale=scale, seed=seed, activation=act)
    p = bl.init_mlp(cfg, in_dim, out_dim)
    rng = np.random.default_rng(seed + 100)
    for W, b in p.layers:
        b += rng.normal(scale=0.3, size=b.shape)  # nonzero biases exercise every path
    return p


def _naive_forward(params, x):
    """Neuron-by-neuron evaluation."""
    a = list(x)
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        out = []
        for r in range(W.shape[0]):
            s = b[r]
            for c in range(W.shape[1]):
                s += W[r, c] * a[c]
            if i != last:
                s = max(s, 0.0) if params.activation == "relu" else np.tanh(s)
            out.append(s)
        a = out
    return np.array(a)


def test_zero_scale_gives_zero_params():
    p = bl.init_mlp(bl.PredictorConfig((8, 8), init_scale=0.0), 4, 2)
    assert all(not W.any() and not b.any() for W, b in p.layers)
    np.testing.assert_array_equal(bl.forward(p, np.ones(4)), [0.0, 0.0])


def test_init_deterministic():
    cfg = bl.PredictorConfig((6,), init_scale=0.5, seed=11)
    a, b = bl.init_mlp(cfg, 3, 2), bl.init_mlp(cfg, 3, 2)
    assert a.flat().tobytes() == b.flat().tobytes()


def test_init_std_matches_fan_in_scaling():
    p = bl.init_mlp(bl.PredictorConfig((10000,), init_scale=1.0, seed=5), 100, 1)
    W = p.layers[0][0]
    assert abs(W.std() - 0.1) < 0.01
    assert not p.layers[0][1].any()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        bl.PredictorConfig(())
    with pytest.raises(ConfigurationError):
        bl.PredictorConfig((4,), learning_rate=0.0)


def test_identity_layer():
    p = bl.MlpParams([(np.eye(2), np.zeros(2))])
    np.testing.assert_array_equal(bl.forward(p, [1.0, 2.0]), [1.0, 2.0])


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_forward_matches_neuron_oracle(act):
    p = _net((7, 5), in_dim=4, out_dim=3, act=act)
    x = np.random.default_rng(9).normal(size=4)
    np.testing.assert_allclose(bl.forward(p, x), _naive_forward(p, x), rtol=0, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        bl.forward(_net(), np.ones(5))


def test_layer_chain_invariant():
    with pytest.raises(ShapeError):
        bl.MlpParams([(np.ones((3, 2)), np.zeros(3)), (np.ones((1, 4)), np.zeros(1))])


def _fd_check(p, X, y, w, kind, h=1e-6):
    _, grads = bl.weighted_loss_and_grads(p, X, y, w, kind)
    worst = 0.0
    for li, (W, b) in enumerate(p.layers):
        for arr, g in ((W, grads[li][0]), (b, grads[li][1])):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                lp, _ = bl.weighted_loss_and_grads(p, X, y, w, kind)
                arr[idx] = old - h
                lm, _ = bl.weighted_loss_and_grads(p, X, y, w, kind)
                arr[idx] = old
                num[idx] = (lp - lm) / (2 * h)
            worst = max(worst, np.linalg.norm(num - g) / max(np.linalg.norm(num), 1e-12))
    return worst


@pytest.mark.parametrize("hidden", [(6,), (5, 4)])
@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_squared_gradient_finite_differences(hidden, act):
    rng = np.random.default_rng(1)
    p = _net(hidden, in_dim=3, out_dim=1, act=act)
    X, y, w = rng.normal(size=(6, 3)), rng.normal(size=6), rng.uniform(0.1, 1, 6)
    assert _fd_check(p, X, y, w, "squared") < 1e-5


@pytest.mark.parametrize("hidden", [(6,), (5, 4)])
@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_cross_entropy_gradient_finite_differences(hidden, act):
    rng = np.random.default_rng(2)
    p = _net(hidden, in_dim=3, out_dim=4, act=act)
    X, y, w = rng.normal(size=(6, 3)), rng.integers(4, size=6), rng.uniform(0.1, 1, 6)
    assert _fd_check(p, X, y, w, "cross_entropy") < 1e-5


def test_zero_delta_zero_l1_is_identity():
    p = _net()
    cfg = bl.PredictorConfig((5, 4), l1_coeff=0.0, learning_rate=0.5)
    q = bl.delta_weighted_update(p, np.ones(3), 2.0, 0.0, "squared", cfg)
    assert q.flat().tobytes() == p.flat().tobytes()


def test_update_rule_is_delta_scaled_gradient_plus_l1():
    p = _net()
    x, y = np.array([0.3, -1.0, 2.0]), 0.7
    lr, l1 = 0.05, 0.01
    cfg = bl.PredictorConfig((5, 4), l1_coeff=l1, learning_rate=lr)
    _, g = bl.weighted_loss_and_grads(p, x[None], [y], [1.0], "squared")
    gflat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in g])
    for delta in (0.25, 1.0):
        q = bl.delta_weighted_update(p, x, y, delta, "squared", cfg)
        expected = p.flat() - lr * (delta * gflat + l1 * np.sign(p.flat()))
        np.testing.assert_allclose(q.flat(), expected, rtol=0, atol=1e-14)


def test_sign_of_zero_is_zero():
    p = bl.init_mlp(bl.PredictorConfig((3,), init_scale=0.0), 2, 1)
    cfg = bl.PredictorConfig((3,), l1_coeff=1.0, learning_rate=1.0)
    q = bl.delta_weighted_update(p, np.ones(2), 0.0, 0.0, "squared", cfg)
    assert not q.flat().any()


def test_loss_kind_must_match_output():
    cfg = bl.PredictorConfig((3,))
    with pytest.raises(ShapeError):
        bl.delta_weighted_update(_net(out_dim=3), np.ones(3), 1.0, 1.0, "squared", cfg)
    with pytest.raises(ShapeError):
        bl.delta_weighted_update(_net(out_dim=1), np.ones(3), 0, 1.0, "cross_entropy", cfg)


def test_non_finite_gradient_reports_layer():
    p = _net()
    p.layers[-1][0][0, 0] = np.inf
    with pytest.raises(NumericError) as ei:
        bl.delta_weighted_update(p, np.ones(3), 1.0, 1.0, "squared", bl.PredictorConfig((5, 4)))
    assert ei.value.index is not None


def test_stacked_step_matches_per_model_updates():
    rng = np.random.default_rng(4)
    nets = [_net((6, 5), in_dim=3, seed=s) for s in range(4)]
    stack = bl.MlpStack.from_params([n.copy() for n in nets])
    lrs = np.array([0.01, 0.02, 0.03, 0.04])
    l1s = np.array([0.0, 1e-3, 0.0, 2e-3])
    weigh = lambda losses: np.array([0.1, 0.2, 0.3, 0.4])
    for _ in range(5):
        x, y = rng.normal(size=3), rng.normal()
        out, deltas = stack.squared_step(x, y, weigh, lrs, l1s)
        for j in range(4):
            assert out[j] == pytest.approx(bl.forward(nets[j], x)[0], abs=1e-12)
            cfg = bl.PredictorConfig((6, 5), learning_rate=lrs[j], l1_coeff=l1s[j])
            bl.delta_weighted_update(nets[j], x, y, deltas[j], "squared", cfg, inplace=True)
    for a, b in zip(stack.to_params(), nets):
        np.testing.assert_allclose(a.flat(), b.flat(), rtol=0, atol=1e-12)


def test_params_dict_round_trip():
    p = _net()
    q = bl.MlpParams.from_dict(p.to_dict())
    assert q.flat().tobytes() == p.flat().tobytes()
