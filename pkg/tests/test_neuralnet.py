import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from queuenet import neuralnet as nn
from queuenet.neuralnet import MLPParams, TrainConfig


def small_params(seed=0, dims=(3, 5, 4), dtype=np.float64):
    return nn.init_params(dims[0], dims[1:-1], dims[-1], seed=seed, dtype=dtype)


# -- forward ------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(x=arrays(np.float64, 9, elements=st.floats(-20, 20)))
def test_output_is_distribution(x):
    p = nn.forward(nn.init_params(9, (16, 16), 500, seed=1), x)
    assert p.shape == (500,)
    assert abs(float(p.sum()) - 1.0) < 1e-6
    assert np.all(p >= 0)


def test_default_architecture():
    params = nn.init_params(9)
    assert params.layer_widths == (50, 70, 200, 350, 200, 350, 600, 500)
    assert params.dtype == np.float32
    assert abs(nn.forward(params, np.zeros(9)).sum() - 1.0) < 1e-6


def test_zero_parameters_give_uniform_output():
    params = nn.init_params(9, (8,), 500)
    zero = MLPParams([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])
    assert np.allclose(nn.forward(zero, np.arange(9.0)), 1 / 500)


def test_output_bias_shift_invariance():
    params = small_params(2)
    x = np.array([0.3, -1.0, 2.0])
    shifted = MLPParams(params.weights, params.biases[:-1] + [params.biases[-1] + 7.5])
    assert np.allclose(nn.forward(params, x), nn.forward(shifted, x), atol=1e-12)


def test_batch_of_one_matches_forward():
    params = nn.init_params(9, (20, 20), 50, seed=3)
    x = np.random.default_rng(0).normal(size=9)
    assert np.array_equal(nn.infer_batch(params, x[None, :])[0], nn.forward(params, x))


def test_permuting_rows_permutes_outputs():
    params = nn.init_params(9, (20,), 50, seed=3)
    X = np.random.default_rng(1).normal(size=(16, 9))
    perm = np.random.default_rng(2).permutation(16)
    assert np.allclose(nn.infer_batch(params, X[perm]), nn.infer_batch(params, X)[perm], atol=1e-6)


def test_wrong_input_width():
    with pytest.raises(ValueError):
        nn.forward(nn.init_params(9, (4,), 5), np.zeros(8))
    with pytest.raises(ValueError):
        nn.infer_batch(nn.init_params(9, (4,), 5), np.zeros(9))


def test_inconsistent_layers_rejected():
    with pytest.raises(ValueError):
        MLPParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


# -- loss ----------------------------------------------------------------------------

def test_loss_zero_on_identity():
    Y = np.random.default_rng(0).dirichlet(np.ones(10), size=4)
    assert nn.loss(Y, Y) == 0.0


def test_loss_hand_example():
    Y = np.zeros((1, 500))
    Y[0, 0] = 1.0
    Yhat = np.zeros((1, 500))
    Yhat[0, :2] = 0.5
    assert nn.loss(Y, Yhat) == pytest.approx(1.5)


def test_loss_unchanged_by_duplicating_batch():
    rng = np.random.default_rng(1)
    Y, Yhat = rng.dirichlet(np.ones(6), size=5), rng.dirichlet(np.ones(6), size=5)
    assert nn.loss(np.vstack([Y, Y]), np.vstack([Yhat, Yhat])) == pytest.approx(nn.loss(Y, Yhat))


def test_max_subgradient_first_index_on_ties():
    Y = np.array([[0.5, 0.5, 0.0]])
    Yhat = np.array([[0.25, 0.75, 0.0]])
    g = nn.loss_grad(Y, Yhat)
    assert np.array_equal(g, [[-2.0, 1.0, 0.0]])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    params = small_params(4, dims=(2, 2, 2))   # 12 parameters
    X = rng.normal(size=(6, 2))
    Y = rng.dirichlet(np.ones(2), size=6)
    _, gw, gb = nn.loss_and_grads(params, X, Y)
    analytic = np.concatenate([g.ravel() for g in gw + gb])
    numeric = []
    eps = 1e-6
    for arr in params.weights + params.biases:
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = nn.loss(Y, nn.forward(params, X))
            flat[i] = old - eps
            down = nn.loss(Y, nn.forward(params, X))
            flat[i] = old
            numeric.append((up - down) / (2 * eps))
    numeric = np.array(numeric)
    assert analytic.size == 12
    scale = np.maximum(np.abs(numeric), np.abs(analytic)).max()
    assert np.max(np.abs(analytic - numeric)) / scale < 1e-4


def test_gradient_matches_finite_differences_wider():
    rng = np.random.default_rng(8)
    params = small_params(9, dims=(4, 6, 5, 7))
    for b in params.biases:
        b += rng.normal(scale=0.1, size=b.shape)
    X = rng.normal(size=(10, 4))
    Y = rng.dirichlet(np.ones(7), size=10)
    # finite differences are only meaningful away from ReLU kinks
    h = X
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ w + b
        assert np.abs(z).min() > 1e-4
        h = np.maximum(z, 0)
    _, gw, gb = nn.loss_and_grads(params, X, Y)
    eps = 1e-6
    worst = 0.0
    for arr, grad in zip(params.weights + params.biases, gw + gb):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = nn.loss(Y, nn.forward(params, X))
            flat[i] = old - eps
            down = nn.loss(Y, nn.forward(params, X))
            flat[i] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-3))
    assert worst < 1e-4


# -- training -------------------------------------------------------------------------

def test_single_instance_memorised():
    X = np.array([[0.0, 0.5, 1.0]])
    Y = np.zeros((1, 20))
    Y[0, 3] = 0.7
    Y[0, 4] = 0.3
    cfg = TrainConfig(batch=1, lr=3e-2, epochs=600, hidden=(16, 16), val_fraction=0.0, patience=600, plateau=0)
    res = nn.train(X, Y, cfg)
    assert res.history[-1]["train_loss"] < 0.02
    assert nn.sae(Y, nn.forward(res.params, X[0])[None, :]) < 0.02


def test_training_folds_standardisation():
    # raw features on very different scales still train, and the saved model consumes raw features
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.uniform(0, 1000, 400), rng.uniform(0, 0.001, 400)])
    k = (X[:, 0] > 500).astype(int)
    Y = np.eye(4)[k]
    res = nn.train(X, Y, TrainConfig(batch=32, lr=3e-3, epochs=40, hidden=(16,), seed=1))
    assert nn.sae(Y, nn.infer_batch(res.params, X)) < 0.2
    assert res.params.dtype == np.float32


def test_training_deterministic():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(64, 3)), rng.dirichlet(np.ones(5), size=64)
    cfg = TrainConfig(batch=16, epochs=3, hidden=(8,), seed=4)
    a, b = nn.train(X, Y, cfg), nn.train(X, Y, cfg)
    assert all(np.array_equal(u, v) for u, v in zip(a.params.weights, b.params.weights))


def test_early_stopping_and_history():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(64, 3)), rng.dirichlet(np.ones(5), size=64)
    seen = []
    res = nn.train(X, Y, TrainConfig(batch=16, lr=0.05, epochs=200, hidden=(8,), patience=3, plateau=0),
                   callback=seen.append)
    assert len(res.history) < 200
    assert len(res.history) - 1 - res.best_epoch == 3
    assert seen == res.history


def test_divergence_reported():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(32, 3)), rng.dirichlet(np.ones(5), size=32)
    Y[5, 0] = np.nan
    with pytest.raises(nn.TrainingDiverged, match="lr="):
        nn.train(X, Y, TrainConfig(batch=8, epochs=2, hidden=(4,), val_fraction=0.0))


def test_bad_config():
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_split_indices_partition():
    tr, te = nn.split_indices(100, 0.1, 3)
    assert len(te) == 10 and len(tr) == 90
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(100))


def test_moment_sweep_uses_shared_split():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(400, 4))
    Y = np.eye(3)[(base[:, 0] > 0).astype(int) + (base[:, 1] > 0).astype(int)]
    out = nn.moment_sweep(lambda n: base[:, :n], Y, [1, 2], TrainConfig(batch=32, lr=1e-2, epochs=60, hidden=(16,)))
    assert set(out) == {1, 2}
    # the second feature carries information the first lacks
    assert out[2] < out[1]


# -- persistence -----------------------------------------------------------------------

def test_model_round_trip(tmp_path):
    params = nn.init_params(9, (7, 11), 500, seed=2)
    path = tmp_path / "m.bin"
    nn.save_model(params, path)
    back = nn.load_model(path)
    assert back.layer_widths == params.layer_widths
    assert all(np.array_equal(a, b) for a, b in zip(back.weights + back.biases, params.weights + params.biases))
    raw = path.read_bytes()
    assert raw[:4] == nn.MODEL_MAGIC
    assert len(raw) == 4 + 10 + 4 * 3 + 4 * params.n_params


def test_model_file_rejects_garbage(tmp_path):
    params = nn.init_params(3, (4,), 5)
    path = tmp_path / "m.bin"
    nn.save_model(params, path)
    raw = path.read_bytes()
    (tmp_path / "bad_magic.bin").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "trailing.bin").write_bytes(raw + b"\0\0\0\0")
    (tmp_path / "version.bin").write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    for name in ("bad_magic.bin", "trailing.bin", "version.bin"):
        with pytest.raises(ValueError):
            nn.load_model(tmp_path / name)
