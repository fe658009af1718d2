import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from upesi.nn import MLP, Adam, NonFiniteError, adam_step, load_mlp, loss_eval, mlp_gradient, save_mlp


def finite_difference_grad(net, x, y, h=1e-5):
    g = np.empty_like(net.params)
    for i in range(net.n_params):
        old = net.params[i]
        net.params[i] = old + h
        up = loss_eval(net.forward(x), y)
        net.params[i] = old - h
        down = loss_eval(net.forward(x), y)
        net.params[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def test_layer_widths_and_init_bounds():
    net = MLP([5, 128, 128, 128, 3], rng=0)
    assert len(net.weights) == 4
    for w, b in zip(net.weights, net.biases):
        bound = 1 / np.sqrt(w.shape[0])
        assert np.abs(w).max() <= bound and np.abs(b).max() <= bound
    assert net.n_params == 5 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 3 + 3


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_gradient_small_network(act):
    rng = np.random.default_rng(1)
    net = MLP([3, 6, 5, 2], hidden_activation=act, output_activation="tanh" if act == "tanh" else "identity", rng=rng)
    x, y = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))
    analytic = mlp_gradient(net, x, y)
    numeric = finite_difference_grad(net, x, y)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_input_gradient_matches_finite_difference():
    rng = np.random.default_rng(2)
    net = MLP([4, 8, 8, 3], "tanh", rng=rng)
    x = rng.normal(size=(5, 4))
    out, acts = net.forward_cache(x)
    w = rng.normal(size=out.shape)
    _, gx = net.backward(acts, w, want_input_grad=True, want_param_grad=False)
    h = 1e-6
    for i in range(5):
        for j in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += h
            xm[i, j] -= h
            num = (np.sum(w * net.forward(xp)) - np.sum(w * net.forward(xm))) / (2 * h)
            assert abs(num - gx[i, j]) < 1e-7


def test_zero_network_outputs_zero_and_tanh_bounded():
    net = MLP([3, 4, 2], "tanh", "tanh", zero=True)
    np.testing.assert_array_equal(net.forward(np.ones((2, 3))), 0.0)
    net = MLP([3, 4, 2], "tanh", "tanh", rng=0)
    net.params *= 100
    assert np.abs(net.forward(np.random.default_rng(0).normal(size=(50, 3)) * 100)).max() <= 1.0


def test_invalid_inputs_rejected():
    net = MLP([3, 4, 2], rng=0)
    with pytest.raises(ValueError):
        net.forward(np.ones(4))
    with pytest.raises(ValueError):
        mlp_gradient(net, np.zeros((0, 3)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        loss_eval(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        MLP([3, 0, 2])


def test_adam_first_step_moves_by_learning_rate():
    opt = Adam(3, learning_rate=1e-2)
    p = np.zeros(3)
    opt.step(p, np.array([5.0, -0.2, 1e-3]))
    # bias correction makes the first update lr * sign(g) (up to epsilon)
    np.testing.assert_allclose(p, [-1e-2, 1e-2, -1e-2], rtol=1e-4)


def test_adam_functional_form_does_not_mutate():
    opt = Adam(2)
    p = np.ones(2)
    p2, opt2 = adam_step(opt, p, np.array([1.0, 1.0]))
    assert opt.step_count == 0 and opt2.step_count == 1
    np.testing.assert_array_equal(p, 1.0)
    assert np.all(p2 < 1.0)


def test_adam_rejects_non_finite_gradient():
    opt = Adam(2)
    with pytest.raises(NonFiniteError, match="non-finite"):
        opt.step(np.zeros(2), np.array([np.nan, 1.0]))


def test_adam_reduces_regression_loss_hundredfold():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(256, 3))
    y = np.stack([np.sin(2 * x[:, 0]) + x[:, 1] * x[:, 2], np.cos(x[:, 1])], axis=1)
    net = MLP([3, 128, 128, 128, 2], rng=1)
    opt = Adam(net.n_params, 1e-3)
    first = loss_eval(net.forward(x), y)
    for _ in range(2000):
        opt.step(net.params, mlp_gradient(net, x, y))
    assert loss_eval(net.forward(x), y) * 100 <= first


@settings(max_examples=10, deadline=None)
@given(sizes=st.lists(st.integers(1, 9), min_size=2, max_size=5), seed=st.integers(0, 1000),
       dtype=st.sampled_from(["float64", "float32"]))
def test_checkpoint_roundtrip_bit_exact(tmp_path_factory, sizes, seed, dtype):
    net = MLP(sizes, "tanh", "identity", rng=seed, dtype=dtype)
    path = tmp_path_factory.mktemp("ck") / "n.mlp"
    save_mlp(path, net, {"tag": seed})
    back, meta = load_mlp(path, with_metadata=True)
    assert meta == {"tag": seed}
    assert back.params.tobytes() == net.params.tobytes()
    assert back.layer_sizes == net.layer_sizes and back.dtype == net.dtype
    x = np.random.default_rng(seed).normal(size=(3, sizes[0]))
    assert back.forward(x).tobytes() == net.forward(x).tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.mlp"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_mlp(p)
