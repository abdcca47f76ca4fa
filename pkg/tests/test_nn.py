import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import REL_TOL, central_diff, rel_error
from pbcrl.nn import (
    AdamState,
    Network,
    NonFiniteError,
    adam_init,
    adam_step,
    load_checkpoint,
    net_backward,
    net_forward,
    net_init,
    save_checkpoint,
)


def test_init_shapes_and_xavier_bounds():
    net = net_init([5, 7, 3], seed=0)
    assert [w.shape for w in net.weights] == [(5, 7), (7, 3)]
    assert all(np.all(b == 0) for b in net.biases)
    assert np.all(np.abs(net.weights[0]) <= np.sqrt(6 / 12))
    assert net.n_params == 5 * 7 + 7 + 7 * 3 + 3


def test_init_is_deterministic_per_seed():
    a, b, c = net_init([4, 8, 1], 3), net_init([4, 8, 1], 3), net_init([4, 8, 1], 4)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())


@pytest.mark.parametrize("sizes", [[3], [3, 0, 1], [0, 2]])
def test_init_rejects_bad_layer_sizes(sizes):
    with pytest.raises(ValueError):
        net_init(sizes, 0)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        net_forward(net_init([3, 2], 0), np.zeros(4))


def test_forward_single_row_matches_batch():
    net = net_init([4, 6, 2], 1)
    x = np.random.default_rng(0).normal(size=(5, 4))
    batch = net_forward(net, x)
    for i in range(5):
        np.testing.assert_allclose(net_forward(net, x[i]), batch[i], rtol=1e-12, atol=1e-14)


def test_identity_network_backward_passes_gradient_through():
    net = Network([3, 3], [np.eye(3)], [np.zeros(3)])
    x = np.array([0.3, -1.0, 2.0])
    out, cache = net_forward(net, x, return_cache=True)
    np.testing.assert_array_equal(out, x)
    g = np.array([1.0, -2.0, 0.5])
    _, dx = net_backward(net, cache, g)
    np.testing.assert_array_equal(dx, g)


def test_backward_rejects_shape_mismatch():
    net = net_init([2, 3, 1], 0)
    _, cache = net_forward(net, np.zeros((4, 2)), return_cache=True)
    with pytest.raises(ValueError):
        net_backward(net, cache, np.zeros((4, 2)))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(activation, seed):
    rng = np.random.default_rng(seed)
    net = net_init([3, 5, 4, 2], seed, activation)
    net = net.with_flat(net.flat() + 0.1 * rng.normal(size=net.n_params))
    x = rng.normal(size=(6, 3))
    up = rng.normal(size=(6, 2))
    # relu: resample inputs until every hidden pre-activation is clear of the kink
    while activation == "relu":
        _, cache = net_forward(net, x, return_cache=True)
        if min(np.abs(z).min() for z in cache.pre[:-1]) > 1e-3:
            break
        x = rng.normal(size=(6, 3))

    def f(theta):
        return float(np.sum(net_forward(net.with_flat(theta), x) * up))

    _, cache = net_forward(net, x, return_cache=True)
    grads, dx = net_backward(net, cache, up)
    assert rel_error(grads.flat(), central_diff(f, net.flat())) < REL_TOL
    dx_fd = central_diff(lambda xx: float(np.sum(net_forward(net, xx) * up)), x)
    assert rel_error(dx, dx_fd) < REL_TOL


def test_adam_first_step_moves_each_parameter_by_lr():
    # bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
    net = net_init([2, 2], 0)
    grads = net_backward(net, net_forward(net, np.ones(2), return_cache=True)[1], np.array([1.0, -3.0]))[0]
    new, state = adam_step(net, grads, adam_init(net), 0.01)
    delta = new.flat() - net.flat()
    expected = -0.01 * np.sign(grads.flat())
    np.testing.assert_allclose(delta, expected, rtol=1e-6, atol=1e-12)
    assert state.step == 1


def test_adam_does_not_mutate_inputs():
    net = net_init([2, 3, 1], 0)
    before = net.flat().copy()
    state = adam_init(net)
    _, cache = net_forward(net, np.ones((2, 2)), return_cache=True)
    grads, _ = net_backward(net, cache, np.ones((2, 1)))
    adam_step(net, grads, state, 0.1)
    np.testing.assert_array_equal(net.flat(), before)
    assert state.step == 0 and np.all(state.m_w[0] == 0)


def test_adam_minimises_a_quadratic():
    net = Network([1, 1], [np.array([[3.0]])], [np.array([-2.0])])
    state = adam_init(net)
    x = np.array([[1.0], [2.0]])
    target = np.array([[0.5], [1.5]])  # w = 1, b = -0.5
    for _ in range(3000):
        out, cache = net_forward(net, x, return_cache=True)
        grads, _ = net_backward(net, cache, out - target)
        net, state = adam_step(net, grads, state, 0.01)
    np.testing.assert_allclose([net.weights[0][0, 0], net.biases[0][0]], [1.0, -0.5], atol=1e-3)


def test_adam_rejects_non_finite_gradients():
    net = net_init([2, 1], 0)
    _, cache = net_forward(net, np.ones(2), return_cache=True)
    grads, _ = net_backward(net, cache, np.array([np.nan]))
    with pytest.raises(NonFiniteError):
        adam_step(net, grads, adam_init(net), 0.1)


def test_adam_rejects_non_positive_lr():
    net = net_init([2, 1], 0)
    _, cache = net_forward(net, np.ones(2), return_cache=True)
    grads, _ = net_backward(net, cache, np.ones(1))
    with pytest.raises(ValueError):
        adam_step(net, grads, adam_init(net), 0.0)


def test_adam_state_copy_is_independent():
    st_ = adam_init(net_init([2, 2], 0))
    cp = st_.copy()
    cp.m_w[0][0, 0] = 5.0
    assert st_.m_w[0][0, 0] == 0.0
    assert isinstance(cp, AdamState)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    net = net_init([4, 6, 2], 7, "relu")
    path, sidecar = save_checkpoint(net, tmp_path / "net.bin", {"lr": 1e-3})
    loaded, meta = load_checkpoint(path)
    assert loaded.layer_sizes == net.layer_sizes and loaded.activation == "relu"
    assert np.array_equal(loaded.flat(), net.flat())
    assert meta["hyperparams"] == {"lr": 1e-3}
    assert sidecar.exists()


def test_checkpoint_layout_header(tmp_path):
    path, _ = save_checkpoint(net_init([2, 3], 0), tmp_path / "n")
    raw = path.read_bytes()
    assert raw[:4] == b"PBNN"
    assert np.frombuffer(raw[4:20], dtype="<u4").tolist() == [1, 2, 2, 3]
    assert len(raw) == 20 + 8 * (2 * 3 + 3)


def test_checkpoint_rejects_corruption(tmp_path):
    path, _ = save_checkpoint(net_init([2, 3], 0), tmp_path / "n")
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(path)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_output_layer_is_linear_in_scale(seed, c):
    # scaling the last layer scales the output: the output activation is the identity
    net = net_init([3, 4, 2], seed)
    x = np.random.default_rng(seed).normal(size=(2, 3))
    scaled = net.copy()
    scaled.weights[-1] = scaled.weights[-1] * c
    scaled.biases[-1] = scaled.biases[-1] * c
    np.testing.assert_allclose(net_forward(scaled, x), c * net_forward(net, x), atol=1e-12)
