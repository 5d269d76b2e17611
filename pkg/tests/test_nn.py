import numpy as np
import pytest

from dribblesim import rng as crng
from dribblesim.nn import (
    Adam,
    DenseNet,
    GaussianPolicyHead,
    ShapeMismatch,
    load_checkpoint,
    save_checkpoint,
)


def fd_check(net, x, gout, eps=1e-6, samples=40):
    """Central finite differences on a subsample of every parameter array."""
    out, cache = net.forward(x, cache=True)
    grads, grad_in = net.backward(cache, gout)

    def loss():
        return float((net.forward(x).astype(np.float64) * gout).sum())

    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        fp, fg = p.ravel(), g.ravel()
        step = max(1, fp.size // samples)
        for idx in range(0, fp.size, step):
            old = fp[idx]
            fp[idx] = old + eps
            lp = loss()
            fp[idx] = old - eps
            lm = loss()
            fp[idx] = old
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - fg[idx]) / max(abs(fd), abs(fg[idx]), 1e-6))
    return worst, grad_in


# ------------------------------------------------------------------ forward
def test_zero_weights_output_equals_bias():
    net = DenseNet([4, 3], dtype=np.float64)
    net.weights[0][:] = 0.0
    net.biases[0][:] = [1.0, -2.0, 0.5]
    out = net.forward(np.random.default_rng(0).normal(size=(6, 4)))
    assert np.allclose(out, [1.0, -2.0, 0.5])


def test_identity_linear_layer_reproduces_input():
    net = DenseNet([3, 3], dtype=np.float64)
    net.weights[0][:] = np.eye(3)
    net.biases[0][:] = 0.0
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.allclose(net.forward(x), x)


def test_forward_matches_manual_matmul_oracle():
    net = DenseNet([5, 7, 2], dtype=np.float64, init_key=4)
    x = np.random.default_rng(2).normal(size=(9, 5))
    z1 = x @ net.weights[0] + net.biases[0]
    h1 = np.where(z1 > 0, z1, np.expm1(np.minimum(z1, 0)))
    expected = h1 @ net.weights[1] + net.biases[1]
    assert np.abs(net.forward(x) - expected).max() < 1e-12


def test_forward_shape_mismatch():
    net = DenseNet([5, 2])
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((3, 4)))


def test_batch_row_equals_single_forward():
    net = DenseNet([6, 8, 3], dtype=np.float64, init_key=1)
    x = np.random.default_rng(3).normal(size=(10, 6))
    full = net.forward(x)
    for i in range(10):
        single = net.forward(x[i:i + 1])
        assert np.abs(full[i] - single[0]).max() < 1e-12


# ----------------------------------------------------------------- backward
def test_gradient_of_constant_loss_is_zero():
    net = DenseNet([4, 5, 2], dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(3, 4))
    _, cache = net.forward(x, cache=True)
    grads, gin = net.backward(cache, np.zeros((3, 2)))
    assert all(np.abs(g).max() == 0.0 for g in grads)
    assert np.abs(gin).max() == 0.0


def test_backward_linear_in_output_gradient():
    net = DenseNet([4, 5, 2], dtype=np.float64, init_key=2)
    x = np.random.default_rng(1).normal(size=(3, 4))
    g1 = np.random.default_rng(2).normal(size=(3, 2))
    _, cache = net.forward(x, cache=True)
    a, _ = net.backward(cache, g1)
    b, _ = net.backward(cache, 2.0 * g1)
    for ga, gb in zip(a, b):
        assert np.abs(2.0 * ga - gb).max() < 1e-9


def test_gradcheck_small_random_nets():
    rng = np.random.default_rng(7)
    for trial in range(4):
        sizes = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(2, 5)))]
        net = DenseNet(sizes, dtype=np.float64, init_key=trial, out_gain=0.7)
        x = rng.normal(size=(4, sizes[0]))
        gout = rng.normal(size=(4, sizes[-1]))
        worst, _ = fd_check(net, x, gout, eps=1e-6)
        assert worst < 1e-4


def test_gradcheck_input_gradient():
    net = DenseNet([5, 6, 3], dtype=np.float64, init_key=9, out_gain=0.5)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5))
    gout = rng.normal(size=(2, 3))
    _, cache = net.forward(x, cache=True)
    _, gin = net.backward(cache, gout)

    def loss(xv):
        return float((net.forward(xv) * gout).sum())

    eps = 1e-6
    for idx in range(x.size):
        flat = x.ravel()
        old = flat[idx]
        flat[idx] = old + eps
        lp = loss(x)
        flat[idx] = old - eps
        lm = loss(x)
        flat[idx] = old
        fd = (lp - lm) / (2 * eps)
        assert abs(fd - gin.ravel()[idx]) < 1e-5 * max(1.0, abs(fd))


# ------------------------------------------------------------ gaussian head
def test_std_to_zero_limit_action_equals_mean():
    head = GaussianPolicyHead(3, init_log_std=-40.0, dtype=np.float64)
    mean = np.array([[0.5, -0.2, 1.0]])
    a, _, _ = head.sample(mean, np.array([[1.0, 1.0, 1.0]]))
    assert np.abs(a - mean).max() < 1e-12


def test_entropy_closed_form():
    head = GaussianPolicyHead(12, init_log_std=-0.5, dtype=np.float64)
    expected = sum(0.5 * np.log(2 * np.pi * np.e * np.exp(2 * ls))
                   for ls in head.log_std)
    assert abs(head.entropy() - expected) < 1e-12


def test_sample_moments_match_parameters():
    head = GaussianPolicyHead(12, init_log_std=-0.5, dtype=np.float64)
    n = 1_000_000 // 12
    noise = crng.keyed_normal(0, 77, lanes=n * 12).reshape(n, 12)
    mean = np.full((n, 12), 0.25)
    a, _, _ = head.sample(mean, noise)
    assert np.abs(a.mean(axis=0) - 0.25).max() < 0.25 * 0.01 + 0.003
    assert np.abs(a.std(axis=0) - np.exp(-0.5)).max() / np.exp(-0.5) < 0.01


def test_log_prob_matches_scipy_formula():
    head = GaussianPolicyHead(4, init_log_std=-0.3, dtype=np.float64)
    mean = np.array([[0.1, 0.2, -0.1, 0.0]])
    action = np.array([[0.3, -0.2, 0.05, 0.4]])
    std = np.exp(-0.3)
    expected = (-0.5 * ((action - mean) / std) ** 2
                - np.log(std) - 0.5 * np.log(2 * np.pi)).sum()
    assert abs(head.log_prob(mean, action)[0] - expected) < 1e-12


def test_log_prob_grads_finite_difference():
    head = GaussianPolicyHead(3, init_log_std=-0.4, dtype=np.float64)
    mean = np.array([[0.1, -0.2, 0.3]])
    action = np.array([[0.5, 0.0, -0.1]])
    d_mean, d_logstd = head.log_prob_grads(mean, action)
    eps = 1e-7
    for j in range(3):
        m2 = mean.copy()
        m2[0, j] += eps
        fd = (head.log_prob(m2, action)[0] - head.log_prob(mean, action)[0]) / eps
        assert abs(fd - d_mean[0, j]) < 1e-5
    for j in range(3):
        lp0 = head.log_prob(mean, action)[0]
        head.log_std[j] += eps
        fd = (head.log_prob(mean, action)[0] - lp0) / eps
        head.log_std[j] -= eps
        assert abs(fd - d_logstd[0, j]) < 1e-5


# --------------------------------------------------------------------- adam
def test_adam_zero_gradient_no_change():
    p = [np.array([1.0, -2.0])]
    ad = Adam(p, lr=1e-3)
    ad.step(p, [np.zeros(2)])
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_hand_computed():
    # bias correction makes the first step -lr * g / (|g| + eps)
    p = [np.array([1.0])]
    ad = Adam(p, lr=1e-3, eps=1e-8)
    ad.step(p, [np.array([0.5])])
    expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)
    assert abs(p[0][0] - expected) < 1e-15


def test_adam_two_runs_identical():
    def run():
        net = DenseNet([4, 3], dtype=np.float64, init_key=5)
        ad = Adam(net.parameters(), lr=1e-3)
        x = np.linspace(-1, 1, 8).reshape(2, 4)
        for _ in range(20):
            out, cache = net.forward(x, cache=True)
            grads, _ = net.backward(cache, out - 1.0)
            ad.step(net.parameters(), grads)
        return [p.copy() for p in net.parameters()]

    a, b = run(), run()
    for pa, pb in zip(a, b):
        assert np.array_equal(pa, pb)


def test_adam_order_invariant_when_grads_summed_first():
    g1 = [np.array([0.3, -0.2])]
    g2 = [np.array([-0.1, 0.6])]
    pa = [np.array([1.0, 1.0])]
    pb = [np.array([1.0, 1.0])]
    Adam(pa, lr=1e-2).step(pa, [g1[0] + g2[0]])
    Adam(pb, lr=1e-2).step(pb, [g2[0] + g1[0]])
    assert np.array_equal(pa[0], pb[0])


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    ad = Adam(p)
    with pytest.raises(ShapeMismatch):
        ad.step(p, [np.zeros(4)])


# --------------------------------------------------------------- checkpoint
def test_checkpoint_roundtrip(tmp_path):
    net = DenseNet([6, 5, 2], init_key=8)
    path = str(tmp_path / "net.bin")
    save_checkpoint(path, net.state_arrays("net"), {"config_hash": "abc123"})
    arrays, meta = load_checkpoint(path)
    assert meta["config_hash"] == "abc123"
    assert meta["shapes"]["net.w0"] == [6, 5]
    net2 = DenseNet([6, 5, 2], init_key=99)
    net2.load_state_arrays("net", arrays)
    x = np.random.default_rng(0).normal(size=(3, 6)).astype(np.float32)
    assert np.array_equal(net.forward(x), net2.forward(x))
