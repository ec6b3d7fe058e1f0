import numpy as np
import pytest

import abnedit.autodiff as ad
from abnedit.autodiff import Tensor

from oracles import conv_forward_ref, gap_ref, l2_ref, softmax_ce_ref, softmax_ref

SEEDS = range(20)


def _t(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# ---------------------------------------------------------------------------
# forward oracles

@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 4))
    pad = int(rng.integers(0, 3))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h = int(rng.integers(max(1, kh - 2 * pad), 8))
    w = int(rng.integers(max(1, kw - 2 * pad), 8))
    if h + 2 * pad < kh or w + 2 * pad < kw:
        h, w = kh, kw
    x = _t(rng, 2, 3, h, w)
    wt = _t(rng, 4, 3, kh, kw)
    b = _t(rng, 4)
    out = ad.conv2d(x, wt, b, stride=stride, pad=pad)
    ref = conv_forward_ref(x.data, wt.data, b.data, stride, pad)
    assert out.data.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-6


def test_conv2d_shape_law():
    rng = np.random.default_rng(0)
    for stride in (1, 2, 3):
        for pad in (0, 1, 2):
            for k in (1, 2, 3, 5):
                h = 11
                x = _t(rng, 1, 1, h, h, grad=False)
                wt = _t(rng, 2, 1, k, k, grad=False)
                b = Tensor(np.zeros(2))
                out = ad.conv2d(x, wt, b, stride=stride, pad=pad)
                expect = (h + 2 * pad - k) // stride + 1
                assert out.shape == (1, 2, expect, expect)


@pytest.mark.parametrize("seed", SEEDS)
def test_gap_linear_softmax_l2_match_oracles(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 5, 4, 6, grad=False)
    assert np.max(np.abs(ad.global_average_pool(x).data - gap_ref(x.data))) < 1e-6

    a = _t(rng, 4, 7, grad=False)
    w = _t(rng, 7, 3, grad=False)
    b = _t(rng, 3, grad=False)
    ref = a.data.astype(np.float64) @ w.data.astype(np.float64) + b.data
    assert np.max(np.abs(ad.linear(a, w, b).data - ref)) < 1e-6

    logits = _t(rng, 5, 4, grad=False)
    labels = rng.integers(0, 4, 5)
    got = float(ad.softmax_cross_entropy(logits, labels).data)
    assert abs(got - softmax_ce_ref(logits.data, labels)) < 1e-6
    assert np.max(np.abs(ad.softmax(logits.data) - softmax_ref(logits.data))) < 1e-12

    m1 = _t(rng, 3, 1, 4, 4, grad=False)
    m2 = _t(rng, 3, 1, 4, 4, grad=False)
    assert abs(float(ad.l2_norm_loss(m1, m2).data) - l2_ref(m1.data, m2.data)) < 1e-6


def test_softmax_cross_entropy_properties():
    rng = np.random.default_rng(1)
    for c in (2, 3, 7):
        uniform = Tensor(np.full((4, c), 0.37))
        loss = ad.softmax_cross_entropy(uniform, np.arange(4) % c)
        assert float(loss.data) == float(np.log(np.float64(c)))
    for seed in range(10):
        logits = Tensor(np.random.default_rng(seed).standard_normal((6, 5)))
        labels = np.random.default_rng(seed + 1).integers(0, 5, 6)
        assert float(ad.softmax_cross_entropy(logits, labels).data) >= 0.0


def test_l2_norm_loss_identity_and_symmetry():
    rng = np.random.default_rng(2)
    a = Tensor(rng.standard_normal((3, 1, 5, 5)))
    b = Tensor(rng.standard_normal((3, 1, 5, 5)))
    assert float(ad.l2_norm_loss(a, a).data) == 0.0
    assert float(ad.l2_norm_loss(a, b).data) == pytest.approx(
        float(ad.l2_norm_loss(b, a).data), abs=0)
    # rank 2 = one sample; rank 3 = batch of norms averaged
    flat = Tensor(rng.standard_normal((4, 4)))
    zero = Tensor(np.zeros((4, 4)))
    assert float(ad.l2_norm_loss(flat, zero).data) == pytest.approx(
        float(np.linalg.norm(flat.data)), rel=1e-6)


# ---------------------------------------------------------------------------
# gradient checks, one per primitive op, 20 seeds each

@pytest.mark.parametrize("seed", SEEDS)
def test_grad_add_mul_broadcast(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 3, 4)
    b = _t(rng, 1, 4)  # broadcasts over rows
    s = _t(rng)
    err = ad.gradient_check(lambda a, b, s: ad.tsum(ad.mul(ad.add(a, b), s)),
                            [a, b, s])
    assert err <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_relu_sigmoid(seed):
    rng = np.random.default_rng(seed)
    # keep entries away from relu's kink at 0 so the FD probe is valid
    data = rng.standard_normal((4, 5))
    data[np.abs(data) < 1e-2] += 0.1
    x = Tensor(data, requires_grad=True)
    assert ad.gradient_check(lambda x: ad.tsum(ad.relu(x)), [x]) <= 1e-4
    y = _t(rng, 4, 5)
    assert ad.gradient_check(lambda y: ad.tsum(ad.sigmoid(y)), [y]) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = _t(rng, 2, 2, 5, 5)
    w = _t(rng, 3, 2, 3, 3)
    b = _t(rng, 3)
    err = ad.gradient_check(
        lambda x, w, b: ad.tsum(ad.conv2d(x, w, b, stride=stride, pad=pad)),
        [x, w, b])
    assert err <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_gap_linear(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 4, 4)
    assert ad.gradient_check(lambda x: ad.tsum(ad.global_average_pool(x)), [x]) <= 1e-4
    a = _t(rng, 3, 4)
    w = _t(rng, 4, 2)
    b = _t(rng, 2)
    assert ad.gradient_check(lambda a, w, b: ad.tsum(ad.linear(a, w, b)),
                             [a, w, b]) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_softmax_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    logits = _t(rng, 4, 5)
    labels = rng.integers(0, 5, 4)
    assert ad.gradient_check(
        lambda z: ad.softmax_cross_entropy(z, labels), [logits]) <= 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_l2_norm_and_take_rows(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 3, 1, 3, 3)
    b = _t(rng, 3, 1, 3, 3)
    assert ad.gradient_check(lambda a, b: ad.l2_norm_loss(a, b), [a, b]) <= 1e-4
    x = _t(rng, 5, 3)
    idx = rng.integers(0, 5, 4)  # repeats allowed: backward must scatter-add
    assert ad.gradient_check(
        lambda x: ad.tsum(ad.take_rows(x, idx)), [x]) <= 1e-4


def test_grad_reused_node_diamond():
    # y = sum(a*a) through a shared node: grad must be 2a, not a
    a = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float64), requires_grad=True)
    y = ad.tsum(ad.mul(a, a))
    ad.backward(y)
    assert np.allclose(a.grad, 2 * a.data, atol=1e-12)


# ---------------------------------------------------------------------------
# graph mechanics

def test_no_grad_builds_no_graph():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y._backward is None
    z = ad.mul(x, x)
    assert z.requires_grad


def test_grad_accumulates_across_backward_calls():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    for _ in range(2):
        ad.backward(ad.tsum(ad.mul(x, x)))
    assert np.allclose(x.grad, 4 * x.data)
    x.zero_grad()
    assert x.grad is None


def test_dtype_rules():
    assert Tensor(np.zeros(3, dtype=np.int64)).dtype == np.float32
    assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
    assert Tensor(np.zeros(3, dtype=np.float32)).dtype == np.float32


def test_sgd_momentum_oracle():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = ad.OptimizerState.for_params([p], learning_rate=0.1, momentum=0.5)
    p.grad = np.array([1.0, -1.0])
    ad.sgd_step([p], state)
    assert np.allclose(p.data, [0.9, 2.1]) and p.grad is None
    p.grad = np.array([1.0, -1.0])
    ad.sgd_step([p], state)
    # v2 = 0.5*(-0.1*g) - 0.1*g = -0.15*g
    assert np.allclose(p.data, [0.75, 2.25])


def test_validation_errors():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))  # non-scalar loss
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))),
                  Tensor(np.zeros(1)))  # channel mismatch
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))),
                  Tensor(np.zeros(1)))  # kernel larger than padded input
    with pytest.raises(ValueError):
        ad.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])  # label range
    with pytest.raises(ValueError):
        ad.l2_norm_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ValueError):
        ad.OptimizerState.for_params([x], learning_rate=0.0)
    with pytest.raises(ValueError):
        ad.OptimizerState.for_params([x], learning_rate=0.1, momentum=1.0)
    state = ad.OptimizerState.for_params([x], learning_rate=0.1)
    with pytest.raises(ValueError):
        ad.sgd_step([x], state)  # no gradient present
