import numpy as np
import pytest

from mcd_ood import autodiff as ad
from mcd_ood.errors import ContractError, DimensionError

from conftest import check_grad

CONFIGS = range(10)


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-30) * gap * 10, x)


def _weighted(out, w):
    # sum(out * w) makes any tensor a scalar with a non-trivial upstream gradient
    return ad.sum(ad.mul(out, ad.Tensor(w)))


# -- forward examples ------------------------------------------------------


def test_matmul_examples():
    eye = ad.tensor([[1, 0], [0, 1]])
    b = ad.tensor([[3, 4], [5, 6]])
    np.testing.assert_array_equal(ad.matmul(eye, b).data, [[3, 4], [5, 6]])
    np.testing.assert_array_equal((ad.tensor([[1, 2]]) @ ad.tensor([[3], [4]])).data, [[11]])


def test_conv2d_counts_padded_overlaps():
    out = ad.conv2d(ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv2d_zero_kernel(rng):
    out = ad.conv2d(ad.Tensor(rng.standard_normal((2, 3, 4, 5))), ad.Tensor(np.zeros((2, 3, 3, 3))))
    assert out.shape == (2, 2, 4, 5)
    assert not out.data.any()


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 2, 4, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((2, 3, 4, 5))
    for n in range(2):
        for o in range(3):
            for i in range(4):
                for j in range(5):
                    want[n, o, i, j] = np.sum(pad[n, :, i:i + 3, j:j + 3] * k[o])
    np.testing.assert_allclose(ad.conv2d(ad.Tensor(x), ad.Tensor(k)).data, want, atol=1e-12)


def test_relu_and_pool_examples():
    np.testing.assert_array_equal(ad.relu(ad.tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert ad.avgpool2d(ad.tensor([[[[1, 3], [5, 7]]]])).data.item() == 4.0
    # odd sizes drop the trailing row/column
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    np.testing.assert_array_equal(ad.avgpool2d(ad.Tensor(x)).data[0, 0], [[3, 5], [13, 15]])
    np.testing.assert_allclose(ad.global_avgpool(ad.Tensor(x)).data, [[12.0]])


def test_relu_subgradient_zero_at_zero():
    x = ad.Tensor(np.array([-1.0, 0.0, 1.0]), requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(ad.tensor([[0, 0, 0, 0]])).data, [[0.25] * 4], atol=1e-15)
    for c in (-50.0, 0.0, 3.7, 800.0):
        np.testing.assert_allclose(ad.softmax(ad.tensor([[c, c + np.log(3)]])).data, [[0.25, 0.75]], atol=1e-12)


def test_log_softmax_is_log_of_softmax(rng):
    z = ad.Tensor(rng.standard_normal((5, 7)) * 10)
    np.testing.assert_allclose(ad.log_softmax(z).data, np.log(ad.softmax(z).data), atol=1e-12)


def test_backward_examples():
    x = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))
    s = ad.Tensor(np.array(3.0), requires_grad=True)
    (s * s).backward()
    assert s.grad == 6.0


def test_shared_node_gradients_accumulate():
    # y = x*x + x uses x three times: dy/dx = 2x + 1
    x = ad.Tensor(np.array([2.0, -0.5]), requires_grad=True)
    h = x * x
    ad.sum(h + x + h * 0.0).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_leaf_grads_accumulate_until_zeroed():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = ad.SgdOptimizer([x], 0.1)
    for _ in range(2):
        ad.sum(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    opt.zero_grads()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_intermediates_hold_no_grad():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    mid = x * 2.0
    ad.sum(mid).backward()
    assert mid.grad is None
    assert not mid.is_leaf


def test_topological_order_parents_first():
    a = ad.Tensor(np.ones(2), requires_grad=True)
    b = ad.relu(a)
    c = ad.add(b, a)
    d = ad.sum(ad.mul(c, b))
    order = ad.graph_nodes(d)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    assert order[-1] is d and len(order) == 5


def test_deep_chain_does_not_recurse():
    x = ad.Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    ad.sum(y).backward()
    assert x.grad[0] == 1.0


def test_constants_get_no_gradient():
    c = ad.Tensor(np.ones(2))
    x = ad.Tensor(np.ones(2), requires_grad=True)
    ad.sum(c * x).backward()
    assert c.grad is None


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_shape_errors():
    with pytest.raises(DimensionError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.ones((1, 2, 4, 4))), ad.Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.ones((1, 1, 4, 4))), ad.Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(DimensionError):
        ad.add_bias(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        ad.avgpool2d(ad.Tensor(np.ones((1, 1, 1, 3))))


def test_log_rejects_nonpositive():
    with pytest.raises(ContractError):
        ad.log(ad.tensor([0.0, 1.0]))
    assert np.isfinite(ad.log(ad.tensor([0.0]), eps=1e-12).data).all()


# -- optimizer -----------------------------------------------------------------


def test_sgd_step_arithmetic():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    p.grad[...] = 0.5
    ad.SgdOptimizer([p], 0.1).step()
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_grad_and_zero_lr_leave_params(rng):
    p = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    before = p.data.copy()
    ad.SgdOptimizer([p], 0.1).step()
    np.testing.assert_array_equal(p.data, before)
    p.grad[...] = 1.0
    ad.SgdOptimizer([p], 0.0).step()
    np.testing.assert_array_equal(p.data, before)
    with pytest.raises(ContractError):
        ad.SgdOptimizer([p], -0.1)


def test_sgd_decreases_convex_quadratic(rng):
    a = rng.standard_normal((4, 4))
    q = a @ a.T + np.eye(4)
    x = ad.Tensor(rng.standard_normal((4, 1)), requires_grad=True)

    def loss():
        return ad.sum(ad.mul(x, ad.matmul(ad.Tensor(q), x)))

    before = loss().item()
    loss().backward()
    ad.SgdOptimizer([x], 0.05).step()
    assert loss().item() < before


def test_weight_decay_adds_shrinkage():
    p = ad.Tensor(np.array([2.0]), requires_grad=True)
    ad.SgdOptimizer([p], 0.1, weight_decay=0.5).step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


# -- finite-difference checks: 10 random configurations per op -------------------

ELEMENTWISE = {
    "add": (lambda a, b: ad.add(a, b), 2),
    "sub": (lambda a, b: ad.sub(a, b), 2),
    "mul": (lambda a, b: ad.mul(a, b), 2),
    "relu": (lambda a: ad.relu(a), 1),
    "log": (lambda a: ad.log(ad.mul(a, a), 1e-3), 1),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
@pytest.mark.parametrize("cfg", CONFIGS)
def test_fd_elementwise(name, cfg):
    op, arity = ELEMENTWISE[name]
    rng = np.random.default_rng([cfg, 7])
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    arrays = [_away_from_zero(rng, shape) for _ in range(arity)]
    w = rng.standard_normal(shape)
    check_grad(lambda *ts: _weighted(op(*ts), w), arrays, 1e-6)


def _shapes(rng):
    n, d, k = (int(v) for v in rng.integers(1, 6, 3))
    return n, d, k


@pytest.mark.parametrize("cfg", CONFIGS)
def test_fd_matmul_and_bias(cfg):
    rng = np.random.default_rng([cfg, 11])
    n, d, k = _shapes(rng)
    a, b, bias = rng.standard_normal((n, d)), rng.standard_normal((d, k)), rng.standard_normal(k)
    w = rng.standard_normal((n, k))
    check_grad(lambda x, y, c: _weighted(ad.add_bias(ad.matmul(x, y), c), w), [a, b, bias], 1e-6)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_fd_reductions_and_pick(cfg):
    rng = np.random.default_rng([cfg, 13])
    n, _, k = _shapes(rng)
    k = max(k, 2)
    x = rng.standard_normal((n, k))
    idx = rng.integers(0, k, n)
    w_rows, w_cols = rng.standard_normal(n), rng.standard_normal(k)
    check_grad(lambda t: ad.sum(t), [x], 1e-6)
    check_grad(lambda t: ad.mean(ad.mul(t, t)), [x], 1e-6)
    check_grad(lambda t: _weighted(ad.sum(t, axis=1), w_rows), [x], 1e-6)
    check_grad(lambda t: _weighted(ad.sum(t, axis=0), w_cols), [x], 1e-6)
    check_grad(lambda t: _weighted(ad.mean(t, axis=1), w_rows), [x], 1e-6)
    check_grad(lambda t: _weighted(ad.pick(t, idx), w_rows), [x], 1e-6)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_fd_softmax_family(cfg):
    rng = np.random.default_rng([cfg, 17])
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    z = rng.standard_normal((n, k)) * 2
    w = rng.standard_normal((n, k))
    check_grad(lambda t: _weighted(ad.softmax(t), w), [z], 1e-6)
    check_grad(lambda t: _weighted(ad.log_softmax(t), w), [z], 1e-6)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_fd_conv_pool(cfg):
    rng = np.random.default_rng([cfg, 19])
    n, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w_ = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x = rng.standard_normal((n, cin, h, w_))
    k = rng.standard_normal((cout, cin, 3, 3))
    b = rng.standard_normal(cout)
    wc = rng.standard_normal((n, cout, h, w_))
    wp = rng.standard_normal((n, cin, h // 2, w_ // 2))
    wg = rng.standard_normal((n, cin))
    wf = rng.standard_normal((n, cin * h * w_))
    check_grad(lambda t, u, c: _weighted(ad.add_bias(ad.conv2d(t, u), c), wc), [x, k, b], 1e-5)
    check_grad(lambda t: _weighted(ad.avgpool2d(t), wp), [x], 1e-6)
    check_grad(lambda t: _weighted(ad.global_avgpool(t), wg), [x], 1e-6)
    check_grad(lambda t: _weighted(ad.flatten(t), wf), [x], 1e-6)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_fd_composite_mlp(cfg):
    rng = np.random.default_rng([cfg, 23])
    x = ad.Tensor(rng.standard_normal((6, 3)))
    y = rng.integers(0, 4, 6)
    arrays = [rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal((5, 4)), rng.standard_normal(4)]

    def loss(w1, b1, w2, b2):
        h = ad.relu(ad.add_bias(ad.matmul(x, w1), b1))
        return ad.mul(ad.mean(ad.pick(ad.log_softmax(ad.add_bias(ad.matmul(h, w2), b2)), y)), -1.0)

    check_grad(loss, arrays, 1e-4)
