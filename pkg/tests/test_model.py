import numpy as np
import pytest

from mcd_ood import autodiff as ad
from mcd_ood.data import gen_gaussian_blobs
from mcd_ood.errors import ConfigError, DimensionError
from mcd_ood.model import TwoHeadConfig, init_model
from mcd_ood.trainer import TrainConfig, pretrain

from conftest import check_grad

MLP = TwoHeadConfig(extractor_spec=(16, 8), num_classes=4)


def test_parameter_count_by_hand():
    assert init_model(MLP).num_parameters() == (2 * 16 + 16) + (16 * 8 + 8) + 2 * (8 * 4 + 4) == 256


def test_parameter_groups_partition():
    m = init_model(MLP)
    groups = m.parameter_groups()
    ids = [id(t) for g in groups.values() for t in g]
    assert len(ids) == len(set(ids))
    assert set(ids) == {id(t) for t in m.parameters()}


def test_init_deterministic_and_heads_differ():
    a, b = init_model(MLP), init_model(MLP)
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    assert np.any(a.head1["w"].data != a.head2["w"].data)


def test_config_validation():
    with pytest.raises(ConfigError, match="seed_head1"):
        TwoHeadConfig(seed_head1=5, seed_head2=5)
    with pytest.raises(ConfigError, match="layer 1"):
        TwoHeadConfig(extractor_spec=(4, 0))
    with pytest.raises(ConfigError):
        TwoHeadConfig(num_classes=1)
    with pytest.raises(ConfigError):
        TwoHeadConfig(input_kind="image", input_shape=(2,))


def test_config_dict_round_trip():
    cfg = TwoHeadConfig(input_kind="image", input_shape=(1, 6, 6), extractor_spec=(3, 4), seed_head2=9)
    assert TwoHeadConfig.from_dict(cfg.to_dict()) == cfg


def test_fresh_model_near_chance():
    data = gen_gaussian_blobs(4, 250, seed=0)
    accs = []
    for s in range(8):
        m = init_model(TwoHeadConfig(seed_extractor=10 + s, seed_head1=100 + s, seed_head2=200 + s))
        p1, p2 = m.predict_proba(data.x)
        accs += [np.mean(p1.argmax(1) == data.y), np.mean(p2.argmax(1) == data.y)]
    assert abs(np.mean(accs) - 0.25) <= 0.15


def test_zero_heads_give_uniform():
    m = init_model(MLP)
    for head in (m.head1, m.head2):
        head["w"].data[...] = 0.0
    l1, l2 = m.forward(np.random.default_rng(0).standard_normal((5, 2)))
    assert not l1.data.any() and not l2.data.any()
    p1, p2 = m.probabilities(np.ones((3, 2)))
    np.testing.assert_allclose(p1.data, 0.25)
    np.testing.assert_allclose(p2.data, 0.25)


def test_batched_duplicates_match_single():
    m = init_model(MLP)
    x = np.array([[0.3, -1.2]])
    single = m.forward(x)[0].data
    batch = m.forward(np.repeat(x, 4, axis=0))[0].data
    for row in batch:
        np.testing.assert_array_equal(row, batch[0])
    # BLAS may round a 1-row product differently from a 4-row one
    np.testing.assert_allclose(batch[0], single[0], rtol=1e-14, atol=1e-15)


def test_probabilities_rows_sum_to_one():
    m = init_model(MLP)
    p1, p2 = m.probabilities(np.random.default_rng(1).standard_normal((7, 2)) * 5)
    np.testing.assert_allclose(p1.data.sum(1), 1, atol=1e-12)
    np.testing.assert_allclose(p2.data.sum(1), 1, atol=1e-12)


def test_extractor_gradient_is_sum_of_head_gradients():
    m = init_model(MLP)
    x = np.random.default_rng(2).standard_normal((5, 2))

    def grads(which):
        for p in m.parameters():
            p.grad[...] = 0.0
        l1, l2 = m.forward(x)
        parts = {"1": [l1], "2": [l2], "both": [l1, l2]}[which]
        total = ad.sum(parts[0]) if len(parts) == 1 else ad.add(ad.sum(parts[0]), ad.sum(parts[1]))
        total.backward()
        return [t.grad.copy() for t in m.parameter_groups()["extractor"]]

    g1, g2, both = grads("1"), grads("2"), grads("both")
    for a, b, c in zip(g1, g2, both):
        np.testing.assert_allclose(a + b, c, atol=1e-12)


def test_full_model_gradient_fd():
    cfg = TwoHeadConfig(extractor_spec=(5, 4), num_classes=3)
    m = init_model(cfg)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2))
    y = np.array([0, 2, 1, 2])
    # random biases keep every pre-activation off the relu kink, where differences are meaningless
    arrays = [t.data + (0.3 * rng.standard_normal(t.shape) if t.data.ndim == 1 else 0) for t in m.parameters()]

    def loss(*ts):
        for (name, p), t in zip(m.named_parameters(), ts):
            group, key = name.split(".")
            getattr(m, group)[key] = t
        l1, l2 = m.forward(x)
        out = ad.add(ad.mean(ad.pick(ad.log_softmax(l1), y)), ad.mean(ad.pick(ad.log_softmax(l2), y)))
        return ad.mul(out, -1.0)

    check_grad(loss, arrays, 1e-4)


def test_image_model_shapes_and_gradient():
    cfg = TwoHeadConfig(input_kind="image", input_shape=(1, 5, 5), extractor_spec=(2, 3), num_classes=3)
    m = init_model(cfg)
    rng = np.random.default_rng(4)
    x = rng.random((2, 1, 5, 5))
    l1, l2 = m.forward(x)
    assert l1.shape == l2.shape == (2, 3)
    arrays = [t.data + (0.3 * rng.standard_normal(t.shape) if t.data.ndim == 1 else 0) for t in m.parameters()]

    def loss(*ts):
        for (name, _), t in zip(m.named_parameters(), ts):
            group, key = name.split(".")
            getattr(m, group)[key] = t
        p1, p2 = m.probabilities(x)
        return ad.sum(ad.mul(p1, p2))

    check_grad(loss, arrays, 1e-4)


def test_input_shape_checked():
    with pytest.raises(DimensionError, match="expects"):
        init_model(MLP).forward(np.ones((3, 5)))


def test_state_copy_is_independent():
    m = init_model(MLP)
    c = m.copy()
    c.head1["w"].data += 1.0
    assert np.all(m.head1["w"].data != c.head1["w"].data)
    with pytest.raises(DimensionError):
        m.load_state({**m.state(), "head1.w": np.ones((2, 2))})


def test_pretrained_heads_disagree_somewhere():
    data = gen_gaussian_blobs(4, 100, seed=1)
    m = init_model(MLP)
    pretrain(m, data, TrainConfig(pretrain_epochs=5, batch_size=32))
    g = np.linspace(-8, 8, 121)
    grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    p1, p2 = m.predict_proba(grid)
    assert np.any(p1.argmax(1) != p2.argmax(1))
