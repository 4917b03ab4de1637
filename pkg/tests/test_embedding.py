import numpy as np
import pytest

import descsel.autodiff as ad
from descsel.embedding import (BACKBONE_KINDS, ChannelNorm, TransformLayer,
                               build_backbone, embed, embed_node,
                               transform_set)
from descsel.descriptors import DescriptorSet
from descsel.errors import InvalidInputError


def test_identity_backbone_flattens_rows():
    bb = build_backbone("identity", d_out=None)
    raw = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
    ds = embed(bb, raw)
    assert (ds.height, ds.width, ds.d) == (2, 2, 3)
    assert np.array_equal(ds.descriptors, raw.reshape(4, 3))
    assert not bb.parameters()


def test_patch_linear_patch_order_is_row_major():
    rng = np.random.default_rng(0)
    bb = build_backbone("patch-linear", input_shape=(4, 4, 1), d_out=4,
                        patch=2, rng=rng, dtype=np.float64)
    # overwrite with identity weight + zero bias so patches pass through
    bb.params["backbone.weight"].value = np.eye(4)
    bb.params["backbone.bias"].value = np.zeros(4)
    raw = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    ds = embed(bb, raw)
    assert (ds.height, ds.width) == (2, 2)
    # first patch is the top-left 2x2 block, scanned row by row
    assert ds.descriptors[0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert ds.descriptors[1].tolist() == [2.0, 3.0, 6.0, 7.0]
    assert ds.descriptors[2].tolist() == [8.0, 9.0, 12.0, 13.0]


def test_patch_linear_requires_divisible_grid():
    with pytest.raises(InvalidInputError):
        build_backbone("patch-linear", input_shape=(5, 4, 1), d_out=4,
                       patch=2, rng=np.random.default_rng(0))


def test_tiny_conv_shapes_and_grad_flow():
    rng = np.random.default_rng(1)
    bb = build_backbone("tiny-conv", input_shape=(8, 8, 3), d_out=6,
                        rng=rng, dtype=np.float64)
    raw = rng.standard_normal((8, 8, 3))
    node, (h, w) = embed_node(bb, raw, train=True, update_running=False)
    assert (h, w) == (2, 2)
    assert node.value.shape == (4, 6)
    ad.backward(ad.reduce_sum(node))
    for name, p in bb.parameters().items():
        assert p.grad is not None, name


def test_tiny_conv_rejects_small_grids():
    with pytest.raises(InvalidInputError):
        build_backbone("tiny-conv", input_shape=(2, 8, 3), d_out=4,
                       rng=np.random.default_rng(0))


def test_unknown_backbone_kind():
    with pytest.raises(InvalidInputError):
        build_backbone("resnet", input_shape=(8, 8, 3), d_out=4,
                       rng=np.random.default_rng(0))
    assert set(BACKBONE_KINDS) == {"identity", "patch-linear", "tiny-conv"}


def test_channel_norm_train_standardizes_batch():
    rng = np.random.default_rng(2)
    cn = ChannelNorm(3, dtype=np.float64)
    x = ad.constant(rng.standard_normal((32, 3)) * 5 + 2)
    y = cn.apply(x, train=True)
    assert np.allclose(y.value.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(y.value.std(axis=0), 1, atol=1e-6)


def test_channel_norm_running_stats_momentum():
    rng = np.random.default_rng(3)
    cn = ChannelNorm(2, dtype=np.float64)
    x = rng.standard_normal((16, 2)) + 4.0
    cn.apply(ad.constant(x), train=True)
    want = 0.1 * x.mean(axis=0, keepdims=True)  # from zero init, one update
    assert np.allclose(cn.running_mean, want)


def test_channel_norm_eval_uses_frozen_stats():
    rng = np.random.default_rng(4)
    cn = ChannelNorm(2, dtype=np.float64)
    x1 = rng.standard_normal((16, 2))
    cn.apply(ad.constant(x1), train=True)
    frozen = cn.running_mean.copy()
    x2 = rng.standard_normal((16, 2)) + 10
    out = cn.apply(ad.constant(x2), train=False)
    assert np.array_equal(cn.running_mean, frozen)  # eval never updates
    assert abs(out.value.mean()) > 1.0  # not re-standardized to the batch


def test_channel_norm_train_can_skip_running_update():
    cn = ChannelNorm(2, dtype=np.float64)
    x = np.ones((4, 2))
    cn.apply(ad.constant(x), train=True, update_running=False)
    assert np.array_equal(cn.running_mean, np.zeros((1, 2)))


def test_channel_norm_state_round_trip():
    cn = ChannelNorm(2, dtype=np.float64, prefix="n")
    cn.apply(ad.constant(np.random.default_rng(5).standard_normal((8, 2))), train=True)
    state = cn.state()
    cn2 = ChannelNorm(2, dtype=np.float64, prefix="n")
    cn2.load_state(state)
    assert np.array_equal(cn2.running_mean, cn.running_mean)
    assert np.array_equal(cn2.running_var, cn.running_var)


def test_transform_identity_init_is_transparent_for_positive_input():
    layer = TransformLayer(3, normalize=False, init="identity", dtype=np.float64)
    x = np.abs(np.random.default_rng(6).standard_normal((5, 3))) + 0.1
    out = transform_set(layer, DescriptorSet(x, 1, 5))
    assert np.allclose(out.descriptors, x)


def test_transform_leaky_slope_on_negative_input():
    layer = TransformLayer(2, normalize=False, init="identity", dtype=np.float64)
    x = np.array([[-1.0, -10.0]])
    out = transform_set(layer, DescriptorSet(x, 1, 1))
    assert np.allclose(out.descriptors, [[-0.01, -0.1]])


def test_transform_rejects_wrong_input_dim():
    layer = TransformLayer(3, dtype=np.float64)
    with pytest.raises(InvalidInputError):
        layer.apply(ad.constant(np.ones((2, 4))))


def test_transform_changes_width():
    rng = np.random.default_rng(7)
    layer = TransformLayer(4, d_out=2, normalize=False, init="random",
                           rng=rng, dtype=np.float64)
    out = layer.apply(ad.constant(rng.standard_normal((6, 4))))
    assert out.value.shape == (6, 2)
