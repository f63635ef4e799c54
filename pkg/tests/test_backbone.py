import numpy as np
import pytest

from mobilecaps.autodiff import Parameter, Tensor, backward, ops
from mobilecaps.backbone import (
    Backbone,
    BackboneProfile,
    InvertedResidual,
    InvertedResidualConfig,
    build_backbone,
    desk_profile,
    inverted_residual_forward,
    paper_profile,
)
from mobilecaps.layers import Conv2d, param_count
from mobilecaps.model import build_model


def test_expansion_width():
    assert InvertedResidualConfig(32, 32, 6).hidden_channels == 192


def test_residual_eligibility():
    assert InvertedResidualConfig(32, 32, 6, 1).has_residual
    assert not InvertedResidualConfig(32, 32, 6, 2).has_residual
    assert not InvertedResidualConfig(32, 64, 6, 1).has_residual


def test_block_param_count_without_bn(rng):
    block = InvertedResidual(InvertedResidualConfig(32, 32, 6, use_batch_norm=False), rng)
    # expansion + depthwise 3x3 + projection
    assert param_count(block)["total"] == 32 * 192 + 9 * 192 + 192 * 32 == 14016


def test_zero_projection_is_identity(rng):
    block = InvertedResidual(InvertedResidualConfig(8, 8, 6), rng)
    block.project.kernel.data[:] = 0
    block.project_bn.gamma.data[:] = 0
    x = Tensor(rng.normal(size=(2, 5, 5, 8)).astype(np.float32))
    np.testing.assert_array_equal(inverted_residual_forward(x, block).data, x.data)


def test_all_zero_weights_pass_input_through(rng):
    block = InvertedResidual(InvertedResidualConfig(4, 4, 6, use_batch_norm=False), rng)
    for p in block.parameters():
        p.data[:] = 0
    x = Tensor(rng.normal(size=(1, 3, 3, 4)).astype(np.float32))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_block_channel_mismatch(rng):
    block = InvertedResidual(InvertedResidualConfig(4, 4, 6), rng)
    with pytest.raises(ValueError):
        block(Tensor(np.ones((1, 3, 3, 5))))


def test_expansion_skipped_for_t1(rng):
    block = InvertedResidual(InvertedResidualConfig(16, 16, 1), rng)
    assert not hasattr(block, "expand")


def test_paper_profile_backbone_shape():
    net = build_backbone("paper")
    out = net(Tensor(np.random.default_rng(0).random((1, 224, 224, 3)).astype(np.float32)))
    assert out.shape == (1, 7, 7, 1024)


def test_desk_backbone_shape_and_batch():
    net = build_backbone("desk")
    x = np.random.default_rng(0).random((1, 32, 32, 3)).astype(np.float32)
    assert net(Tensor(x)).shape == (1, 4, 4, 64)
    assert net(Tensor(np.concatenate([x, x]))).shape == (2, 4, 4, 64)


def test_profile_grid_validated():
    prof = desk_profile()
    prof.output_grid = 5
    with pytest.raises(ValueError, match="grid"):
        Backbone(prof, np.random.default_rng(0))


def test_profile_channel_chain_validated():
    prof = desk_profile()
    prof.blocks[1] = InvertedResidualConfig(99, 24, 4, 2)
    with pytest.raises(ValueError, match="channels"):
        Backbone(prof, np.random.default_rng(0))


def test_profile_round_trips_through_dict():
    prof = paper_profile()
    assert BackboneProfile.from_dict(prof.to_dict()) == prof
    assert prof.total_stride == 32


def test_param_count_examples(rng):
    assert param_count(Conv2d(32, 64, 1, rng=rng))["total"] == 2048
    net = build_backbone("desk")
    trainable = param_count(net)["total"]
    all_params = param_count(net, trainable_only=False)["total"]
    assert all_params > trainable  # BN running stats are frozen
    net.stem.kernel.trainable = False
    assert param_count(net)["total"] == trainable - net.stem.kernel.size


def test_param_count_per_block():
    net = build_backbone("paper")
    per_block = param_count(net, depth=2)
    assert per_block["blocks.0"] > 0 and "blocks.15" in per_block
    assert per_block["total"] == param_count(net)["total"]


def test_paper_profile_parameter_budget():
    total = param_count(build_model(profile="paper"))["total"]
    assert 1_900_000 <= total <= 2_500_000


def test_gradient_reaches_every_block():
    model = build_model(profile="desk").astype(np.float64)
    x = Tensor(np.random.default_rng(1).random((4, 32, 32, 3)))
    model.train()
    out = model(x, rng=np.random.default_rng(0))
    backward(ops.sum(out))
    dead = [n for n, p in model.named_parameters()
            if p.trainable and (p.grad is None or not np.any(p.grad))]
    assert dead == []
