import itertools

import pytest
import torch
from hypothesis import given, settings, strategies as st

from freeecho.unet3d import UNet3DConfig, build_unet3d, count_parameters, layer_inventory


def test_full_block_order():
    blocks = [b for b, _ in itertools.groupby(b for b, _ in layer_inventory(build_unet3d(UNet3DConfig.full())))]
    assert blocks == ["Initial Conv", "Downsample 1", "Downsample 2", "Downsample 3", "Middle Block 1",
                      "Middle Block 2", "Upsample 1", "Upsample 2", "Upsample 3", "Final Conv"]
    kinds = [k for b, k in layer_inventory(build_unet3d(UNet3DConfig.full())) if b == "Upsample 2"]
    assert kinds == ["Conv3D", "SpatialLinearAttention", "Attention", "Conv3DTranspose"]


def test_config_validation():
    with pytest.raises(ValueError):
        UNet3DConfig(num_up_blocks=2)
    with pytest.raises(ValueError):
        UNet3DConfig(channel_multipliers=[1, 2])
    with pytest.raises(ValueError):
        UNet3DConfig.desk().check_input_shape(8, 30, 32)
    with pytest.raises(ValueError):
        build_unet3d(UNet3DConfig.desk())(torch.zeros(1, 1, 8, 18, 18), torch.zeros(1))


def test_desk_shape_and_finite():
    net = build_unet3d(UNet3DConfig.desk())
    x = torch.zeros(2, 1, 8, 16, 16)
    y = net(x, torch.zeros(2))
    assert y.shape == x.shape and torch.isfinite(y).all()
    assert count_parameters(net) < 100_000


@settings(max_examples=12)
@given(base=st.sampled_from([4, 8]), depth=st.integers(1, 3), mid=st.integers(0, 2), cond=st.booleans(),
       frames=st.sampled_from([4, 8]), hw=st.sampled_from([8, 16]), zero=st.booleans())
def test_output_shape_property(base, depth, mid, cond, frames, hw, zero):
    cfg = UNet3DConfig(base_channels=base, channel_multipliers=[1, 2, 2][:depth], num_down_blocks=depth,
                       num_middle_blocks=mid, num_up_blocks=depth, with_condition_channel=cond,
                       attention_heads=2, attention_head_dim=4, zero_init=zero)
    net = build_unet3d(cfg, seed=1)
    x = torch.randn(1, 1, frames, hw, hw)
    c = torch.rand(1, 1, frames, hw, hw) if cond else None
    try:
        cfg.check_input_shape(frames, hw, hw)
    except ValueError:
        with pytest.raises(ValueError):
            net(x, torch.tensor([0.3]), c)
        return
    y = net(x, torch.tensor([0.3]), c)
    assert y.shape == x.shape and torch.isfinite(y).all()


def test_single_voxel_bottleneck_rejected():
    cfg = UNet3DConfig(base_channels=8, channel_multipliers=[1, 1, 1], num_down_blocks=3, num_middle_blocks=0,
                       num_up_blocks=3)
    with pytest.raises(ValueError, match="norm group"):
        cfg.check_input_shape(4, 8, 8)
    cfg.check_input_shape(8, 16, 16)


def test_temporal_mixing():
    net = build_unet3d(UNet3DConfig.desk(zero_init=False), seed=3)
    x = torch.randn(1, 1, 8, 16, 16)
    y0 = net(x, torch.tensor([0.1]))
    x2 = x.clone()
    x2[:, :, 2] += 1.0
    y1 = net(x2, torch.tensor([0.1]))
    delta = (y1 - y0).abs().amax(dim=(0, 1, 3, 4))
    assert all(delta[k] > 1e-6 for k in range(8) if k != 2)


def test_seeded_build_reproducible():
    a = build_unet3d(UNet3DConfig.desk(), seed=5).state_dict()
    b = build_unet3d(UNet3DConfig.desk(), seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
