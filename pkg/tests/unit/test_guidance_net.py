"""
Unit tests for the frozen denoiser, the guidance encoders and the variant wiring.
"""

import numpy as np
import pytest
import torch

from src.dispose_guidance.correspondence import DenoiserFeatureProvider
from src.dispose_guidance.exceptions import ConfigError, ParameterError, ShapeError
from src.dispose_guidance.guidance_net.controlnet import GuidanceResiduals, HybridControlNet
from src.dispose_guidance.guidance_net.denoiser import ToyDenoiser, encode_latent, timestep_embedding
from src.dispose_guidance.guidance_net.encoders import MotionEncoder, PointEncoder, ZeroConv2d
from src.dispose_guidance.guidance_net.pipeline import (
    VARIANTS,
    GuidancePipeline,
    NetConfig,
    frozen_checksum,
    pad_unguided_frame,
    trainable_parameter_report,
    wire_variant,
)

pytestmark = pytest.mark.unit


def _inputs(net: NetConfig, batch: int = 3, seed: int = 0):
    generator = torch.Generator().manual_seed(seed)
    size, latent = net.image_size, net.latent_size
    z_t = torch.randn(batch, 4, latent, latent, generator=generator)
    t = torch.randint(1, 1001, (batch,), generator=generator)
    sparse = torch.randn(batch, 2, size, size, generator=generator)
    dense = torch.randn(batch, 2, size, size, generator=generator)
    point_maps = [torch.randn(batch, net.feature_dim, h, w, generator=generator) for h, w in net.level_dims()]
    return z_t, t, sparse, dense, point_maps


def test_encode_latent_shape():
    latent = encode_latent(torch.rand(2, 3, 32, 16), factor=8)
    assert latent.shape == (2, 4, 4, 2)
    with pytest.raises(ShapeError):
        encode_latent(torch.rand(1, 3, 30, 32), factor=8)


def test_denoiser_is_seeded():
    a, b = ToyDenoiser((4, 8), seed=2), ToyDenoiser((4, 8), seed=2)
    assert frozen_checksum(a) == frozen_checksum(b)
    assert frozen_checksum(a) != frozen_checksum(ToyDenoiser((4, 8), seed=3))


def test_denoiser_seed_leaves_global_rng_alone():
    torch.manual_seed(11)
    expected = torch.rand(3)
    torch.manual_seed(11)
    ToyDenoiser((4, 8))
    assert torch.equal(torch.rand(3), expected)


def test_denoiser_output_shape(tiny_net_config):
    base = ToyDenoiser(tiny_net_config.channels, tiny_net_config.emb_dim)
    z_t = torch.randn(2, 4, 4, 4)
    assert base(z_t, torch.tensor([10, 900])).shape == z_t.shape
    assert base.level_dims(4, 4) == [(4, 4), (2, 2), (1, 1)]
    with pytest.raises(ShapeError):
        base.level_dims(6, 6)


def test_zero_conv_outputs_zero():
    conv = ZeroConv2d(3, 5, kernel_size=3)
    assert torch.all(conv(torch.randn(2, 3, 6, 6)) == 0)


def test_motion_encoder_shapes_and_zero_init():
    encoder = MotionEncoder(hidden=4, factor=8)
    sparse = torch.randn(2, 2, 32, 32)
    out = encoder(sparse, None)
    assert out.shape == (2, 4, 4, 4)
    assert torch.all(out == 0)
    assert torch.all(encoder(sparse, torch.randn(2, 2, 32, 32)) == 0)


def test_motion_encoder_validation():
    encoder = MotionEncoder(hidden=4, factor=8)
    with pytest.raises(ParameterError):
        encoder(None, None)
    with pytest.raises(ShapeError):
        encoder(torch.zeros(1, 2, 32, 32), torch.zeros(1, 2, 16, 16))
    with pytest.raises(ShapeError):
        encoder(torch.zeros(1, 2, 30, 32), None)


def test_motion_encoder_trained_output_depends_on_input():
    encoder = MotionEncoder(hidden=4, factor=8)
    with torch.no_grad():
        for branch in (encoder.sparse_branch, encoder.dense_branch):
            branch.out.conv.weight.normal_()
    zeros = encoder(torch.zeros(1, 2, 32, 32), torch.zeros(1, 2, 32, 32))
    again = encoder(torch.zeros(1, 2, 32, 32), torch.zeros(1, 2, 32, 32))
    assert torch.equal(zeros, again)
    assert not torch.equal(encoder(torch.ones(1, 2, 32, 32), None), zeros)


def test_point_encoder():
    encoder = PointEncoder(feature_dim=4, level_channels=(4, 8, 8), hidden=4)
    out = encoder.forward_level(torch.randn(2, 4, 2, 2), 1)
    assert out.shape == (2, 8, 2, 2)
    assert torch.all(out == 0)
    with pytest.raises(ParameterError):
        encoder.forward_level(torch.randn(2, 4, 2, 2), 3)
    with pytest.raises(ShapeError) as exc_info:
        encoder.forward_level(torch.randn(2, 5, 2, 2), 0)
    assert exc_info.value.level == "0"


def test_point_encoder_zero_columns_stay_zero():
    """Test that columns without a keypoint encode to zero even after training moves the weights."""
    encoder = PointEncoder(feature_dim=3, level_channels=(4,), hidden=4)
    with torch.no_grad():
        encoder.mlps[0][2].conv.weight.normal_()
    level = torch.zeros(1, 3, 4, 4)
    level[0, :, 1, 2] = torch.tensor([1.0, -2.0, 0.5])
    out = encoder.forward_level(level, 0)
    mask = torch.zeros(4, 4, dtype=torch.bool)
    mask[1, 2] = True
    assert torch.all(out[0][:, ~mask] == 0)


def test_controlnet_residuals_zero_at_init(tiny_net_config):
    base = ToyDenoiser(tiny_net_config.channels, tiny_net_config.emb_dim)
    controlnet = HybridControlNet(base)
    residuals = controlnet(torch.randn(2, 4, 4, 4), torch.tensor([5, 50]))
    assert isinstance(residuals, GuidanceResiduals)
    assert residuals.is_zero()
    assert [tuple(r.shape) for r in residuals.levels] == [(2, 4, 4, 4), (2, 8, 2, 2), (2, 8, 1, 1)]
    assert all(p.requires_grad for p in controlnet.parameters())
    assert "base" not in dict(controlnet.named_children())


@pytest.mark.parametrize("variant", VARIANTS)
def test_transparency_at_init(tiny_net_config, variant):
    """Test that a fresh pipeline reproduces the frozen denoiser bit for bit."""
    net = tiny_net_config.model_copy(update={"variant": variant})
    pipeline = wire_variant(net)
    z_t, t, sparse, dense, point_maps = _inputs(net)
    with torch.no_grad():
        assert torch.equal(pipeline(z_t, t, sparse, dense, point_maps), pipeline.unguided(z_t, t))


def test_pipeline_components(tiny_net_config):
    full = GuidancePipeline(tiny_net_config)
    exp2 = GuidancePipeline(tiny_net_config.model_copy(update={"variant": "exp2"}))
    assert set(full.components()) == {"base", "motion_encoder", "point_encoder", "controlnet"}
    assert exp2.controlnet is None
    assert "controlnet" not in exp2.trainable_components()
    report = trainable_parameter_report(full)
    assert report["base"]["trainable"] == 0
    assert report["controlnet"]["frozen"] == 0
    assert all(not p.requires_grad for p in full.base.parameters())


def test_pipeline_train_keeps_base_in_eval(tiny_net_config):
    pipeline = GuidancePipeline(tiny_net_config).train()
    assert pipeline.motion_encoder.training
    assert not pipeline.base.training


def test_pipeline_config_errors(tiny_net_config):
    with pytest.raises(ConfigError):
        GuidancePipeline(tiny_net_config.model_copy(update={"variant": "exp3"}))
    with pytest.raises(ConfigError):
        GuidancePipeline(tiny_net_config.model_copy(update={
            "use_sparse_field": False, "use_dense_field": False, "use_correspondence": False,
        }))


def test_pipeline_rejects_wrong_level_shapes(tiny_net_config):
    pipeline = GuidancePipeline(tiny_net_config)
    z_t, t, sparse, dense, point_maps = _inputs(tiny_net_config)
    with pytest.raises(ShapeError):
        pipeline(z_t, t, sparse, dense, point_maps[:2])
    with pytest.raises(ParameterError):
        GuidancePipeline(tiny_net_config.model_copy(update={"variant": "exp2"})).controlnet_forward(
            z_t, None, None, t)


def test_disabled_inputs_are_ignored(tiny_net_config):
    net = tiny_net_config.model_copy(update={"use_sparse_field": False})
    pipeline = GuidancePipeline(net)
    with torch.no_grad():
        pipeline.motion_encoder.dense_branch.out.conv.weight.normal_()
        pipeline.motion_encoder.sparse_branch.out.conv.weight.normal_()
    dense = torch.randn(1, 2, 32, 32)
    a = pipeline.motion_encode(torch.randn(1, 2, 32, 32), dense)
    b = pipeline.motion_encode(torch.randn(1, 2, 32, 32), dense)
    assert torch.equal(a, b)


def test_pad_unguided_frame():
    padded = pad_unguided_frame(torch.ones(3, 2, 4, 4))
    assert padded.shape == (4, 2, 4, 4)
    assert torch.all(padded[0] == 0) and torch.all(padded[1:] == 1)


def test_denoiser_feature_provider(tiny_net_config):
    base = ToyDenoiser(tiny_net_config.channels, tiny_net_config.emb_dim)
    provider = DenoiserFeatureProvider(base, timestep=261, seed=0)
    image = np.random.default_rng(0).uniform(size=(32, 32, 3))
    features = provider.features(image)
    assert features.channels == tiny_net_config.channels[-1]
    assert (features.source_height, features.source_width) == (32, 32)
    np.testing.assert_array_equal(features.data, provider.features(image).data)


def test_middle_residual_changes_output(tiny_net_config):
    base = ToyDenoiser(tiny_net_config.channels, tiny_net_config.emb_dim)
    controlnet = HybridControlNet(base)
    z_t, t = torch.randn(2, 4, 4, 4), torch.tensor([3, 700])
    with torch.no_grad():
        zero = controlnet(z_t, t)
        plain = base(z_t, t)
        assert torch.equal(base(z_t, t, zero), plain)
        bumped = GuidanceResiduals(torch.ones_like(zero.mid), zero.levels)
        assert not torch.equal(base(z_t, t, bumped), plain)


def test_controlnet_is_nonlinear_after_training(tiny_net_config):
    base = ToyDenoiser(tiny_net_config.channels, tiny_net_config.emb_dim)
    controlnet = HybridControlNet(base)
    with torch.no_grad():
        for conv in list(controlnet.zero_convs) + [controlnet.zero_mid]:
            conv.conv.weight.normal_()
        z_t, t = torch.randn(1, 4, 4, 4), torch.tensor([100])
        once = controlnet(z_t, t)
        twice = controlnet(2 * z_t, t)
    assert not torch.allclose(twice.mid, 2 * once.mid)
    assert not torch.equal(twice.mid, once.mid)


def test_residual_count_checked(tiny_net_config):
    base = ToyDenoiser(tiny_net_config.channels, tiny_net_config.emb_dim)
    residuals = HybridControlNet(base)(torch.randn(1, 4, 4, 4), torch.tensor([1]))
    with pytest.raises(ShapeError):
        base(torch.randn(1, 4, 4, 4), torch.tensor([1]), GuidanceResiduals(residuals.mid, residuals.levels[:2]))
    with pytest.raises(ShapeError) as exc_info:
        bad = GuidanceResiduals(residuals.mid[:, :2], residuals.levels)
        base(torch.randn(1, 4, 4, 4), torch.tensor([1]), bad)
    assert exc_info.value.level == "middle"


def test_point_encoder_support_after_training_step():
    """Test that one SGD step keeps the output support on the single nonzero column."""
    encoder = PointEncoder(feature_dim=3, level_channels=(4,), hidden=4)
    level = torch.zeros(1, 3, 4, 4)
    level[0, :, 2, 1] = torch.tensor([0.5, 1.0, -1.0])
    optimizer = torch.optim.SGD(encoder.parameters(), lr=0.1)
    target = torch.ones(1, 4, 4, 4)
    torch.nn.functional.mse_loss(encoder.forward_level(level, 0), target).backward()
    optimizer.step()
    with torch.no_grad():
        out = encoder.forward_level(level, 0)
    support = out.abs().sum(dim=1)[0] > 0
    assert support[2, 1]
    assert int(support.sum()) == 1


def test_denoiser_runs_in_float64(tiny_net_config):
    """Test that a double-precision copy embeds timesteps in its own dtype."""
    base = ToyDenoiser(tiny_net_config.channels, tiny_net_config.emb_dim).double()
    assert timestep_embedding(torch.tensor([1, 500]), 16, dtype=torch.float64).dtype == torch.float64
    assert base.embed(torch.tensor([1, 500])).dtype == torch.float64
    z_t = torch.randn(2, 4, 4, 4, dtype=torch.float64)
    out = base(z_t, torch.tensor([1, 500]))
    assert out.dtype == torch.float64


def test_pipeline_runs_in_float64(tiny_net_config):
    pipeline = wire_variant(tiny_net_config).double()
    size = tiny_net_config.image_size
    z_t = torch.randn(1, 4, size // 8, size // 8, dtype=torch.float64)
    sparse = torch.randn(1, 2, size, size, dtype=torch.float64)
    point_maps = [torch.zeros(1, tiny_net_config.feature_dim, h, w, dtype=torch.float64)
                  for h, w in pipeline.level_dims()]
    with torch.no_grad():
        out = pipeline(z_t, torch.tensor([250]), sparse, sparse, point_maps)
    assert out.dtype == torch.float64
