import tempfile

import torch

from ..guidance_net.checkpoint import load_checkpoint, save_checkpoint
from ..guidance_net.gradcheck import gradcheck_pipeline
from ..guidance_net.pipeline import VARIANTS, NetConfig, frozen_checksum, wire_variant
from ..guidance_net.schedule import NoiseSchedule, forward_diffuse
from ..guidance_net.training import TrainConfig, train_toy
from ..run_utils import require
from .core import CheckSettings, check

MODULE = "guidance_net"


def _random_guidance(net: NetConfig, batch: int, generator: torch.Generator):
    size = net.image_size
    sparse = torch.randn(batch, 2, size, size, generator=generator)
    dense = torch.randn(batch, 2, size, size, generator=generator)
    point_maps = [torch.randn(batch, net.feature_dim, h, w, generator=generator) for h, w in net.level_dims()]
    return sparse, dense, point_maps


@check(module=MODULE)
def transparency_at_init(settings: CheckSettings):
    """A fresh guidance branch leaves the frozen denoiser output bit-identical, for every variant."""
    generator = torch.Generator().manual_seed(settings.seed)
    for variant in VARIANTS:
        net = NetConfig(variant=variant, seed=settings.seed)
        pipeline = wire_variant(net)
        with torch.no_grad():
            for trial in range(10):
                z_t = torch.randn(10, 4, net.latent_size, net.latent_size, generator=generator)
                t = torch.randint(1, 1001, (10,), generator=generator)
                guided = pipeline(z_t, t, *_random_guidance(net, 10, generator))
                plain = pipeline.unguided(z_t, t)
                require(torch.equal(guided, plain), MODULE, "transparency", variant=variant, trial=trial,
                        max_difference=float((guided - plain).abs().max()))
    return {"inputs_per_variant": 100}


@check(module=MODULE)
def gradients_match_finite_differences(settings: CheckSettings):
    """Autograd agrees with central differences on every trainable component."""
    errors = gradcheck_pipeline(wire_variant(NetConfig(seed=settings.seed)), sample_count=64, h=1e-5,
                                seed=settings.seed)
    worst = max(errors.values())
    require(worst < 1e-4, MODULE, "gradient check", **errors)
    return errors


@check(module=MODULE)
def forward_diffusion_variance(settings: CheckSettings):
    """Unit-variance latents stay unit variance under forward diffusion at large t."""
    generator = torch.Generator().manual_seed(settings.seed)
    schedule = NoiseSchedule.linear()
    z0 = torch.randn(10000, generator=generator, dtype=torch.float64)
    eps = torch.randn(10000, generator=generator, dtype=torch.float64)
    variance = float(forward_diffuse(z0, schedule.steps, eps, schedule).var())
    require(abs(variance - 1.0) < 0.05, MODULE, "variance preserved", variance=variance)
    return {"variance": variance, "alpha_bar_T": float(schedule.alpha_bar[-1])}


@check(module=MODULE)
def checkpoint_round_trip(settings: CheckSettings):
    """Checkpoint save/load reproduces every tensor bit for bit."""
    pipeline = wire_variant(NetConfig(seed=settings.seed))
    with torch.no_grad():
        for p in pipeline.trainable_parameters():
            p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(settings.seed)) * 0.01)
    with tempfile.TemporaryDirectory() as tmp:
        loaded = load_checkpoint(save_checkpoint(pipeline, tmp))
    for name, module in pipeline.components().items():
        require(frozen_checksum(module) == frozen_checksum(loaded.components()[name]), MODULE,
                "checkpoint round trip", component=name)
    return {"components": list(pipeline.components())}


@check(module=MODULE, settings=CheckSettings(slow=True, seed=7))
def toy_training_converges(settings: CheckSettings):
    """The seeded 200-step toy run halves its loss, reproduces bitwise and leaves the base untouched."""
    config = TrainConfig(steps=200, seed=settings.seed)
    first = train_toy(config, show_progress=False)
    second = train_toy(config, show_progress=False)

    require(first.losses == second.losses, MODULE, "bitwise reproducible",
            first_diverging_step=next((i for i, (a, b) in enumerate(zip(first.losses, second.losses)) if a != b), None))
    require(first.base_unchanged, MODULE, "frozen base unchanged", before=first.checksum_before[:12],
            after=first.checksum_after[:12])
    require(first.final_loss <= 0.5 * first.initial_loss, MODULE, "loss halves",
            initial=first.initial_loss, final=first.final_loss)
    require(first.final_loss == second.final_loss, MODULE, "bitwise reproducible final loss",
            first=first.final_loss, second=second.final_loss)
    return {"initial_loss": first.initial_loss, "final_loss": first.final_loss,
            "last_step_loss": first.losses[-1]}
