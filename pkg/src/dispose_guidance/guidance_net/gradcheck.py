"""Central-difference verification of autograd gradients."""

import copy
import logging
from typing import Callable, Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from ..exceptions import ParameterError
from .pipeline import GuidancePipeline

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 64
DEFAULT_STEP = 1e-5

LossFn = Callable[[nn.Module], torch.Tensor]


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    """Relative difference; gradients smaller than ``floor`` are compared on an absolute scale."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def perturb_zero_parameters(module: nn.Module, generator: torch.Generator, scale: float = 0.1) -> int:
    """Give all-zero parameters small random values so gradients reach everything upstream of them."""
    count = 0
    with torch.no_grad():
        for param in module.parameters():
            if param.numel() and torch.all(param == 0):
                param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * scale)
                count += 1
    return count


def finite_diff_gradcheck(component: nn.Module, loss_fn: LossFn, sample_count: int = DEFAULT_SAMPLES,
                          h: float = DEFAULT_STEP, seed: int = 0,
                          root: Optional[nn.Module] = None) -> float:
    """Max relative error between autograd and (f(p+h) - f(p-h)) / 2h over random trainable scalars.

    ``loss_fn`` receives ``root`` (defaults to ``component``) and returns a scalar.
    Everything runs in the modules' own dtype; callers pass float64 copies.
    """
    if h <= 0:
        raise ParameterError(f"step h must be positive, got {h}")
    root = root if root is not None else component
    params = [p for p in component.parameters() if p.requires_grad]
    if not params:
        raise ParameterError("component has no trainable parameters")

    root.zero_grad(set_to_none=True)
    loss_fn(root).backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    sizes = torch.tensor([p.numel() for p in params])
    total = int(sizes.sum())
    generator = torch.Generator().manual_seed(seed)
    flat_samples = torch.randperm(total, generator=generator)[:sample_count].tolist()
    offsets = torch.cumsum(sizes, 0).tolist()

    worst = 0.0
    with torch.no_grad():
        for flat in flat_samples:
            index = next(i for i, end in enumerate(offsets) if flat < end)
            local = flat - (offsets[index] - int(sizes[index]))
            view = params[index].view(-1)
            original = view[local].item()
            view[local] = original + h
            plus = float(loss_fn(root))
            view[local] = original - h
            minus = float(loss_fn(root))
            view[local] = original
            numeric = (plus - minus) / (2 * h)
            worst = max(worst, relative_error(float(analytic[index].view(-1)[local]), numeric))
    return worst


def _pipeline_inputs(pipeline: GuidancePipeline, batch: int, generator: torch.Generator) -> Tuple:
    config = pipeline.config
    dtype = torch.float64
    latent = config.latent_size
    z_t = torch.randn(batch, 4, latent, latent, generator=generator, dtype=dtype)
    t = torch.randint(1, 1001, (batch,), generator=generator)
    sparse = torch.randn(batch, 2, config.image_size, config.image_size, generator=generator, dtype=dtype)
    dense = torch.randn(batch, 2, config.image_size, config.image_size, generator=generator, dtype=dtype)
    point_maps = []
    for h_l, w_l in pipeline.level_dims():
        level = torch.zeros(batch, config.feature_dim, h_l, w_l, dtype=dtype)
        mask = torch.rand(batch, 1, h_l, w_l, generator=generator) < 0.3
        values = torch.randn(batch, config.feature_dim, h_l, w_l, generator=generator, dtype=dtype)
        point_maps.append(torch.where(mask, values, level))
    return z_t, t, sparse, dense, point_maps


def gradcheck_pipeline(pipeline: GuidancePipeline, sample_count: int = DEFAULT_SAMPLES, h: float = DEFAULT_STEP,
                       seed: int = 0) -> Dict[str, float]:
    """Max relative gradient error for every trainable component, on a perturbed float64 copy."""
    generator = torch.Generator().manual_seed(seed)
    model64 = copy.deepcopy(pipeline).double()
    perturb_zero_parameters(model64, generator)
    z_t, t, sparse, dense, point_maps = _pipeline_inputs(model64, 2, generator)

    def loss_fn(model: nn.Module) -> torch.Tensor:
        return model(z_t, t, sparse, dense, point_maps).pow(2).mean()

    errors = {
        name: finite_diff_gradcheck(module, loss_fn, sample_count, h, seed, root=model64)
        for name, module in model64.trainable_components().items()
    }
    for name, error in errors.items():
        logger.info(f"gradcheck {name}: max relative error {error:.3g}")
    return errors


def zero_init_gradients(pipeline: GuidancePipeline, seed: int = 0) -> List[Tuple[str, float]]:
    """Gradient norms of the zero-initialized output convolutions under a noise-prediction loss."""
    if pipeline.controlnet is None:
        raise ParameterError(f"variant {pipeline.variant} has no ControlNet")
    generator = torch.Generator().manual_seed(seed)
    model64 = copy.deepcopy(pipeline).double()
    z_t, t, sparse, dense, point_maps = _pipeline_inputs(model64, 2, generator)
    target = torch.randn(z_t.shape, generator=generator, dtype=torch.float64)

    model64.zero_grad(set_to_none=True)
    eps_hat = model64(z_t, t, sparse, dense, point_maps)
    (eps_hat - target).pow(2).mean().backward()

    norms = []
    for name, param in model64.controlnet.named_parameters():
        if name.startswith("zero"):
            norms.append((name, float(param.grad.norm()) if param.grad is not None else 0.0))
    return norms
