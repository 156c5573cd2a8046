"""
Toy training of the guidance branches against the frozen denoiser.

Only the motion encoder, the point encoder and the ControlNet receive
gradients. Timesteps and noise come from one seeded generator, so a fixed
seed reproduces the loss curve bit for bit. The initial and final losses are
measured on a fixed evaluation draw of timesteps and noise per clip.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn

from ..exceptions import TrainingDivergedError
from ..logging_utils import console
from .data import DataConfig, TrainingBatch, make_synthetic_dataset, prepare_batch
from .pipeline import GuidancePipeline, NetConfig, frozen_checksum, wire_variant
from .schedule import NoiseSchedule, forward_diffuse

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
EvalDraw = Tuple[TrainingBatch, torch.Tensor, torch.Tensor]


class TrainConfig(BaseModel):
    steps: int = Field(200, ge=1)
    seed: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(2e-3, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    clips: int = Field(2, ge=1)
    frames: int = Field(5, ge=2)
    keypoints: int = Field(6, ge=1)
    eval_draws: int = Field(4, ge=1)
    log_every: int = Field(20, ge=1)
    data: DataConfig = Field(default_factory=DataConfig)


@dataclass
class TrainResult:
    losses: List[float]
    initial_loss: float
    final_loss: float
    checksum_before: str
    checksum_after: str
    pipeline: GuidancePipeline = field(repr=False)

    @property
    def base_unchanged(self) -> bool:
        return self.checksum_before == self.checksum_after


def make_optimizer(pipeline: GuidancePipeline, config: TrainConfig) -> torch.optim.Optimizer:
    params = pipeline.trainable_parameters()
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.lr, momentum=config.momentum)
    return torch.optim.Adam(params, lr=config.lr)


def guidance_loss(pipeline: GuidancePipeline, batch: TrainingBatch, t: torch.Tensor, eps: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    z_t = forward_diffuse(batch.z0, t, eps, schedule)
    eps_hat = pipeline(z_t, t, batch.sparse, batch.dense, batch.point_maps)
    return F.mse_loss(eps_hat, eps)


def training_step(pipeline: GuidancePipeline, batch: TrainingBatch, t: torch.Tensor, eps: torch.Tensor,
                  optimizer: torch.optim.Optimizer, schedule: NoiseSchedule, step: int = 0) -> float:
    """One optimizer update on the mean squared noise-prediction error; returns the loss before the update."""
    pipeline.train()
    optimizer.zero_grad()
    loss = guidance_loss(pipeline, batch, t, eps, schedule)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(step, {
            "loss": float(loss.detach()),
            "timesteps": t.tolist(),
            "latent_abs_max": float(batch.z0.abs().max()),
        })
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def make_eval_draws(batches: List[TrainingBatch], schedule: NoiseSchedule, draws: int,
                    seed: int) -> List[EvalDraw]:
    """Fixed timesteps and noise per clip, drawn from their own generator so training draws are unaffected."""
    generator = torch.Generator().manual_seed(seed)
    out = []
    for _ in range(draws):
        for batch in batches:
            t = schedule.sample_timesteps(batch.frames, generator)
            out.append((batch, t, torch.randn(batch.z0.shape, generator=generator)))
    return out


def evaluate_loss(pipeline: GuidancePipeline, draws: List[EvalDraw], schedule: NoiseSchedule) -> float:
    """Mean guidance loss over the evaluation draws."""
    pipeline.eval()
    with torch.no_grad():
        total = sum(float(guidance_loss(pipeline, batch, t, eps, schedule)) for batch, t, eps in draws)
    return total / len(draws)


def train_toy(config: Optional[TrainConfig] = None, net_config: Optional[NetConfig] = None,
              show_progress: bool = True) -> TrainResult:
    config = config or TrainConfig()
    net_config = net_config or NetConfig(seed=config.seed)

    clips = make_synthetic_dataset(config.seed, config.clips, config.frames, net_config.image_size, config.keypoints)
    batches = [prepare_batch(clip, net_config, config.data) for clip in clips]

    pipeline = wire_variant(net_config)
    schedule = NoiseSchedule.linear()
    optimizer = make_optimizer(pipeline, config)
    generator = torch.Generator().manual_seed(config.seed)
    eval_draws = make_eval_draws(batches, schedule, config.eval_draws, config.seed + 1)
    checksum_before = frozen_checksum(pipeline.base)
    initial_loss = evaluate_loss(pipeline, eval_draws, schedule)

    losses: List[float] = []
    with Progress(TextColumn("[bold blue]train-toy"), BarColumn(), TextColumn("{task.completed}/{task.total}"),
                  TextColumn("loss {task.fields[loss]}"), TimeElapsedColumn(),
                  console=console, disable=not show_progress, transient=True) as progress:
        task = progress.add_task("train", total=config.steps, loss="-")
        for step in range(config.steps):
            batch = batches[step % len(batches)]
            t = schedule.sample_timesteps(batch.frames, generator)
            eps = torch.randn(batch.z0.shape, generator=generator)
            loss = training_step(pipeline, batch, t, eps, optimizer, schedule, step)
            losses.append(loss)
            progress.update(task, advance=1, loss=f"{loss:.4f}")
            if (step + 1) % config.log_every == 0:
                logger.info(f"step {step + 1}/{config.steps} loss {loss:.5f}")

    final_loss = evaluate_loss(pipeline, eval_draws, schedule)
    checksum_after = frozen_checksum(pipeline.base)
    if checksum_after != checksum_before:
        logger.error("Frozen denoiser weights changed during training")
    logger.info(f"Evaluation loss {initial_loss:.5f} -> {final_loss:.5f} over {config.steps} steps")
    return TrainResult(losses, initial_loss, final_loss, checksum_before, checksum_after, pipeline)


def write_loss_csv(losses: List[float], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses, start=1):
            writer.writerow([step, repr(loss)])
    return path


def read_loss_csv(path: PathLike) -> List[float]:
    with Path(path).open(newline="") as f:
        return [float(row["loss"]) for row in csv.DictReader(f)]
