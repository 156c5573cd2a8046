"""Desk-scale diffusion stack: frozen toy denoiser plus trainable motion/point guidance."""

from .checkpoint import load_checkpoint, save_checkpoint
from .controlnet import GuidanceResiduals, HybridControlNet
from .denoiser import LATENT_CHANNELS, ToyDenoiser, encode_latent
from .encoders import MotionEncoder, PointEncoder, ZeroConv2d
from .gradcheck import finite_diff_gradcheck, gradcheck_pipeline
from .pipeline import (
    VARIANTS,
    GuidancePipeline,
    NetConfig,
    frozen_checksum,
    trainable_parameter_report,
    wire_variant,
)
from .schedule import NoiseSchedule, forward_diffuse
from .training import TrainConfig, TrainResult, train_toy, training_step, write_loss_csv
