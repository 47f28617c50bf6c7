"""Diffusion-transformer training with patch, structural and adversarial
representation alignment against a frozen encoder, on a numpy autodiff core."""

from .alignment import AlignmentConfig, LossBreakdown, total_loss
from .networks import DenoiserConfig, DenoiserNet, EncoderConfig, FrozenEncoder, ProjectionMLP, Discriminator
from .sampler import SamplerConfig, sample
from .trainer import SyntheticDataset, TrainConfig, init_state, load_checkpoint, save_checkpoint, train, train_step

__version__ = "0.1.0"
