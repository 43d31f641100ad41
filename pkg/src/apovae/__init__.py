"""Adversarial Poincare VAE: hyperbolic latent-variable language models trained
with a primal-dual KL estimate."""

from .errors import InvalidArgumentError, NonFiniteError, TapeStateError, UnsupportedModeError
from .geometry import BallConfig, Gyroplane
from .models import APoVAE, ModelConfig, build_model
from .trainer import Trainer, TrainConfig

__all__ = [
    "APoVAE",
    "BallConfig",
    "Gyroplane",
    "InvalidArgumentError",
    "ModelConfig",
    "NonFiniteError",
    "TapeStateError",
    "TrainConfig",
    "Trainer",
    "UnsupportedModeError",
    "build_model",
]

__version__ = "0.1.0"
