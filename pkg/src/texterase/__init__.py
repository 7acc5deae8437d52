"""One-stage scene text removal with hierarchical ViT encoder-decoder,
GAN training losses, masked-patch pretraining, and image-eval metrics."""

__version__ = "0.1.0"

from .config import ModelConfig, preset, validate  # noqa: F401
from .model import Eraser  # noqa: F401
