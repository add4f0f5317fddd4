"""Degradation-agnostic diffusion image restoration, self-contained on numpy.

The package layers as:

- ``engine``    reverse-mode tensor core, FFT, MAC/wall-time counters
- ``layers``    parameter-holding modules (conv, linear, norms)
- ``blocks``    the restoration-specific blocks (prompter, task embedding,
                dual-stream encoder, fusion, noise-aware routing)
- ``diffusion`` noise schedule and coarse-to-fine sampler
- ``model``     full denoiser, optimizer, training step, checkpoints
- ``degrade``   synthetic scenes and degradations, dataset builder
- ``metrics``   psnr / ssim / separability statistics, MAC reports
- ``cli``       degrade / train / restore / eval / selftest / bench
"""

from .engine import Tensor, backward, no_grad
from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigError,
    ConfigMismatchError,
    NumericsError,
    ShapeError,
)

__version__ = "1.0.0"

__all__ = [
    "Tensor", "backward", "no_grad", "ShapeError", "ConfigError",
    "CheckpointCorruptError", "CheckpointVersionError", "ConfigMismatchError",
    "NumericsError", "__version__",
]
