"""Single-image dehazing toolkit.

An all-in-one dehazing CNN (five convolutional layers estimating a per-pixel
correction field K, then J = K*I - K + b) trained with a small built-in
reverse-mode autodiff engine, plus the haze synthesizer, dark-channel-prior
baseline, and PSNR/SSIM evaluation harness needed to train and validate it.
"""

from .tensor_core import ConvSpec, GradTape, Gradients, NonFiniteError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConvSpec",
    "GradTape",
    "Gradients",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "__version__",
]
