"""Self-supervised blind denoising with a jointly trained noise model.

Train a denoiser and a per-pixel noise-distribution head from noisy images
alone: grid masking keeps the training signal honest, the noise head turns
residuals into a proper likelihood, and the diagnostics compare what the
model believes about the noise with what the data shows.
"""

from .data import (FormatError, Image2D, NormalizationRecord, fit_normalization,
                   generate_phantom, read_image, synth_noise, write_image)
from .inference import predict, predict_dihedral
from .metrics import BinnedNoiseReport, gaussian_baseline, noise_report, psnr, ssim
from .networks import (CheckpointError, DNetConfig, NetworkBundle, NNetConfig,
                       build_bundle, load_bundle, measure_receptive_field,
                       save_bundle)
from .noise_model import NoiseParams, gaussian_nll, gmm_nll, mixture_moments
from .trainer import TrainConfig, parse_config, train

__version__ = "0.1.0"

__all__ = [
    "BinnedNoiseReport", "CheckpointError", "DNetConfig", "FormatError",
    "Image2D", "NetworkBundle", "NNetConfig", "NoiseParams",
    "NormalizationRecord", "TrainConfig", "build_bundle", "fit_normalization",
    "gaussian_baseline", "gaussian_nll", "generate_phantom", "gmm_nll",
    "load_bundle", "measure_receptive_field", "mixture_moments",
    "noise_report", "parse_config", "predict", "predict_dihedral", "psnr",
    "read_image", "save_bundle", "ssim", "synth_noise", "train",
    "write_image",
]
