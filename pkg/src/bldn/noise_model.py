"""Per-pixel noise distributions: Gaussian and centered Gaussian mixtures.

The noise at a pixel is modelled conditionally on the clean signal as a
zero-mean distribution; either a single Gaussian parameterised by sigma,
or an N-component mixture whose last component mean is solved so the
mixture mean is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

MIN_WEIGHT = 1e-12
_SKEW_VAR_FLOOR = 1e-18


@dataclass
class NoiseParams:
    """Mixture parameters broadcast over pixels.

    Arrays share a trailing pixel shape with a leading component axis:
    weights (N, ...), means (N, ...), sigmas (N, ...). N=1 with zero mean
    is the plain Gaussian case.
    """

    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        if not (self.weights.shape == self.means.shape == self.sigmas.shape):
            raise ValueError("weights/means/sigmas shapes differ")
        if self.weights.shape[0] < 1:
            raise ValueError("need at least one component")
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be positive")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        total = self.weights.sum(axis=0)
        if not np.allclose(total, 1.0, atol=1e-6):
            raise ValueError("weights must sum to 1 per pixel")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def scaled(self, scale: float) -> "NoiseParams":
        """Same distribution in units multiplied by ``scale``."""
        if scale <= 0:
            raise ValueError("scale must be positive")
        return NoiseParams(self.weights, self.means * scale, self.sigmas * scale)


def center_mixture(weights: np.ndarray | torch.Tensor,
                   free_means: np.ndarray | torch.Tensor):
    """Solve the last component mean so the mixture mean is exactly zero.

    ``free_means`` carries the first N-1 means; returns the full means array
    (N along axis 0) together with a boolean mask of pixels where the last
    weight had to be clamped to a tiny floor (degenerate, mean may be huge).
    """
    is_torch = isinstance(weights, torch.Tensor)
    xp = torch if is_torch else np
    if weights.shape[0] != free_means.shape[0] + 1:
        raise ValueError("free_means must have exactly one fewer component")
    partial = (weights[:-1] * free_means).sum(0)
    last_w = weights[-1]
    degenerate = last_w < MIN_WEIGHT
    safe_w = xp.clip(last_w, MIN_WEIGHT, None) if not is_torch else last_w.clamp(min=MIN_WEIGHT)
    last_mean = -partial / safe_w
    means = xp.concatenate([free_means, last_mean[None]], 0) if not is_torch \
        else torch.cat([free_means, last_mean[None]], 0)
    return means, degenerate


def gaussian_nll(residual: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Elementwise loss log(sigma^2) + (residual / sigma)^2."""
    return torch.log(sigma * sigma) + (residual / sigma) ** 2


def gmm_nll(residual: torch.Tensor, weights: torch.Tensor,
            means: torch.Tensor, sigmas: torch.Tensor) -> torch.Tensor:
    """Mixture analogue of ``gaussian_nll``; component axis is dim 0.

    Computed as -2 * logsumexp_i(log w_i - log sigma_i - (r - mu_i)^2 / (2 sigma_i^2)),
    which for a single zero-mean component reduces exactly to
    ``gaussian_nll`` (the sqrt(2 pi) constant is dropped in both).
    """
    z = (residual[None] - means) / sigmas
    log_terms = torch.log(weights.clamp(min=MIN_WEIGHT)) - torch.log(sigmas) - 0.5 * z * z
    return -2.0 * torch.logsumexp(log_terms, dim=0)


def mixture_moments(params: NoiseParams):
    """Per-pixel mean, variance and skewness of the mixture.

    Skewness is NaN where the variance underflows (all mass collapsed).
    """
    w, mu, sig = params.weights, params.means, params.sigmas
    mean = (w * mu).sum(0)
    var = (w * (sig ** 2 + mu ** 2)).sum(0) - mean ** 2
    d = mu - mean
    third = (w * (d ** 3 + 3.0 * d * sig ** 2)).sum(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        skew = np.where(var > _SKEW_VAR_FLOOR, third / np.maximum(var, _SKEW_VAR_FLOOR) ** 1.5, np.nan)
    return mean, var, skew


def mixture_pdf(x: np.ndarray, params: NoiseParams) -> np.ndarray:
    """Evaluate the mixture density at points ``x`` (params must be scalar-shaped)."""
    x = np.asarray(x, dtype=np.float64)
    w = params.weights.reshape(params.n_components, *([1] * x.ndim))
    mu = params.means.reshape(w.shape)
    sig = params.sigmas.reshape(w.shape)
    comp = np.exp(-0.5 * ((x[None] - mu) / sig) ** 2) / (sig * math.sqrt(2 * math.pi))
    return (w * comp).sum(0)


def sample_noise(params: NoiseParams, shape: tuple[int, ...],
                 rng: np.random.Generator) -> np.ndarray:
    """Draw samples from the mixture; params broadcast against ``shape``."""
    n = params.n_components

    def _expand(arr: np.ndarray) -> np.ndarray:
        extra = len(shape) - (arr.ndim - 1)
        if extra > 0:
            arr = arr.reshape(n, *arr.shape[1:], *([1] * extra))
        return np.broadcast_to(arr, (n, *shape))

    w = _expand(params.weights)
    mu = _expand(params.means)
    sig = _expand(params.sigmas)
    cum = np.cumsum(w, axis=0)
    u = rng.random(shape)
    comp = (u[None] >= cum).sum(0)
    comp = np.minimum(comp, n - 1)
    pick_mu = np.take_along_axis(mu, comp[None], 0)[0]
    pick_sig = np.take_along_axis(sig, comp[None], 0)[0]
    return pick_mu + pick_sig * rng.standard_normal(shape)


def _mixture_cdf(x: np.ndarray, params: NoiseParams) -> np.ndarray:
    from scipy.stats import norm

    w = params.weights.reshape(params.n_components, *([1] * x.ndim))
    mu = params.means.reshape(w.shape)
    sig = params.sigmas.reshape(w.shape)
    return (w * norm.cdf((x[None] - mu) / sig)).sum(0)


def kl_bin(counts: np.ndarray, edges: np.ndarray, params: NoiseParams) -> float:
    """Binned KL divergence from an empirical histogram to the mixture.

    ``counts`` are per-bin sample counts over ``edges`` (len = bins + 1);
    model mass per bin comes from Gaussian CDF differences, floored at 1e-12.
    Result is clamped at 0 (flooring can otherwise push it slightly negative).
    """
    counts = np.asarray(counts, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    if counts.ndim != 1 or edges.shape != (counts.size + 1,):
        raise ValueError("counts must be 1-D with len(edges) == len(counts) + 1")
    total = counts.sum()
    if total <= 0:
        raise ValueError("histogram is empty")
    p = counts / total
    cdf = _mixture_cdf(edges, params)
    q = np.maximum(np.diff(cdf), MIN_WEIGHT)
    mask = p > 0
    return max(float(np.sum(p[mask] * np.log(p[mask] / q[mask]))), 0.0)
