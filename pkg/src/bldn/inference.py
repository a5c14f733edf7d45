"""Full-image denoising: single pass or symmetry-ensembled, no masking.

Images are reflect-padded to the pooling granularity, pushed through the
denoiser, and cropped back; the noise head then maps the denoised values to
per-pixel distribution parameters. All outputs are returned in the original
(denormalized) intensity units.
"""

from __future__ import annotations

import numpy as np
import torch

from .data import DIHEDRAL_IDS, FLIP_ONLY_IDS, Image2D, dihedral_apply, dihedral_inverse
from .networks import NetworkBundle
from .noise_model import NoiseParams


def _require_norm(bundle: NetworkBundle):
    if bundle.norm is None:
        raise ValueError("bundle has no normalization record; cannot run inference")
    return bundle.norm


def _pad_to_grid(values: np.ndarray, levels: int) -> tuple[np.ndarray, tuple[int, int]]:
    div = 2 ** levels
    minimum = 2 * div
    h, w = values.shape
    ph = max(-h % div, minimum - h if h < minimum else 0)
    pw = max(-w % div, minimum - w if w < minimum else 0)
    if ph or pw:
        values = np.pad(values, ((0, ph), (0, pw)), mode="reflect")
    return values, (h, w)


def _denoise_array(bundle: NetworkBundle, normalized: np.ndarray) -> np.ndarray:
    """D-net forward on one normalized image, handling padding; float32 out."""
    padded, (h, w) = _pad_to_grid(normalized, bundle.dnet.config.levels)
    with torch.no_grad():
        out = bundle.dnet(torch.from_numpy(padded[None, None].copy()))
    return out[0, 0, :h, :w].numpy()


def predict(bundle: NetworkBundle, image: Image2D) -> tuple[Image2D, NoiseParams]:
    """Single-pass denoising plus the per-pixel noise distribution."""
    norm = _require_norm(bundle)
    mu = _denoise_array(bundle, norm.normalize(image.values))
    params = bundle.nnet.predict_params(torch.from_numpy(mu[None, None]))
    denoised = Image2D(norm.denormalize(mu), pair_id=image.pair_id)
    return denoised, params.scaled(norm.scale)


def predict_dihedral(bundle: NetworkBundle, image: Image2D) -> Image2D:
    """Denoise as the average over the bundle's symmetry group.

    Uses all 8 square symmetries, or only the 4 non-transposing ones when the
    bundle was trained without transposition. Averaging over a closed group
    makes the result equivariant: predict_dihedral(g(x)) = g(predict_dihedral(x))
    up to float accumulation order (the sum runs in float64).
    """
    norm = _require_norm(bundle)
    normalized = norm.normalize(image.values)
    group = DIHEDRAL_IDS if bundle.allow_transpose else FLIP_ONLY_IDS
    terms = []
    for idx in group:
        transformed = np.ascontiguousarray(dihedral_apply(normalized, idx))
        mu = _denoise_array(bundle, transformed)
        terms.append(dihedral_apply(mu, dihedral_inverse(idx)).astype(np.float64))
    # Per-pixel value-sorted summation: the term multiset is the same whether
    # the input was pre-transformed or not, so sorting fixes the addition
    # order and the group average becomes exactly equivariant.
    stacked = np.sort(np.stack(terms), axis=0)
    mean = (stacked.sum(axis=0) / len(group)).astype(np.float32)
    return Image2D(norm.denormalize(mean), pair_id=image.pair_id)
