"""Quality metrics and the binned noise diagnostics.

PSNR and SSIM both use the per-image ground-truth value range as the dynamic
range. The noise report bins pixels by their reference (clean) value, compares
empirical noise moments per bin against the moments predicted by one or more
trained models, and scores each bin's fit with a histogram KL divergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate, gaussian_filter
from scipy.stats import skew as _pearson_skew

from .data import Image2D
from .networks import NetworkBundle
from .noise_model import NoiseParams, kl_bin, mixture_moments

SIGNAL_PERCENTILE = 99.5
CONFIDENT_COUNT = 100


def psnr(pred: Image2D | np.ndarray, gt: Image2D | np.ndarray) -> float:
    """10*log10(d^2 / MSE) with d the ground-truth value range; inf if equal."""
    p = pred.values if isinstance(pred, Image2D) else np.asarray(pred)
    g = gt.values if isinstance(gt, Image2D) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    mse = float(np.mean((p.astype(np.float64) - g.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    d = float(g.max()) - float(g.min())
    if d == 0.0:
        return -math.inf
    return 10.0 * math.log10(d * d / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    taps /= taps.sum()
    return np.outer(taps, taps)


def ssim(pred: Image2D | np.ndarray, gt: Image2D | np.ndarray,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    The window half-width is cropped from the borders before averaging, so
    only fully supported neighborhoods count.
    """
    p = (pred.values if isinstance(pred, Image2D) else np.asarray(pred)).astype(np.float64)
    g = (gt.values if isinstance(gt, Image2D) else np.asarray(gt)).astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if min(p.shape) < 11:
        raise ValueError("images must be at least 11x11 for SSIM")
    window = _gaussian_window()
    pad = window.shape[0] // 2
    data_range = float(g.max() - g.min())
    if data_range == 0.0 and np.array_equal(p, g):
        return 1.0

    def smooth(a: np.ndarray) -> np.ndarray:
        return correlate(a, window, mode="constant")

    ux, uy = smooth(p), smooth(g)
    vxx = smooth(p * p) - ux * ux
    vyy = smooth(g * g) - uy * uy
    vxy = smooth(p * g) - ux * uy
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)
         / ((ux * ux + uy * uy + c1) * (vxx + vyy + c2)))
    return float(s[pad:-pad, pad:-pad].mean())


@dataclass(frozen=True)
class BaselineResult:
    sigma: float
    psnr: float
    ssim: float


def gaussian_baseline(noisy_set: list[Image2D], gt_set: list[Image2D],
                      sigma_grid: np.ndarray | None = None) -> BaselineResult:
    """Best-PSNR Gaussian blur over a sigma sweep (the classical baseline)."""
    if not noisy_set or len(noisy_set) != len(gt_set):
        raise ValueError("need equally sized, non-empty image sets")
    if sigma_grid is None:
        sigma_grid = np.round(np.arange(0.3, 5.0 + 1e-9, 0.1), 10)
    best: BaselineResult | None = None
    for sigma in sigma_grid:
        blurred = [gaussian_filter(n.values.astype(np.float64), float(sigma),
                                   truncate=4.0, mode="reflect")
                   for n in noisy_set]
        mean_psnr = float(np.mean([psnr(b, g) for b, g in zip(blurred, gt_set)]))
        if best is None or mean_psnr > best.psnr:
            mean_ssim = float(np.mean([ssim(b, g) for b, g in zip(blurred, gt_set)]))
            best = BaselineResult(sigma=float(sigma), psnr=mean_psnr, ssim=mean_ssim)
    return best


@dataclass
class BinRow:
    index: int
    lo: float
    hi: float
    x_median: float
    count: int
    confident: bool
    emp_mean: float
    emp_std: float
    emp_skew: float
    pred_std: dict = field(default_factory=dict)   # variant name -> value
    pred_skew: dict = field(default_factory=dict)
    kl: dict = field(default_factory=dict)


@dataclass
class BinnedNoiseReport:
    edges: np.ndarray
    cutoff: float                  # the 99.5th-percentile signal value used
    percentile: float
    rows: list[BinRow]
    variants: tuple[str, ...] = ()

    def confident_rows(self) -> list[BinRow]:
        return [r for r in self.rows if r.confident]

    def median_kl(self, variant: str) -> float:
        values = [r.kl[variant] for r in self.confident_rows() if variant in r.kl]
        if not values:
            raise ValueError(f"no confident bins carry KL for {variant!r}")
        return float(np.median(values))

    def to_tsv(self, path: str | Path) -> None:
        cols = ["bin", "lo", "hi", "x_median", "count", "confident",
                "emp_mean", "emp_std", "emp_skew"]
        for name in self.variants:
            cols += [f"pred_std_{name}", f"pred_skew_{name}", f"kl_{name}"]
        lines = ["\t".join(cols)]
        for r in self.rows:
            cells = [str(r.index), f"{r.lo:.6g}", f"{r.hi:.6g}", f"{r.x_median:.6g}",
                     str(r.count), str(int(r.confident)), f"{r.emp_mean:.6g}",
                     f"{r.emp_std:.6g}", f"{r.emp_skew:.6g}"]
            for name in self.variants:
                cells += [f"{r.pred_std.get(name, float('nan')):.6g}",
                          f"{r.pred_skew.get(name, float('nan')):.6g}",
                          f"{r.kl.get(name, float('nan')):.6g}"]
            lines.append("\t".join(cells))
        Path(path).write_text("\n".join(lines) + "\n")


def _as_bundles(bundles) -> dict[str, NetworkBundle]:
    if bundles is None:
        return {}
    if isinstance(bundles, NetworkBundle):
        return {"model": bundles}
    return dict(bundles)


def noise_report(noisy_set: list[Image2D], reference_set: list[Image2D],
                 bundles=None, bins: int = 64,
                 noise_bins: int = 64) -> BinnedNoiseReport:
    """Bin pixels by reference value and profile the noise in each bin.

    ``bundles`` may be None, a single NetworkBundle, or a {name: bundle}
    mapping; each contributes predicted std/skewness and a per-bin KL column.
    The model parameters for a bin are evaluated at the mean denoised value
    of that bin's pixels.
    """
    from .inference import predict

    if not noisy_set or len(noisy_set) != len(reference_set):
        raise ValueError("need equally sized, non-empty image sets")
    variants = _as_bundles(bundles)
    x = np.concatenate([r.values.ravel().astype(np.float64) for r in reference_set])
    y = np.concatenate([n.values.ravel().astype(np.float64) for n in noisy_set])
    noise = y - x
    cutoff = float(np.percentile(x, SIGNAL_PERCENTILE))
    lo = float(x.min())
    if cutoff <= lo:
        raise ValueError("degenerate reference values: percentile equals minimum")
    edges = np.linspace(lo, cutoff, bins + 1)
    included = x <= cutoff
    # right-inclusive last bin so the cutoff pixel itself still counts
    bin_index = np.clip(np.searchsorted(edges, x[included], side="right") - 1, 0, bins - 1)

    denoised = {}
    for name, bundle in variants.items():
        per_image = [predict(bundle, img)[0].values.ravel().astype(np.float64)
                     for img in noisy_set]
        denoised[name] = np.concatenate(per_image)[included]

    noise_in = noise[included]
    x_in = x[included]
    rows = []
    for b in range(bins):
        sel = bin_index == b
        count = int(sel.sum())
        row = BinRow(index=b, lo=float(edges[b]), hi=float(edges[b + 1]),
                     x_median=float(np.median(x_in[sel])) if count else float("nan"),
                     count=count, confident=count >= CONFIDENT_COUNT,
                     emp_mean=float(noise_in[sel].mean()) if count else float("nan"),
                     emp_std=float(noise_in[sel].std(ddof=1)) if count > 1 else float("nan"),
                     emp_skew=float(_pearson_skew(noise_in[sel])) if count > 2 else float("nan"))
        for name, bundle in variants.items():
            if count == 0:
                continue
            center, scale = bundle.norm.center, bundle.norm.scale
            m_bar = float(denoised[name][sel].mean())
            z = (m_bar - center) / scale
            params = bundle.nnet.predict_params(
                torch.tensor([[[[z]]]], dtype=torch.float32)).scaled(scale)
            flat = NoiseParams(params.weights.reshape(-1, 1)[:, 0],
                               params.means.reshape(-1, 1)[:, 0],
                               params.sigmas.reshape(-1, 1)[:, 0])
            _, var, skw = mixture_moments(flat)
            row.pred_std[name] = float(np.sqrt(var))
            row.pred_skew[name] = float(skw)
            counts, nedges = np.histogram(noise_in[sel], bins=noise_bins)
            row.kl[name] = kl_bin(counts, nedges, flat)
        rows.append(row)
    return BinnedNoiseReport(edges=edges, cutoff=cutoff, percentile=SIGNAL_PERCENTILE,
                             rows=rows, variants=tuple(variants))
