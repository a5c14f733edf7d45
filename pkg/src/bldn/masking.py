"""Grid masking for self-supervised training.

A random sparse grid of pixels is selected, their values replaced by a
weighted average of neighbours (never including the pixel itself), and the
loss is later evaluated only at those pixels. The minimum grid spacing of 3
guarantees no two masked pixels are neighbours, so a masked input carries no
information about the observed values it hides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

REPLACEMENT_MODES = ("gaussian8", "uniform8", "axial")
AXIS_CHOICES = ("rows", "cols")
AXIAL_EXTENT = 3


@dataclass(frozen=True)
class MaskPlan:
    """One sampled masking grid: spacings, phases and the grid raster."""

    spacing: tuple[int, int]
    phase: tuple[int, int]
    mask: np.ndarray  # bool (H, W), True at grid positions

    @property
    def positions(self) -> np.ndarray:
        """Grid positions as an (n, 2) array of (row, col)."""
        return np.argwhere(self.mask)

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def sample_grid(height: int, width: int, rng: np.random.Generator,
                spacing_min: int = 3, spacing_max: int = 5) -> MaskPlan:
    """Draw independent per-axis spacings and uniform phases.

    Spacings are uniform on {spacing_min..spacing_max} per axis; with the
    default 3..5 range the expected masked fraction is
    ((1/3 + 1/4 + 1/5)/3)^2, about 6.8%.
    """
    if not 1 <= spacing_min <= spacing_max:
        raise ValueError("need 1 <= spacing_min <= spacing_max")
    if min(height, width) < spacing_max:
        raise ValueError("image smaller than the maximum spacing")
    sy = int(rng.integers(spacing_min, spacing_max + 1))
    sx = int(rng.integers(spacing_min, spacing_max + 1))
    py, px = int(rng.integers(sy)), int(rng.integers(sx))
    mask = np.zeros((height, width), dtype=bool)
    mask[py::sy, px::sx] = True
    return MaskPlan(spacing=(sy, sx), phase=(py, px), mask=mask)


def expected_fraction(spacing_min: int = 3, spacing_max: int = 5) -> float:
    """Closed-form expected masked fraction for per-axis uniform spacing."""
    inv = np.mean([1.0 / s for s in range(spacing_min, spacing_max + 1)])
    return float(inv ** 2)


def _neighbor_kernel(mode: str, axis: str | None) -> np.ndarray:
    """3x3 replacement weights; the centre is always zero."""
    if mode == "gaussian8":
        yy, xx = np.mgrid[-1:2, -1:2]
        k = np.exp(-(yy ** 2 + xx ** 2) / 2.0)
    elif mode == "uniform8":
        k = np.ones((3, 3))
    elif mode == "axial":
        if axis not in AXIS_CHOICES:
            raise ValueError(f"axial mode needs axis in {AXIS_CHOICES}")
        k = np.ones((3, 3))
        if axis == "rows":  # noise correlated along rows: drop left/right
            k[1, 0] = k[1, 2] = 0.0
        else:  # correlated along columns: drop up/down
            k[0, 1] = k[2, 1] = 0.0
    else:
        raise ValueError(f"unknown mode {mode!r}; choose from {REPLACEMENT_MODES}")
    k[1, 1] = 0.0
    return k


def replacement_values(image: np.ndarray, mode: str = "gaussian8",
                       axis: str | None = None) -> np.ndarray:
    """Neighbour-average image used to fill masked pixels.

    At borders the weights of out-of-frame neighbours are dropped and the
    remainder renormalized, so every value is a convex combination of
    in-frame neighbours and never involves the pixel itself.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError("expected a 2-D image")
    if image.size < 2:
        raise ValueError("image has no neighbours to average")
    k = _neighbor_kernel(mode, axis)
    num = correlate(image.astype(np.float64), k, mode="constant", cval=0.0)
    den = correlate(np.ones(image.shape, dtype=np.float64), k,
                    mode="constant", cval=0.0)
    return (num / den).astype(np.float32)


def replacement_value(image: np.ndarray, pos: tuple[int, int],
                      mode: str = "gaussian8", axis: str | None = None) -> float:
    """Replacement value for a single pixel (convenience over the full map)."""
    return float(replacement_values(image, mode, axis)[pos])


def _axial_extension(mask: np.ndarray, axis: str) -> np.ndarray:
    """Grow each masked pixel along the correlation axis by AXIAL_EXTENT."""
    grown = mask.copy()
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    for d in range(1, AXIAL_EXTENT + 1):
        for s in (-d, d):
            if axis == "rows":
                xs2 = xs + s
                ok = (xs2 >= 0) & (xs2 < w)
                grown[ys[ok], xs2[ok]] = True
            else:
                ys2 = ys + s
                ok = (ys2 >= 0) & (ys2 < h)
                grown[ys2[ok], xs[ok]] = True
    return grown


def apply_mask(image: np.ndarray, plan: MaskPlan, mode: str = "gaussian8",
               axis: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return (masked image, loss mask).

    Replacement values are always computed from the original image. In
    axial mode each grid pixel's run of +-3 pixels along the correlation
    axis is replaced as well, and those positions join the loss mask.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.shape != plan.mask.shape:
        raise ValueError("image and mask shapes differ")
    fill = replacement_values(image, mode, axis)
    loss_mask = plan.mask
    if mode == "axial":
        loss_mask = _axial_extension(plan.mask, axis)
    out = image.copy()
    out[loss_mask] = fill[loss_mask]
    return out, loss_mask.copy()
