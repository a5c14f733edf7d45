"""Image I/O, dataset normalization, tiling, augmentation and synthetic data.

Two on-disk formats are supported: 16-bit binary PGM (P5) for
interoperability, and a raw little-endian float32 container ("BLIM") for
lossless round-trips. Normalization follows the mode/percentile scheme:
center on the dataset's modal value, scale by (95th percentile - mode).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BLIM_MAGIC = b"BLIM"
MAX_POOLED_SAMPLES = 10_000_000
_HIST_BINS = 1024

NOISE_MODELS = ("gaussian", "poisson_gaussian", "speckle", "skewed_exponential")

# Index convention for the 8 symmetries of the square: flip horizontally
# when idx >= 4, then rotate counter-clockwise by 90 * (idx % 4) degrees.
DIHEDRAL_IDS = tuple(range(8))
FLIP_ONLY_IDS = (0, 2, 4, 6)  # the non-transposing subset


class FormatError(ValueError):
    """Malformed or unsupported image file."""


@dataclass
class Image2D:
    """A single-channel float32 image with provenance tags."""

    values: np.ndarray
    source_depth: str = "float32"  # "u8" | "u16" | "float32"
    pair_id: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("Image2D needs a 2-D array")
        if min(self.values.shape) < 8:
            raise ValueError(f"image too small: {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("image contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def read_image(path: str | Path) -> Image2D:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == BLIM_MAGIC:
        return _read_blim(raw, path)
    if raw[:2] == b"P5":
        return _read_pgm(raw, path)
    raise FormatError(f"{path}: unrecognized image format")


def write_image(path: str | Path, image: Image2D) -> None:
    path = Path(path)
    if path.suffix == ".pgm":
        _write_pgm(path, image)
    elif path.suffix == ".blim":
        _write_blim(path, image)
    else:
        raise FormatError(f"{path}: unsupported output extension (use .pgm or .blim)")


def _read_blim(raw: bytes, path: Path) -> Image2D:
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    h = int.from_bytes(raw[4:8], "little")
    w = int.from_bytes(raw[8:12], "little")
    need = 12 + 4 * h * w
    if h < 1 or w < 1 or len(raw) < need:
        raise FormatError(f"{path}: truncated payload (want {need} bytes, have {len(raw)})")
    values = np.frombuffer(raw[12:need], dtype="<f4").reshape(h, w)
    return Image2D(values.copy(), source_depth="float32", pair_id=path.stem)


def _write_blim(path: Path, image: Image2D) -> None:
    h, w = image.values.shape
    payload = (BLIM_MAGIC + h.to_bytes(4, "little") + w.to_bytes(4, "little")
               + np.ascontiguousarray(image.values, dtype="<f4").tobytes())
    path.write_bytes(payload)


def _read_pgm(raw: bytes, path: Path) -> Image2D:
    # Header: "P5" <w> <h> <maxval>, tokens separated by whitespace/comments,
    # then a single whitespace byte before the samples.
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            eol = raw.find(b"\n", pos)
            if eol < 0:
                raise FormatError(f"{path}: unterminated comment")
            pos = eol + 1
            continue
        m = re.match(rb"\d+", raw[pos:])
        if not m:
            raise FormatError(f"{path}: malformed PGM header")
        tokens.append(int(m.group()))
        pos += m.end()
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing sample separator")
    pos += 1
    w, h, maxval = tokens
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    if not 1 <= maxval <= 65535:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    if maxval < 256:
        dtype, depth, itemsize = np.dtype(">u1"), "u8", 1
    else:
        dtype, depth, itemsize = np.dtype(">u2"), "u16", 2
    need = pos + h * w * itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload (want {need} bytes, have {len(raw)})")
    values = np.frombuffer(raw[pos:need], dtype=dtype).reshape(h, w).astype(np.float32)
    return Image2D(values, source_depth=depth, pair_id=path.stem)


def _write_pgm(path: Path, image: Image2D) -> None:
    samples = np.clip(np.rint(image.values), 0, 65535).astype(">u2")
    h, w = samples.shape
    path.write_bytes(f"P5\n{w} {h}\n65535\n".encode() + samples.tobytes())


def load_dir(directory: str | Path) -> list[Image2D]:
    """Read all .pgm/.blim files in a directory, sorted by filename."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"{directory}: not a directory")
    paths = sorted(p for p in directory.iterdir() if p.suffix in (".pgm", ".blim"))
    if not paths:
        raise FormatError(f"{directory}: no .pgm or .blim images found")
    return [read_image(p) for p in paths]


def read_manifest(path: str | Path) -> list[tuple[Path, Path]]:
    """Parse a pairing manifest: one "noisy_path<TAB>gt_path" line per pair."""
    pairs = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'noisy<TAB>gt'")
        pairs.append((base / parts[0], base / parts[1]))
    return pairs


@dataclass(frozen=True)
class NormalizationRecord:
    """Affine dataset normalization: subtract the mode, divide by (p95 - mode)."""

    center: float
    scale: float

    def __post_init__(self):
        if not np.isfinite(self.center) or not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"invalid normalization (center={self.center}, scale={self.scale})")

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return ((np.asarray(values, dtype=np.float32) - self.center) / self.scale).astype(np.float32)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float32) * self.scale + self.center).astype(np.float32)


def _pooled_pixels(dataset: list[Image2D]) -> np.ndarray:
    pool = np.concatenate([img.values.ravel() for img in dataset])
    if pool.size > MAX_POOLED_SAMPLES:
        stride = int(np.ceil(pool.size / MAX_POOLED_SAMPLES))
        pool = pool[::stride]
    return pool


def fit_normalization(dataset: list[Image2D]) -> NormalizationRecord:
    """Estimate the modal value and the 95th-percentile spread of a dataset.

    The mode is the midpoint of the fullest bin of a 1024-bin histogram over
    the global value range; the spread uses linearly interpolated percentiles
    of the pooled (possibly subsampled) pixels.
    """
    if not dataset:
        raise ValueError("empty dataset")
    pool = _pooled_pixels(dataset)
    lo, hi = float(pool.min()), float(pool.max())
    if hi <= lo:
        raise ValueError("constant dataset: cannot normalize (zero scale)")
    counts, edges = np.histogram(pool, bins=_HIST_BINS, range=(lo, hi))
    top = int(np.argmax(counts))
    center = float(0.5 * (edges[top] + edges[top + 1]))
    scale = float(np.percentile(pool, 95.0)) - center
    if scale <= 0:
        raise ValueError("degenerate dataset: 95th percentile does not exceed the mode")
    return NormalizationRecord(center=center, scale=scale)


@dataclass
class TileBatch:
    """Random square crops of one image, with origins and augmentation tags."""

    tiles: np.ndarray    # (n, t, t) float32
    origins: np.ndarray  # (n, 2) int, top-left (row, col) pre-augmentation
    aug_ids: np.ndarray  # (n,) int, dihedral index applied

    def __len__(self) -> int:
        return self.tiles.shape[0]


def make_tiles(image: Image2D, tile: int = 96, count: int = 100,
               rng: np.random.Generator | None = None) -> TileBatch:
    """Crop ``count`` tiles at uniformly random (possibly overlapping) origins."""
    if rng is None:
        raise ValueError("an rng is required")
    h, w = image.values.shape
    if h < tile or w < tile:
        raise ValueError(f"image {h}x{w} smaller than tile {tile}")
    ys = rng.integers(0, h - tile + 1, size=count)
    xs = rng.integers(0, w - tile + 1, size=count)
    tiles = np.stack([image.values[y:y + tile, x:x + tile] for y, x in zip(ys, xs)])
    return TileBatch(tiles=tiles.astype(np.float32),
                     origins=np.stack([ys, xs], axis=1),
                     aug_ids=np.zeros(count, dtype=int))


def dihedral_apply(arr, idx: int):
    """Apply symmetry ``idx`` of the square to the trailing two axes.

    Works on numpy arrays and torch tensors alike: horizontal flip first
    when idx >= 4, then counter-clockwise rotation by 90 * (idx % 4).
    """
    if not 0 <= idx <= 7:
        raise ValueError(f"dihedral index out of range: {idx}")
    import torch

    if isinstance(arr, torch.Tensor):
        out = torch.flip(arr, dims=(-1,)) if idx >= 4 else arr
        return torch.rot90(out, k=idx % 4, dims=(-2, -1))
    out = np.flip(arr, axis=-1) if idx >= 4 else arr
    return np.rot90(out, k=idx % 4, axes=(-2, -1))


def dihedral_inverse(idx: int) -> int:
    """Index of the inverse transform: rotations invert, flips are involutions."""
    if not 0 <= idx <= 7:
        raise ValueError(f"dihedral index out of range: {idx}")
    return (4 - idx) % 4 if idx < 4 else idx


def augment(tile: np.ndarray, rng: np.random.Generator,
            allow_transpose: bool = True) -> tuple[np.ndarray, int]:
    """Randomly transform a square tile; returns (tile, dihedral index).

    With allow_transpose=False only the four flip combinations are used,
    so row/column axes are never exchanged (for axis-correlated noise).
    """
    if tile.shape[-2] != tile.shape[-1]:
        raise ValueError("augment expects square tiles")
    choices = DIHEDRAL_IDS if allow_transpose else FLIP_ONLY_IDS
    idx = int(choices[rng.integers(len(choices))])
    return np.ascontiguousarray(dihedral_apply(tile, idx)), idx


def synth_noise(clean: Image2D, model: str, rng: np.random.Generator,
                dataset_min: float | None = None, *, sigma: float | None = None,
                alpha: float = 5.0, eta: float = 12.0,
                slope: float = 0.1) -> Image2D:
    """Corrupt a clean image with one of the synthetic noise models.

    gaussian:            Y = X + sigma * eps                  (sigma def. 20)
    poisson_gaussian:    Y = X + sqrt(alpha*(X - Xmin) + eta^2) * eps
    speckle:             Y = X + (X - Xmin) * eps, eps ~ N(0, sigma^2) (def. 0.405)
    skewed_exponential:  Y = X + slope * X * (E - 1), E ~ Exp(1)

    ``dataset_min`` is the ground-truth minimum over the whole dataset (Xmin);
    required by every model except gaussian.
    """
    x = clean.values.astype(np.float64)
    eps = rng.standard_normal(x.shape)
    if model == "gaussian":
        s = 20.0 if sigma is None else sigma
        noisy = x + s * eps
    elif model == "poisson_gaussian":
        if dataset_min is None:
            raise ValueError("poisson_gaussian needs dataset_min")
        var = alpha * (x - dataset_min) + eta * eta
        if np.any(var < 0):
            raise ValueError("negative variance: dataset_min exceeds some pixel")
        noisy = x + np.sqrt(var) * eps
    elif model == "speckle":
        if dataset_min is None:
            raise ValueError("speckle needs dataset_min")
        if np.any(x < dataset_min):
            raise ValueError("dataset_min exceeds some pixel")
        s = 0.405 if sigma is None else sigma
        noisy = x + (x - dataset_min) * s * eps
    elif model == "skewed_exponential":
        shifted = rng.exponential(1.0, size=x.shape) - 1.0
        noisy = x + slope * x * shifted
    else:
        raise ValueError(f"unknown noise model {model!r}; choose from {NOISE_MODELS}")
    return Image2D(noisy.astype(np.float32), pair_id=clean.pair_id)


def generate_phantom(height: int, width: int, rng: np.random.Generator,
                     blob_count: int = 40, intensity_range: tuple[float, float] = (20.0, 900.0),
                     background: float = 100.0,
                     blob_sigma_range: tuple[float, float] = (1.2, 9.0)) -> Image2D:
    """Random smooth test image: anisotropic Gaussian blobs on a flat background.

    Blob amplitudes are log-uniform over ``intensity_range``, giving a value
    histogram with a sharp background mode and a long bright tail.
    """
    if min(height, width) < 32:
        raise ValueError("phantom dims must be >= 32")
    img = np.full((height, width), background, dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    lo, hi = intensity_range
    slo, shi = blob_sigma_range
    for _ in range(blob_count):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        amp = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        s1 = float(np.exp(rng.uniform(np.log(slo), np.log(shi))))
        s2 = float(np.exp(rng.uniform(np.log(slo), np.log(shi))))
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        img += amp * np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2))
    return Image2D(img.astype(np.float32))
