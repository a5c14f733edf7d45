"""The denoiser (D-net) and per-pixel noise head (N-net), plus checkpoints.

D-net is a U-net variant: zero-padded 3x3 convolution blocks, 2x2 max-pool
contractions, nearest-neighbor expansions each followed by a 2x2 convolution,
skip concatenations, and a 1x1 tail. The finest decoder level carries no 3x3
convolutions and the bottleneck has exactly one: this is what pins the
dependency window of an output pixel to 35x35 (and at most 41x41 at the
worst sub-lattice phase) instead of letting it sprawl.

N-net is a per-pixel MLP written as 1x1 convolutions: a shared trunk of
tanh/leaky-ReLU blocks and, for mixtures, three branch blocks feeding the
sigma / weight / mean heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NormalizationRecord
from .noise_model import MIN_WEIGHT, NoiseParams
from .tensor_ops import ParamSet, apply_activation, pool2, upsample_nearest

CHECKPOINT_MAGIC = b"BLDN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DNetConfig:
    base_filters: int = 64
    levels: int = 2
    convs_per_block: int = 2  # 3x3 convs in each encoder block and coarse decoder block
    tail_layers: int = 2      # 1x1/ReLU layers before the linear output

    def __post_init__(self):
        if self.levels < 1 or self.base_filters < 1 or self.convs_per_block < 1:
            raise ValueError(f"invalid D-net config: {self}")


@dataclass(frozen=True)
class NNetConfig:
    components: int = 1
    hidden: int = 64
    blocks: int = 3

    def __post_init__(self):
        if self.components not in (1, 2, 3):
            raise ValueError("mixture components must be 1, 2 or 3")
        if self.hidden < 1 or self.blocks < 2:
            raise ValueError(f"invalid N-net config: {self}")


def _he_uniform_(conv: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=gen)
        conv.bias.zero_()


def _conv(in_ch: int, out_ch: int, k: int, gen: torch.Generator) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, k, padding=k // 2 if k % 2 else 0)
    _he_uniform_(conv, gen)
    return conv


class DNet(nn.Module):
    """Denoiser producing the per-pixel estimate of the clean signal."""

    def __init__(self, config: DNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        f = config.base_filters

        self.enc_blocks = nn.ModuleList()
        in_ch = 1
        for _ in range(config.levels):
            block = nn.ModuleList()
            for _ in range(config.convs_per_block):
                block.append(_conv(in_ch, f, 3, gen))
                in_ch = f
            self.enc_blocks.append(block)
        self.bottleneck = _conv(f, f, 3, gen)
        self.up_convs = nn.ModuleList(_conv(f, f, 2, gen) for _ in range(config.levels))
        self.dec_blocks = nn.ModuleList()
        for level in range(1, config.levels):
            block = nn.ModuleList()
            in_ch = 2 * f
            for _ in range(config.convs_per_block):
                block.append(_conv(in_ch, f, 3, gen))
                in_ch = f
            self.dec_blocks.append(block)  # dec_blocks[level-1] serves level
        self.tail = nn.ModuleList()
        in_ch = 2 * f
        for _ in range(config.tail_layers):
            self.tail.append(_conv(in_ch, f, 1, gen))
            in_ch = f
        self.out_conv = _conv(in_ch, 1, 1, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        div = 2 ** self.config.levels
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B,1,H,W), got {tuple(x.shape)}")
        if x.shape[-2] % div or x.shape[-1] % div or min(x.shape[-2:]) < 2 * div:
            raise ValueError(
                f"spatial dims {tuple(x.shape[-2:])} must be multiples of {div} and >= {2 * div}")
        skips = []
        h = x
        for block in self.enc_blocks:
            for conv in block:
                h = F.relu(conv(h))
            skips.append(h)
            h = pool2(h)
        h = F.relu(self.bottleneck(h))
        for level in reversed(range(self.config.levels)):
            h = upsample_nearest(h)
            h = F.pad(h, (0, 1, 0, 1))
            h = F.relu(self.up_convs[level](h))
            h = torch.cat([h, skips[level]], dim=1)
            if level > 0:
                for conv in self.dec_blocks[level - 1]:
                    h = F.relu(conv(h))
        for conv in self.tail:
            h = F.relu(conv(h))
        return self.out_conv(h)


class NNet(nn.Module):
    """Per-pixel noise-distribution head evaluated on the denoised value."""

    def __init__(self, config: NNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed + 1)
        n, hid = config.components, config.hidden

        def block(in_ch: int) -> nn.ModuleList:
            return nn.ModuleList([_conv(in_ch, hid, 1, gen), _conv(hid, hid, 1, gen)])

        shared = config.blocks if n == 1 else config.blocks - 1
        self.trunk = nn.ModuleList()
        in_ch = 1
        for _ in range(shared):
            self.trunk.append(block(in_ch))
            in_ch = hid
        if n == 1:
            self.branches = nn.ModuleDict()
        else:
            self.branches = nn.ModuleDict({name: block(hid) for name in ("sigma", "alpha", "mu")})
        self.sigma_head = _conv(hid, n, 1, gen)
        self.alpha_head = _conv(hid, 1 if n == 2 else n, 1, gen) if n > 1 else None
        self.mu_head = _conv(hid, n - 1, 1, gen) if n > 1 else None
        self.degenerate_pixels = 0  # pixels whose last mixture weight hit the floor

    @staticmethod
    def _run_block(block: nn.ModuleList, h: torch.Tensor) -> torch.Tensor:
        h = apply_activation(block[0](h), "tanh")
        return apply_activation(block[1](h), "leaky_relu_0.1")

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Map denoised values to per-pixel (weights, means, sigmas), each (B,N,H,W)."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B,1,H,W), got {tuple(x.shape)}")
        n = self.config.components
        h = x
        for blk in self.trunk:
            h = self._run_block(blk, h)
        if n == 1:
            sigmas = torch.exp(self.sigma_head(h))
            weights = torch.ones_like(sigmas)
            means = torch.zeros_like(sigmas)
            return weights, means, sigmas

        h_sigma = self._run_block(self.branches["sigma"], h)
        h_alpha = self._run_block(self.branches["alpha"], h)
        h_mu = self._run_block(self.branches["mu"], h)
        sigmas = torch.exp(self.sigma_head(h_sigma))
        if n == 2:
            a = torch.sigmoid(self.alpha_head(h_alpha))
            weights = torch.cat([a, 1.0 - a], dim=1)
        else:
            weights = torch.softmax(self.alpha_head(h_alpha), dim=1)
        free = self.mu_head(h_mu)
        partial = (weights[:, :-1] * free).sum(dim=1, keepdim=True)
        last_w = weights[:, -1:]
        with torch.no_grad():
            self.degenerate_pixels += int((last_w < MIN_WEIGHT).sum())
        last_mu = -partial / last_w.clamp(min=MIN_WEIGHT)
        means = torch.cat([free, last_mu], dim=1)
        return weights, means, sigmas

    def predict_params(self, x: torch.Tensor) -> NoiseParams:
        """Forward pass packaged as NoiseParams (component axis first)."""
        with torch.no_grad():
            weights, means, sigmas = self.forward(x)
        if weights.shape[0] != 1:
            raise ValueError("predict_params expects a single-image batch")
        return NoiseParams(weights[0].double().numpy(),
                           means[0].double().numpy(),
                           sigmas[0].double().numpy())


@dataclass
class NetworkBundle:
    """Everything needed to denoise: both networks plus dataset normalization."""

    dnet: DNet
    nnet: NNet
    norm: NormalizationRecord | None = None
    meta: dict = field(default_factory=dict)

    @property
    def allow_transpose(self) -> bool:
        return bool(int(self.meta.get("allow_transpose", 1)))

    def params(self) -> ParamSet:
        return ParamSet.from_modules(dnet=self.dnet, nnet=self.nnet)


def build_bundle(dnet_config: DNetConfig | None = None,
                 nnet_config: NNetConfig | None = None,
                 norm: NormalizationRecord | None = None,
                 seed: int = 0, **meta) -> NetworkBundle:
    dnet_config = dnet_config or DNetConfig()
    nnet_config = nnet_config or NNetConfig()
    meta.setdefault("seed", seed)
    return NetworkBundle(dnet=DNet(dnet_config, seed=seed),
                         nnet=NNet(nnet_config, seed=seed),
                         norm=norm, meta=dict(meta))


# --- dependency-window measurement -----------------------------------------

def _union_shifts(mask: np.ndarray, offsets) -> np.ndarray:
    """Union of the mask with copies of itself shifted by each offset (zero fill)."""
    out = mask.copy()
    h, w = mask.shape
    for dy, dx in offsets:
        ys = slice(max(dy, 0), h + min(dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        ys_src = slice(max(-dy, 0), h + min(-dy, 0))
        xs_src = slice(max(-dx, 0), w + min(-dx, 0))
        out[ys, xs] |= mask[ys_src, xs_src]
    return out


def _dilate_odd(mask: np.ndarray) -> np.ndarray:
    """Backward dependency of a zero-padded 3x3 convolution."""
    offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    return _union_shifts(mask, offsets)


def _dilate_conv2(mask: np.ndarray) -> np.ndarray:
    """Backward dependency of the pad-right 2x2 convolution."""
    return _union_shifts(mask, ((0, 1), (1, 0), (1, 1)))


def dependency_mask(config: DNetConfig, size: int, pixel: tuple[int, int]) -> np.ndarray:
    """Input pixels that can influence the D-net output at ``pixel``.

    Propagates a boolean raster backward through the exact layer sequence of
    the forward pass (skip branches included). Pure structure — independent
    of weights, so it upper-bounds the true dependence and is attained for
    generic weights.
    """
    div = 2 ** config.levels
    if size % div:
        raise ValueError(f"size must be a multiple of {div}")
    dep = np.zeros((size, size), dtype=bool)
    dep[pixel] = True

    skip_deps: list[np.ndarray | None] = [None] * config.levels
    # Decoder, reversed: finest level first.
    for level in range(config.levels):
        if level > 0:
            for _ in range(config.convs_per_block):
                dep = _dilate_odd(dep)
        skip_deps[level] = dep.copy()
        dep = _dilate_conv2(dep)
        # upsample backward: output block (2i, 2i+1) depends on input i
        dep = dep.reshape(dep.shape[0] // 2, 2, dep.shape[1] // 2, 2).any(axis=(1, 3))
    # Bottleneck, then the encoder, reversed: coarsest level first.
    dep = _dilate_odd(dep)
    for level in reversed(range(config.levels)):
        dep = np.repeat(np.repeat(dep, 2, axis=0), 2, axis=1)  # pool backward
        dep |= skip_deps[level]
        for _ in range(config.convs_per_block):
            dep = _dilate_odd(dep)
    return dep


def measure_receptive_field(config: DNetConfig, phase: int = 0, size: int = 64) -> int:
    """Chebyshev dependency radius of an output pixel at the given lattice phase.

    The pooling lattice repeats with period 2^levels; the recorded window
    (2R+1) uses phase 0, where the dependency square is symmetric.
    """
    period = 2 ** config.levels
    anchor = (size // 2 // period) * period + phase
    dep = dependency_mask(config, size, (anchor, anchor))
    ys, xs = np.nonzero(dep)
    return int(max(np.abs(ys - anchor).max(), np.abs(xs - anchor).max()))


# --- checkpoint serialization -----------------------------------------------

_META_ORDER = ("dnet.base_filters", "dnet.levels", "dnet.convs_per_block",
               "dnet.tail_layers", "nnet.components", "nnet.hidden", "nnet.blocks")


def save_bundle(path: str | Path, bundle: NetworkBundle) -> None:
    """Write a checkpoint: magic, version, text metadata, named float32 arrays."""
    meta: dict[str, str] = {}
    cfg_d, cfg_n = bundle.dnet.config, bundle.nnet.config
    for key in _META_ORDER:
        section, name = key.split(".")
        cfg = cfg_d if section == "dnet" else cfg_n
        attr = {"base_filters": "base_filters", "levels": "levels",
                "convs_per_block": "convs_per_block", "tail_layers": "tail_layers",
                "components": "components", "hidden": "hidden", "blocks": "blocks"}[name]
        meta[key] = str(getattr(cfg, attr))
    if bundle.norm is not None:
        meta["norm.center"] = repr(float(bundle.norm.center))
        meta["norm.scale"] = repr(float(bundle.norm.scale))
    for key, value in bundle.meta.items():
        meta[f"x.{key}"] = str(value)

    chunks = [CHECKPOINT_MAGIC, CHECKPOINT_VERSION.to_bytes(4, "little")]
    text = "".join(f"{k}={v}\n" for k, v in sorted(meta.items())).encode()
    chunks += [len(text).to_bytes(4, "little"), text]

    arrays = {f"dnet.{n}": p for n, p in bundle.dnet.state_dict().items()}
    arrays |= {f"nnet.{n}": p for n, p in bundle.nnet.state_dict().items()}
    chunks.append(len(arrays).to_bytes(4, "little"))
    for name, tensor in arrays.items():
        data = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f4")
        encoded = name.encode()
        chunks.append(len(encoded).to_bytes(2, "little"))
        chunks.append(encoded)
        chunks.append(len(data.shape).to_bytes(1, "little"))
        for dim in data.shape:
            chunks.append(int(dim).to_bytes(4, "little"))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def load_bundle(path: str | Path) -> NetworkBundle:
    raw = Path(path).read_bytes()
    view = memoryview(raw)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise CheckpointError(f"{path}: truncated checkpoint")
        part, view = view[:n], view[n:]
        return part

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int.from_bytes(take(4), "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta_len = int.from_bytes(take(4), "little")
    meta_text = bytes(take(meta_len)).decode()
    meta: dict[str, str] = {}
    for line in meta_text.splitlines():
        key, _, value = line.partition("=")
        if not key or not _:
            raise CheckpointError(f"{path}: bad metadata line {line!r}")
        meta[key] = value

    try:
        dnet_config = DNetConfig(base_filters=int(meta["dnet.base_filters"]),
                                 levels=int(meta["dnet.levels"]),
                                 convs_per_block=int(meta["dnet.convs_per_block"]),
                                 tail_layers=int(meta["dnet.tail_layers"]))
        nnet_config = NNetConfig(components=int(meta["nnet.components"]),
                                 hidden=int(meta["nnet.hidden"]),
                                 blocks=int(meta["nnet.blocks"]))
    except KeyError as missing:
        raise CheckpointError(f"{path}: missing metadata key {missing}") from None
    norm = None
    if "norm.center" in meta:
        norm = NormalizationRecord(center=float(meta["norm.center"]),
                                   scale=float(meta["norm.scale"]))
    extras = {k[2:]: v for k, v in meta.items() if k.startswith("x.")}

    arrays: dict[str, torch.Tensor] = {}
    count = int.from_bytes(take(4), "little")
    for _ in range(count):
        name_len = int.from_bytes(take(2), "little")
        name = bytes(take(name_len)).decode()
        ndim = int.from_bytes(take(1), "little")
        shape = tuple(int.from_bytes(take(4), "little") for _ in range(ndim))
        numel = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * numel), dtype="<f4").reshape(shape)
        arrays[name] = torch.from_numpy(data.copy())
    if len(view):
        raise CheckpointError(f"{path}: {len(view)} trailing bytes")

    bundle = NetworkBundle(dnet=DNet(dnet_config), nnet=NNet(nnet_config),
                           norm=norm, meta=extras)
    dnet_state = {n[5:]: t for n, t in arrays.items() if n.startswith("dnet.")}
    nnet_state = {n[5:]: t for n, t in arrays.items() if n.startswith("nnet.")}
    try:
        bundle.dnet.load_state_dict(dnet_state)
        bundle.nnet.load_state_dict(nnet_state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameter mismatch ({exc})") from None
    return bundle
