"""Joint self-supervised training of the denoiser and the noise head.

Each step draws one image, crops a batch of augmented tiles, masks a fresh
grid per tile, and minimizes the masked negative log-likelihood with Adam.
The learning rate halves whenever the epoch-mean training loss plateaus for
30 epochs; the returned weights are always those of the last epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import masking
from .data import Image2D, NormalizationRecord, augment, fit_normalization, make_tiles
from .networks import (DNetConfig, NetworkBundle, NNetConfig, build_bundle,
                       measure_receptive_field, save_bundle)
from .noise_model import gmm_nll
from .tensor_ops import AdamState, NonFiniteGradientError, ParamSet, adam_step

MAX_NONFINITE_STREAK = 50


@dataclass
class TrainConfig:
    epochs: int = 400
    steps_per_epoch: int = 200
    tiles_per_step: int = 100
    tile_size: int = 96
    lr_initial: float = 4e-4
    lr_floor: float = 1e-6
    plateau_patience: int = 30          # epochs without improvement before halving
    plateau_rel_improvement: float = 1e-5
    spacing_min: int = 3
    spacing_max: int = 5
    replacement_mode: str = "gaussian8"
    axis: str | None = None             # correlation axis, axial mode only
    mixture_components: int = 1
    # None means "resolve from the replacement mode": axial noise forbids
    # transposing augmentations (they would swap the correlation axis)
    allow_transpose: bool | None = None
    seed: int = 0
    stop_nnet_gradient: bool = False    # ablation: detach sigma branch from D-net
    base_filters: int = 64
    levels: int = 2
    convs_per_block: int = 2
    tail_layers: int = 2
    nnet_hidden: int = 64
    nnet_blocks: int = 3
    checkpoint_every: int = 100         # epochs between periodic checkpoint writes

    def __post_init__(self):
        positive = ("epochs", "steps_per_epoch", "tiles_per_step", "tile_size",
                    "lr_initial", "lr_floor", "plateau_patience", "spacing_min",
                    "base_filters", "levels", "nnet_hidden", "nnet_blocks",
                    "checkpoint_every")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_floor >= self.lr_initial:
            raise ValueError("lr_floor must be below lr_initial")
        if self.replacement_mode not in masking.REPLACEMENT_MODES:
            raise ValueError(f"unknown replacement mode {self.replacement_mode!r}")
        if self.allow_transpose is None:
            self.allow_transpose = self.replacement_mode != "axial"
        if self.replacement_mode == "axial":
            if self.axis not in masking.AXIS_CHOICES:
                raise ValueError("axial mode requires axis 'rows' or 'cols'")
            if self.allow_transpose:
                raise ValueError("axial mode requires allow_transpose=false "
                                 "(transposition would swap the correlation axis)")
        if self.tile_size % 2 ** self.levels:
            raise ValueError("tile_size must be divisible by 2^levels")

    def dnet_config(self) -> DNetConfig:
        return DNetConfig(base_filters=self.base_filters, levels=self.levels,
                          convs_per_block=self.convs_per_block,
                          tail_layers=self.tail_layers)

    def nnet_config(self) -> NNetConfig:
        return NNetConfig(components=self.mixture_components,
                          hidden=self.nnet_hidden, blocks=self.nnet_blocks)


_CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


def parse_config(path: str | Path) -> TrainConfig:
    """Read a plain-text config: one "key = value" per line, '#' comments."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        if key not in _CONFIG_FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, lineno, path)
    return TrainConfig(**values)


def _coerce(key: str, raw: str, lineno: int, path):
    kind = _CONFIG_FIELDS[key].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind in ("bool", "bool | None"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "str | None":
            return None if raw in ("", "none", "None", "-") else raw
        return raw
    except ValueError:
        raise ValueError(f"{path}:{lineno}: bad value {raw!r} for {key}") from None


@dataclass
class TrainState:
    lr: float
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    best_loss: float | None = None
    epochs_since_improvement: int = 0
    nonfinite_streak: int = 0
    nonfinite_total: int = 0
    lr_floor: float = 1e-6
    loss_log: list[tuple[int, float, float]] = field(default_factory=list)


def compute_masked_loss(bundle: NetworkBundle, masked: torch.Tensor,
                        targets: torch.Tensor, loss_mask: torch.Tensor,
                        stop_nnet_gradient: bool = False) -> torch.Tensor:
    """Mean noise NLL over the loss-mask positions of a tile batch.

    ``targets`` holds the original (unmasked) pixel values; positions outside
    the mask contribute nothing, so perturbing them changes nothing.
    """
    mu = bundle.dnet(masked)
    weights, means, sigmas = bundle.nnet(mu.detach() if stop_nnet_gradient else mu)
    residual = targets - mu
    # component axis to the front for the mixture NLL
    nll = gmm_nll(residual[:, 0], weights.movedim(1, 0), means.movedim(1, 0),
                  sigmas.movedim(1, 0))
    flat_mask = loss_mask[:, 0] if loss_mask.ndim == 4 else loss_mask
    return nll[flat_mask].mean()


def train_step(bundle: NetworkBundle, images: list[np.ndarray],
               config: TrainConfig, state: TrainState) -> float:
    """One optimizer update; returns the step loss (may be non-finite)."""
    rng = state.rng
    img = images[int(rng.integers(len(images)))]
    batch = make_tiles(Image2D(img), tile=config.tile_size,
                       count=config.tiles_per_step, rng=rng)
    masked_tiles, targets, loss_masks = [], [], []
    for tile in batch.tiles:
        tile, _ = augment(tile, rng, allow_transpose=config.allow_transpose)
        plan = masking.sample_grid(config.tile_size, config.tile_size, rng,
                                   config.spacing_min, config.spacing_max)
        masked, loss_mask = masking.apply_mask(tile, plan,
                                               mode=config.replacement_mode,
                                               axis=config.axis)
        masked_tiles.append(masked)
        targets.append(tile)
        loss_masks.append(loss_mask)

    masked_t = torch.from_numpy(np.stack(masked_tiles)[:, None])
    target_t = torch.from_numpy(np.stack(targets)[:, None])
    mask_t = torch.from_numpy(np.stack(loss_masks))

    loss = compute_masked_loss(bundle, masked_t, target_t, mask_t,
                               stop_nnet_gradient=config.stop_nnet_gradient)
    value = float(loss.detach())
    params = bundle.params()
    if not np.isfinite(value):
        _record_nonfinite(state, params)
        return value
    loss.backward()
    state.adam.lr = state.lr
    try:
        adam_step(params, state.adam)
    except NonFiniteGradientError:
        _record_nonfinite(state, params)
        return float("nan")
    state.nonfinite_streak = 0
    return value


def _record_nonfinite(state: TrainState, params: ParamSet) -> None:
    params.zero_grads()
    state.nonfinite_streak += 1
    state.nonfinite_total += 1
    if state.nonfinite_streak >= MAX_NONFINITE_STREAK:
        raise RuntimeError(
            f"aborting: {state.nonfinite_streak} consecutive non-finite steps")


def lr_schedule_update(state: TrainState, epoch_mean_loss: float,
                       patience: int = 30, rel_improvement: float = 1e-5) -> None:
    """Halve the learning rate after ``patience`` epochs without improvement.

    Halving stops once it would undershoot the floor, so the rate trajectory
    stays an exact power-of-two ladder within [lr_floor, lr_initial].
    """
    improved = (state.best_loss is None
                or epoch_mean_loss < state.best_loss - rel_improvement * abs(state.best_loss))
    if improved:
        state.best_loss = epoch_mean_loss
        state.epochs_since_improvement = 0
        return
    state.epochs_since_improvement += 1
    if state.epochs_since_improvement >= patience:
        if state.lr / 2.0 >= state.lr_floor:
            state.lr /= 2.0
        state.epochs_since_improvement = 0


def train(config: TrainConfig, dataset: list[Image2D],
          out_path: str | Path | None = None,
          norm: NormalizationRecord | None = None,
          progress=None) -> NetworkBundle:
    """Run the full training loop and return the last-epoch bundle.

    Writes periodic checkpoints plus a final one to ``out_path`` when given,
    and a loss log ("epoch<TAB>mean_loss<TAB>lr") alongside it.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if min(min(img.shape) for img in dataset) < config.tile_size:
        raise ValueError("an image is smaller than the tile size")
    if norm is None:
        norm = fit_normalization(dataset)
    images = [norm.normalize(img.values) for img in dataset]

    window = 2 * measure_receptive_field(config.dnet_config()) + 1
    bundle = build_bundle(config.dnet_config(), config.nnet_config(), norm=norm,
                          seed=config.seed,
                          allow_transpose=int(config.allow_transpose),
                          replacement_mode=config.replacement_mode,
                          axis=config.axis or "-",
                          receptive_field=window, epochs=0)
    params = bundle.params()
    state = TrainState(lr=config.lr_initial,
                       adam=AdamState.for_params(params, lr=config.lr_initial),
                       rng=np.random.default_rng(config.seed),
                       lr_floor=config.lr_floor)

    out_path = Path(out_path) if out_path is not None else None
    log_lines: list[str] = []
    for epoch in range(1, config.epochs + 1):
        state.epoch = epoch
        losses = []
        for _ in range(config.steps_per_epoch):
            value = train_step(bundle, images, config, state)
            if np.isfinite(value):
                losses.append(value)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        if np.isfinite(mean_loss):
            lr_schedule_update(state, mean_loss, patience=config.plateau_patience,
                               rel_improvement=config.plateau_rel_improvement)
        state.loss_log.append((epoch, mean_loss, state.lr))
        log_lines.append(f"{epoch}\t{mean_loss:.6f}\t{state.lr:.3e}")
        bundle.meta["epochs"] = epoch
        bundle.meta["final_loss"] = f"{mean_loss:.6f}"
        if state.nonfinite_total:
            bundle.meta["nonfinite_steps"] = state.nonfinite_total
        if out_path is not None and (epoch % config.checkpoint_every == 0
                                     or epoch == config.epochs):
            save_bundle(out_path, bundle)
            out_path.with_suffix(".log").write_text("\n".join(log_lines) + "\n")
        if progress is not None:
            progress(epoch, mean_loss, state.lr)
    return bundle
