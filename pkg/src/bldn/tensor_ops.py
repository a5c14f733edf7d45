"""Differentiable layer primitives and the Adam optimizer.

Everything network-related runs on float32 torch tensors shaped
(batch, channels, height, width); gradient verification runs a parallel
float64 path. Autodiff is delegated to torch; the forward semantics and
the optimizer update implemented here are the contract.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

Tensor4 = torch.Tensor

ACTIVATIONS = (
    "relu",
    "leaky_relu_0.1",
    "tanh",
    "exp",
    "sigmoid",
    "softmax_channels",
    "linear",
)


class NonFiniteGradientError(RuntimeError):
    """Raised when an optimizer update sees NaN/inf gradients."""


def as_tensor4(values, dtype=torch.float32) -> Tensor4:
    """Coerce an array-like to a (batch, channels, height, width) tensor."""
    t = torch.as_tensor(values, dtype=dtype)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[None]
    if t.ndim != 4:
        raise ValueError(f"expected 2-4 dims, got shape {tuple(t.shape)}")
    return t


def check_tensor4(t: Tensor4) -> Tensor4:
    if t.ndim != 4 or min(t.shape) < 1:
        raise ValueError(f"not a valid (B,C,H,W) tensor: shape {tuple(t.shape)}")
    return t


def conv2d(x: Tensor4, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int | tuple[int, int] | str = "same") -> Tensor4:
    """Cross-correlation with zero padding.

    Kernel spatial dims must be odd (padding="same" keeps the spatial size)
    or exactly 2 (caller pads explicitly, e.g. via ``torch.nn.functional.pad``).
    """
    check_tensor4(x)
    kh, kw = weight.shape[-2:]
    for k in (kh, kw):
        if k != 2 and k % 2 == 0:
            raise ValueError(f"kernel dims must be odd or 2, got {kh}x{kw}")
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("padding='same' requires odd kernel dims")
        padding = (kh // 2, kw // 2)
    return F.conv2d(x, weight, bias, stride=1, padding=padding)


def pool2(x: Tensor4) -> Tensor4:
    """2x2 max pooling, stride 2. Gradient routes to the (first) argmax."""
    check_tensor4(x)
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"pool2 needs even spatial dims, got {tuple(x.shape[-2:])}")
    return F.max_pool2d(x, kernel_size=2, stride=2)


def upsample_nearest(x: Tensor4, factor: int = 2) -> Tensor4:
    """Nearest-neighbor upsampling; each pixel becomes a factor x factor block."""
    check_tensor4(x)
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def apply_activation(x: Tensor4, kind: str) -> Tensor4:
    if kind == "relu":
        return F.relu(x)
    if kind == "leaky_relu_0.1":
        return F.leaky_relu(x, negative_slope=0.1)
    if kind == "tanh":
        return torch.tanh(x)
    if kind == "exp":
        return torch.exp(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "softmax_channels":
        if x.shape[1] < 2:
            raise ValueError("softmax_channels needs >= 2 channels")
        return torch.softmax(x, dim=1)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


class ParamSet(Mapping):
    """Named map of trainable tensors with their gradient accumulators.

    Wraps torch parameters; ``p.grad`` is the accumulator, guaranteed by
    torch to mirror the parameter shape. Dict construction guarantees
    unique names.
    """

    def __init__(self, named: Mapping[str, torch.Tensor]):
        self._params: dict[str, torch.Tensor] = dict(named)

    @classmethod
    def from_modules(cls, **modules: torch.nn.Module) -> "ParamSet":
        named = {}
        for prefix, module in modules.items():
            for name, p in module.named_parameters():
                named[f"{prefix}.{name}"] = p
        return cls(named)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    def nonfinite_grads(self) -> list[str]:
        return [n for n, p in self._params.items()
                if p.grad is not None and not torch.isfinite(p.grad).all()]


@dataclass
class AdamState:
    """Adam moment accumulators plus step counter and learning rate."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float, **kwargs) -> "AdamState":
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        state = cls(lr=lr, **kwargs)
        state.m = {n: torch.zeros_like(p) for n, p in params.items()}
        state.v = {n: torch.zeros_like(p) for n, p in params.items()}
        return state


def adam_step(params: ParamSet, state: AdamState) -> None:
    """One Adam update with bias correction; clears gradients afterwards.

    Raises NonFiniteGradientError (leaving parameters untouched) if any
    gradient contains NaN/inf; missing gradients are a contract violation.
    """
    missing = [n for n, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"gradients not populated for: {missing}")
    bad = params.nonfinite_grads()
    if bad:
        params.zero_grads()
        raise NonFiniteGradientError(f"non-finite gradient in: {bad}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad
            m = state.m[name].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v = state.v[name].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)
    params.zero_grads()


def grad_check(fn: Callable[..., torch.Tensor],
               inputs: Sequence[torch.Tensor],
               params: Iterable[torch.Tensor] = (),
               epsilon: float = 1e-4,
               samples: int = 20,
               generator: torch.Generator | None = None) -> float:
    """Compare autograd gradients of a scalar-valued fn against central differences.

    ``fn(*inputs)`` must be deterministic and is evaluated in float64; inputs
    are cloned to float64 leaves, ``params`` are pre-existing float64 tensors
    (e.g. module parameters) perturbed in place for the numeric side.
    ``samples`` coordinates are drawn from the pooled index space of all
    inputs and params.

    Returns max over sampled coordinates of
    ``|analytic - central| / max(1, |central|)``.
    """
    if not 1e-5 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-5, 1e-3]")
    gen = generator if generator is not None else torch.Generator().manual_seed(0)
    leaves = [torch.as_tensor(t).detach().clone().double().requires_grad_(True)
              for t in inputs]
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("params must already be float64 for grad_check")

    out = fn(*leaves)
    if out.numel() != 1:
        raise ValueError("fn must return a scalar")
    grads = torch.autograd.grad(out, leaves + params, allow_unused=False)

    work = [l.detach().clone() for l in leaves]
    tensors = work + params
    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    starts = [sum(sizes[:i]) for i in range(len(sizes))]
    picked = torch.randperm(total, generator=gen)[: min(samples, total)].tolist()

    max_err = 0.0
    with torch.no_grad():
        def evaluate() -> float:
            return float(fn(*work))

        for flat_index in picked:
            which = max(i for i, s in enumerate(starts) if s <= flat_index)
            i = flat_index - starts[which]
            tensor = tensors[which]
            data = tensor.data if tensor.requires_grad else tensor
            flat = data.view(-1)
            orig = float(flat[i])
            flat[i] = orig + epsilon
            f_hi = evaluate()
            flat[i] = orig - epsilon
            f_lo = evaluate()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * epsilon)
            analytic = float(grads[which].reshape(-1)[i])
            err = abs(analytic - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return max_err
