"""Command-line interface tying the pipeline together.

Every subcommand prints a machine-parseable "RESULT key=value ..." line on
success. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import masking, trainer
from .data import (FormatError, Image2D, generate_phantom, load_dir, read_image,
                   synth_noise, write_image)
from .inference import predict, predict_dihedral
from .metrics import gaussian_baseline, noise_report, psnr, ssim
from .networks import CheckpointError, load_bundle
from .tensor_ops import NonFiniteGradientError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "+inf" if value > 0 else "-inf"
        return f"{value:.4f}"
    return str(value)


def _result(**kv) -> None:
    print("RESULT " + " ".join(f"{k}={_fmt(v)}" for k, v in kv.items()))


def _cmd_train(args) -> int:
    config = trainer.parse_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    dataset = load_dir(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bundle = trainer.train(config, dataset, out_path=out)
    final_loss = bundle.meta.get("final_loss", "")
    _result(ckpt=out, epochs=config.epochs, images=len(dataset),
            **({"nonfinite_steps": bundle.meta["nonfinite_steps"]}
               if "nonfinite_steps" in bundle.meta else {}),
            **({"final_loss": final_loss} if final_loss else {}))
    return EXIT_OK


def _cmd_denoise(args) -> int:
    bundle = load_bundle(args.ckpt)
    src = Path(args.input)
    dst = Path(args.out)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if p.suffix in (".pgm", ".blim"))
        if not paths:
            raise FormatError(f"{src}: no images found")
        dst.mkdir(parents=True, exist_ok=True)
        outs = [dst / p.name for p in paths]
    else:
        paths, outs = [src], [dst]
        dst.parent.mkdir(parents=True, exist_ok=True)
    for path, out in zip(paths, outs):
        image = read_image(path)
        if args.no_ensemble:
            denoised, _ = predict(bundle, image)
        else:
            denoised = predict_dihedral(bundle, image)
        write_image(out, denoised)
    _result(images=len(paths), out=args.out,
            ensemble=int(not args.no_ensemble))
    return EXIT_OK


def _load_pairs(pred_dir, gt_dir) -> tuple[list, list, list[str]]:
    pred = load_dir(pred_dir)
    gt = load_dir(gt_dir)
    if len(pred) != len(gt):
        raise FormatError(f"image count mismatch: {len(pred)} vs {len(gt)}")
    names = [img.pair_id or str(i) for i, img in enumerate(pred)]
    return pred, gt, names


def _cmd_eval(args) -> int:
    pred, gt, names = _load_pairs(args.pred, args.gt)
    psnrs, ssims = [], []
    for name, p, g in zip(names, pred, gt):
        vp, vs = psnr(p, g), ssim(p, g)
        psnrs.append(vp)
        ssims.append(vs)
        print(f"EVAL {name}\tpsnr={_fmt(vp)}\tssim={_fmt(vs)}")
    _result(count=len(pred), mean_psnr=float(np.mean(psnrs)),
            mean_ssim=float(np.mean(ssims)))
    return EXIT_OK


def _cmd_noise_report(args) -> int:
    from .plots import render_noise_report

    noisy, gt, _ = _load_pairs(args.noisy, args.gt)
    bundle = load_bundle(args.ckpt) if args.ckpt else None
    report = noise_report(noisy, gt, bundles=bundle)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_tsv(out)
    figures = render_noise_report(report, out)
    extra = {}
    if bundle is not None:
        extra["median_kl"] = report.median_kl("model")
    _result(tsv=out, bins=len(report.rows), confident=len(report.confident_rows()),
            figures=len(figures), **extra)
    return EXIT_OK


def _cmd_synth(args) -> int:
    gt = load_dir(args.gt)
    model = args.model.replace("-", "_")
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset_min = float(min(img.values.min() for img in gt))
    kwargs = {}
    if args.sigma is not None:
        kwargs["sigma"] = args.sigma
    if args.alpha is not None:
        kwargs["alpha"] = args.alpha
    if args.eta is not None:
        kwargs["eta"] = args.eta
    count = 0
    for path in sorted(p for p in Path(args.gt).iterdir() if p.suffix in (".pgm", ".blim")):
        image = read_image(path)
        noisy = synth_noise(image, model, rng, dataset_min=dataset_min, **kwargs)
        write_image(out / path.name, noisy)
        count += 1
    _result(images=count, model=args.model, out=out)
    return EXIT_OK


def _cmd_phantom(args) -> int:
    try:
        h, w = (int(part) for part in args.size.lower().split("x"))
    except ValueError:
        raise FormatError(f"bad --size {args.size!r}, expected <h>x<w>") from None
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        image = generate_phantom(h, w, rng, blob_count=args.blobs)
        write_image(out / f"phantom_{i:03d}.blim", image)
    _result(images=args.count, size=args.size, out=out)
    return EXIT_OK


def _cmd_baseline(args) -> int:
    noisy, gt, _ = _load_pairs(args.noisy, args.gt)
    best = gaussian_baseline(noisy, gt)
    _result(sigma=best.sigma, psnr=best.psnr, ssim=best.ssim)
    return EXIT_OK


def _selftest_gradients() -> list[tuple[str, float, bool]]:
    from .tensor_ops import conv2d, grad_check, pool2, upsample_nearest

    gen = torch.Generator().manual_seed(11)
    results = []

    def check(name, fn, inputs, params=(), tol=1e-4):
        err = grad_check(fn, inputs, params=params, samples=20, generator=gen)
        results.append((name, err, err < tol))

    x = torch.randn(1, 2, 8, 8, generator=gen)
    w3 = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64).requires_grad_(True)
    check("grad_conv3x3", lambda t: conv2d(t, w3).sum(), [x], [w3])
    w2 = torch.randn(2, 2, 2, 2, generator=gen, dtype=torch.float64).requires_grad_(True)
    check("grad_conv2x2",
          lambda t: conv2d(torch.nn.functional.pad(t, (0, 1, 0, 1)), w2, padding=0).sum(),
          [x], [w2])
    check("grad_pool2", lambda t: (pool2(t) ** 2).sum(), [x])
    check("grad_upsample", lambda t: (upsample_nearest(t) ** 3).sum(), [x])
    for kind in ("relu", "leaky_relu_0.1", "tanh", "exp", "sigmoid"):
        from .tensor_ops import apply_activation
        check(f"grad_{kind}", lambda t, k=kind: (apply_activation(t, k) ** 2).sum(), [x])

    # full composition: D-net + N-net + masked NLL
    from .networks import DNetConfig, NNetConfig, build_bundle
    from .noise_model import gmm_nll

    bundle = build_bundle(DNetConfig(base_filters=4), NNetConfig(components=2, hidden=4),
                          seed=5)
    bundle.dnet.double()
    bundle.nnet.double()
    params = [p for p in bundle.dnet.parameters()] + [p for p in bundle.nnet.parameters()]
    # Freshly built nets have exactly-zero biases, which parks ReLU
    # pre-activations on the kink where central differences disagree with the
    # subgradient.  Nudge every parameter to a generic point first.
    with torch.no_grad():
        for p in params:
            p.add_(0.05 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    mask = torch.zeros(1, 16, 16, dtype=torch.bool)
    mask[0, ::4, ::4] = True
    target = torch.randn(1, 1, 16, 16, generator=gen, dtype=torch.float64)

    def composition(t):
        mu = bundle.dnet(t)
        w, m, s = bundle.nnet(mu)
        nll = gmm_nll((target - mu)[:, 0], w.movedim(1, 0), m.movedim(1, 0),
                      s.movedim(1, 0))
        return nll[mask].mean()

    err = grad_check(composition, [torch.randn(1, 1, 16, 16, generator=gen)],
                     params=params, samples=20, generator=gen)
    results.append(("grad_full_composition", err, err < 1e-3))
    return results


def _cmd_selftest(args) -> int:
    results = _selftest_gradients()

    rng = np.random.default_rng(args.seed or 0)
    fractions = [masking.sample_grid(256, 256, rng).fraction for _ in range(1000)]
    frac = float(np.mean(fractions))
    results.append(("masking_fraction", frac, abs(frac - 0.068) <= 0.003))

    from .networks import NNet, NNetConfig

    worst = 0.0
    for n in (2, 3):
        net = NNet(NNetConfig(components=n, hidden=16), seed=n)
        x = torch.from_numpy(rng.standard_normal((1, 1, 100, 100)).astype(np.float32))
        with torch.no_grad():
            w, m, _ = net(x)
        worst = max(worst, float((w * m).sum(dim=1).abs().max()))
    results.append(("mixture_centering", worst, worst < 1e-6))

    image = rng.standard_normal((64, 64)).astype(np.float32)
    plan = masking.sample_grid(64, 64, rng)
    masked_a, _ = masking.apply_mask(image, plan)
    perturbed = image.copy()
    perturbed[plan.mask] += rng.standard_normal(int(plan.mask.sum())).astype(np.float32) * 5
    masked_b, _ = masking.apply_mask(perturbed, plan)
    identical = bool(np.array_equal(masked_a, masked_b))
    results.append(("masked_input_independence", float(identical), identical))

    failed = 0
    for name, value, ok in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} value={value:.6g}")
        failed += 0 if ok else 1
    _result(passed=len(results) - failed, failed=failed)
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def build_parser() -> _Parser:
    parser = _Parser(prog="bldn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads; 1 forces deterministic mode")
        return p

    p = add("train", _cmd_train, help="train a model on a directory of noisy images")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("denoise", _cmd_denoise, help="denoise an image or directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-ensemble", action="store_true",
                   help="single forward pass instead of the symmetry ensemble")

    p = add("eval", _cmd_eval, help="PSNR/SSIM against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = add("noise-report", _cmd_noise_report, help="binned noise diagnostics table")
    p.add_argument("--noisy", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", required=True)

    p = add("synth", _cmd_synth, help="corrupt clean images with synthetic noise")
    p.add_argument("--gt", required=True)
    p.add_argument("--model", required=True,
                   choices=("gaussian", "poisson-gaussian", "speckle"))
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)

    p = add("phantom", _cmd_phantom, help="generate phantom ground-truth images")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", required=True, help="<h>x<w>")
    p.add_argument("--out", required=True)
    p.add_argument("--blobs", type=int, default=40)

    p = add("baseline", _cmd_baseline, help="optimal Gaussian-blur baseline")
    p.add_argument("--noisy", required=True)
    p.add_argument("--gt", required=True)

    add("selftest", _cmd_selftest, help="run built-in numerical property checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        torch.set_num_threads(args.threads)
    if args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (FormatError, CheckpointError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteGradientError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
