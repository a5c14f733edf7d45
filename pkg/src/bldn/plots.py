"""Figure rendering for the noise diagnostics (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import BinnedNoiseReport


def render_noise_report(report: BinnedNoiseReport, stem: str | Path) -> list[Path]:
    """Render std / skewness / KL figures next to the report's TSV.

    ``stem`` is the TSV path (or any path); figures land at
    ``<stem without suffix>_std.png``, ``..._skew.png`` and ``..._kl.png``.
    Returns the written paths.
    """
    stem = Path(stem)
    base = stem.with_suffix("") if stem.suffix else stem
    rows = report.confident_rows()
    xs = [r.x_median for r in rows]
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [r.emp_std for r in rows], "ko-", label="empirical", markersize=4)
    for name in report.variants:
        ax.plot(xs, [r.pred_std.get(name) for r in rows], "s--",
                label=f"predicted ({name})", markersize=4)
    ax.set_xlabel("signal value")
    ax.set_ylabel("noise standard deviation")
    ax.legend()
    fig.tight_layout()
    path = base.parent / (base.name + "_std.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [r.emp_skew for r in rows], "ko-", label="empirical", markersize=4)
    for name in report.variants:
        ax.plot(xs, [r.pred_skew.get(name) for r in rows], "s--",
                label=f"predicted ({name})", markersize=4)
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("signal value")
    ax.set_ylabel("noise skewness")
    ax.legend()
    fig.tight_layout()
    path = base.parent / (base.name + "_skew.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if report.variants:
        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.8 / len(report.variants)
        for i, name in enumerate(report.variants):
            offs = (i - (len(report.variants) - 1) / 2) * width
            ax.bar([r.index + offs for r in rows], [r.kl.get(name) for r in rows],
                   width=width, label=name)
        ax.set_xlabel("signal bin")
        ax.set_ylabel("KL(empirical || model)")
        ax.legend()
        fig.tight_layout()
        path = base.parent / (base.name + "_kl.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written
