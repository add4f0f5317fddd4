"""Figure rendering for run artifacts.

Every report that writes delimited data (loss CSV, benchmark CSV, metric
text) gets a PNG illustration written next to it by one of these helpers.
Rendering goes through the Agg backend so it works without a display; each
helper returns the path it wrote.
"""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .metrics import MetricReport  # noqa: E402


def save_loss_curve(path: str, steps, losses) -> str:
    """Training-loss line plot; log scale when every loss is positive."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(list(steps), list(losses), lw=1.2, color="#29527a")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    if all(v > 0 for v in losses):
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_bench_curve(path: str, gammas, refine_macs, psnr_db) -> str:
    """Selection-ratio sweep: refinement MACs (left) and PSNR (right)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(list(gammas), list(refine_macs), "o-", color="#29527a",
            label="refinement MACs")
    ax.set_xlabel("selection ratio")
    ax.set_ylabel("refinement MACs", color="#29527a")
    ax.grid(True, alpha=0.3)
    twin = ax.twinx()
    finite = [(g, p) for g, p in zip(gammas, psnr_db) if math.isfinite(p)]
    if finite:
        twin.plot([g for g, _ in finite], [p for _, p in finite], "s--",
                  color="#a0522d", label="PSNR")
    twin.set_ylabel("PSNR (dB)", color="#a0522d")
    ax.set_title("selection-ratio sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_kind_bars(path: str, report: MetricReport) -> str:
    """Per-kind PSNR and SSIM bars, with the overall average appended."""
    kinds = sorted(report.per_kind) if report.per_kind else []
    labels = kinds + ["average"]
    psnr_vals = [report.per_kind[k]["psnr_db"] for k in kinds] + [report.psnr_db]
    ssim_vals = [100.0 * report.per_kind[k]["ssim"] for k in kinds] + \
        [report.ssim_pct]
    cap = 99.0  # display stand-in for the infinite identical-pair sentinel
    shown = [min(v, cap) if math.isfinite(v) else cap for v in psnr_vals]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 4))
    x = range(len(labels))
    ax1.bar(x, shown, color="#29527a")
    ax1.set_xticks(list(x), labels, rotation=20, ha="right")
    ax1.set_ylabel("PSNR (dB)")
    ax2.bar(x, ssim_vals, color="#a0522d")
    ax2.set_xticks(list(x), labels, rotation=20, ha="right")
    ax2.set_ylabel("SSIM (x100)")
    ax2.set_ylim(0, 100)
    fig.suptitle(f"restoration quality over {report.sample_count} pairs")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def is_png(path: str) -> bool:
    """Cheap artifact sanity check used by callers and tests."""
    if not os.path.isfile(path):
        return False
    with open(path, "rb") as fh:
        return fh.read(8) == b"\x89PNG\r\n\x1a\n"
