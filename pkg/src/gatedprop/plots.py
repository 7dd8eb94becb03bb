"""Figure rendering for the report-producing commands.

Every CLI path that writes delimited output also renders a matplotlib
figure next to it. Rendering is headless (Agg) and deterministic given
the same data.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# fixed object palette (slot 0 = background stays untinted)
PALETTE = np.array([
    [0, 0, 0],
    [230, 60, 60],
    [60, 130, 230],
    [70, 200, 90],
    [240, 190, 40],
    [180, 80, 220],
    [60, 210, 210],
    [240, 130, 50],
    [150, 110, 70],
    [240, 110, 180],
    [130, 220, 60],
], dtype=np.uint8)


def save_loss_curve(losses, path, grad_norms=None):
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(np.arange(len(losses)), losses, lw=0.8, color="#2060b0", label="loss")
    if len(losses) >= 20:
        k = max(5, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(k) / k, mode="valid")
        ax.plot(np.arange(len(smooth)) + k - 1, smooth, lw=1.8, color="#b03020",
                label=f"moving mean ({k})")
    ax.set_xlabel("step")
    ax.set_ylabel("cross entropy")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    if grad_norms:
        ax2 = ax.twinx()
        ax2.plot(np.arange(len(grad_norms)), grad_norms, lw=0.5, color="#70a070", alpha=0.6)
        ax2.set_ylabel("grad norm", color="#70a070")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_eval_figure(report, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.5, 4), width_ratios=[2, 1])
    for obj in report.objects:
        frames = [idx for idx, _ in report.per_frame]
        js = [scores[obj][0] for _, scores in report.per_frame]
        fs = [scores[obj][1] for _, scores in report.per_frame]
        color = PALETTE[obj % len(PALETTE)] / 255.0
        ax1.plot(frames, js, "-o", ms=3, color=color, label=f"obj {obj} J")
        ax1.plot(frames, fs, "--s", ms=3, color=color, alpha=0.6, label=f"obj {obj} F")
    ax1.set_xlabel("frame")
    ax1.set_ylabel("score")
    ax1.set_ylim(-0.02, 1.02)
    ax1.grid(alpha=0.3)
    ax1.legend(fontsize=7)
    labels = ["J", "F", "J&F"]
    vals = [report.j_mean, report.f_mean, report.jf_mean]
    ax2.bar(labels, vals, color=["#2060b0", "#70a070", "#b03020"])
    ax2.set_ylim(0, 1.02)
    for i, v in enumerate(vals):
        ax2.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=9)
    ax2.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_bench_figure(rows, path):
    fig, ax = plt.subplots(figsize=(8, 0.55 * len(rows) + 1.6))
    labels = [r.case.label for r in rows]
    times = [r.median_ns / 1e6 for r in rows]
    colors = ["#2060b0" if r.case.block == "gpm" else "#b03020" for r in rows]
    y = np.arange(len(rows))
    ax.barh(y, times, color=colors)
    ax.set_yticks(y, labels=labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("median forward time (ms)")
    for yi, (t, r) in enumerate(zip(times, rows)):
        ax.text(t, yi, f" {t:.1f} ms / {r.macs/1e6:.0f} MMAC", va="center", fontsize=7)
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_gradcheck_figure(report, path):
    names = [t.name for t in report.tensors]
    errs = [max(t.max_rel_err, 1e-12) for t in report.tensors]
    fig, ax = plt.subplots(figsize=(8, 0.22 * len(names) + 1.8))
    y = np.arange(len(names))
    ax.barh(y, errs, color=["#b03020" if e >= report.tolerance else "#2060b0" for e in errs])
    ax.axvline(report.tolerance, color="k", lw=1, ls="--", label=f"tolerance {report.tolerance:g}")
    ax.set_xscale("log")
    ax.set_yticks(y, labels=names, fontsize=6)
    ax.invert_yaxis()
    ax.set_xlabel("max relative gradient error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def overlay(frame: np.ndarray, mask_values: np.ndarray, alpha=0.55) -> np.ndarray:
    """Tint object pixels with the palette; background stays untouched."""
    out = frame.astype(np.float32)
    tint = PALETTE[mask_values % len(PALETTE)].astype(np.float32)
    hit = (mask_values > 0)[..., None]
    out = np.where(hit, (1 - alpha) * out + alpha * tint, out)
    return np.clip(out, 0, 255).astype(np.uint8)
