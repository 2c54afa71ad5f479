"""Rendering of training logs and ablation tables to figures and CSV."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .distill import LossReport

__all__ = [
    "save_loss_curves",
    "save_ablation_chart",
    "write_loss_summary_csv",
    "write_ablation_csv",
]


def save_loss_curves(reports: list[LossReport], out_path: str, title: str = "") -> None:
    """Loss components and the warm-up coefficient over training steps."""
    steps = [r.step for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(steps, [r.l_pmtd for r in reports], label="blended", lw=1.8)
    ax.plot(steps, [r.l_int for r in reports], label="intermediate teachers", lw=1.0)
    ax.plot(steps, [r.l_fp for r in reports], label="full-precision teacher", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(steps, [r.alpha for r in reports], color="gray", ls="--", lw=1.0,
             label="alpha")
    ax2.set_ylabel("alpha")
    ax2.set_ylim(-0.05, 1.05)
    lines1, labels1 = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines1 + lines2, labels1 + labels2, loc="upper right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def write_loss_summary_csv(stages: list[tuple[str, list[LossReport]]], out_path: str) -> None:
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "steps", "first_l_pmtd", "last_l_pmtd",
                    "last_l_int", "last_l_fp", "last_alpha"])
        for name, reports in stages:
            if not reports:
                w.writerow([name, 0, "", "", "", "", ""])
                continue
            first, last = reports[0], reports[-1]
            w.writerow([name, len(reports), first.l_pmtd, last.l_pmtd,
                        last.l_int, last.l_fp, last.alpha])


def save_ablation_chart(rows, out_path: str) -> None:
    """Bar chart of the median quality metric per ablation configuration."""
    labels = [r.label for r in rows]
    medians = [r.median_psnr for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    bars = ax.bar(range(len(rows)), medians, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=15, ha="right", fontsize=9)
    ax.set_ylabel("median PSNR vs FP output (dB)")
    ax.grid(True, axis="y", alpha=0.3)
    for bar, v in zip(bars, medians):
        ax.annotate(f"{v:.2f}", (bar.get_x() + bar.get_width() / 2, v),
                    ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def write_ablation_csv(rows, seeds, out_path: str) -> None:
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "median_psnr_db", "median_mse"]
                   + [f"psnr_seed_{s}" for s in seeds])
        for r in rows:
            w.writerow([r.label, r.median_psnr, r.median_mse] + list(r.psnr_per_seed))
