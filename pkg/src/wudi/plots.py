"""Render report figures and the matching delimited files.

Every renderer takes an already-built report dict and writes a PNG plus a
CSV holding the same series, so report directories stay self-describing.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def render_loss_traces(report: dict, outdir: Path) -> list[Path]:
    """Per-layer solver loss curves from a merge report."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    traced = {name: rec["loss_trace"] for name, rec in report["layers"].items()
              if "loss_trace" in rec}
    if not traced:
        return []
    rows = [
        {"layer": name, "step": i, "loss": v}
        for name, trace in traced.items()
        for i, v in enumerate(trace)
    ]
    csv_path = outdir / "loss_traces.csv"
    write_csv(csv_path, ["layer", "step", "loss"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, trace in traced.items():
        ax.plot(range(len(trace)), trace, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("interference loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    png_path = outdir / "loss_traces.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]


def render_layer_summary(report: dict, outdir: Path) -> list[Path]:
    """Final loss and merged-vector norm per layer from a merge report."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = [
        {
            "layer": name,
            "initial_loss": rec["initial_loss"],
            "final_loss": rec["final_loss"],
            "tau_m_frobenius_norm": rec["tau_m_frobenius_norm"],
        }
        for name, rec in report["layers"].items()
    ]
    csv_path = outdir / "layer_summary.csv"
    write_csv(csv_path, ["layer", "initial_loss", "final_loss", "tau_m_frobenius_norm"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [r["layer"] for r in rows]
    ax.bar(range(len(rows)), [r["final_loss"] for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("final interference loss")
    fig.tight_layout()
    png_path = outdir / "layer_summary.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]


def render_interference(report: dict, outdir: Path) -> list[Path]:
    """Relative interference by depth, one line per merge method."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for method, rec in report["interference"].items():
        for depth, value in enumerate(rec["per_depth_mean"], start=1):
            rows.append({"method": method, "depth": depth, "relative_error": value})
    csv_path = outdir / "interference.csv"
    write_csv(csv_path, ["method", "depth", "relative_error"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, rec in report["interference"].items():
        depths = range(1, len(rec["per_depth_mean"]) + 1)
        ax.plot(depths, rec["per_depth_mean"], marker="o", label=method)
    ax.set_xlabel("layer depth")
    ax.set_ylabel("mean relative interference")
    ax.set_xticks(list(depths))
    ax.legend()
    fig.tight_layout()
    png_path = outdir / "interference.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]


def render_consistency(report: dict, outdir: Path) -> list[Path]:
    """Per-seed input drift (direction and magnitude)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    per_seed = report["consistency"]["per_seed"]
    rows = [
        {
            "seed": entry["seed"],
            "delta_direction": entry["delta_direction"],
            "delta_magnitude": entry["delta_magnitude"],
        }
        for entry in per_seed
    ]
    csv_path = outdir / "consistency.csv"
    write_csv(csv_path, ["seed", "delta_direction", "delta_magnitude"], rows)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    seeds = [r["seed"] for r in rows]
    axes[0].bar(seeds, [r["delta_direction"] for r in rows])
    axes[0].set_xlabel("seed")
    axes[0].set_ylabel("direction drift")
    axes[1].bar(seeds, [r["delta_magnitude"] for r in rows], color="tab:orange")
    axes[1].set_xlabel("seed")
    axes[1].set_ylabel("magnitude drift")
    fig.tight_layout()
    png_path = outdir / "consistency.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]


def render_ablation(report: dict, outdir: Path) -> list[Path]:
    """Side-by-side final interference of the loss variants."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = [
        {"variant": variant, "final_interference": rec["final_mean"]}
        for variant, rec in report["variants"].items()
    ]
    csv_path = outdir / "ablation.csv"
    write_csv(csv_path, ["variant", "final_interference"], rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(rows)), [r["final_interference"] for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([r["variant"] for r in rows], rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("final mean relative interference")
    fig.tight_layout()
    png_path = outdir / "ablation.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]
