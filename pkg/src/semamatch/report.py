"""Render session diagnostics into figures and a delimited summary.

Consumes the diagnostics tree a `run` leaves behind (``energy.log`` plus
``steps/<t>/`` frame dumps) and produces PNG figures alongside a CSV
summary, one row per step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import frames

ENERGY_LOG = "energy.log"
ENERGY_FIELDS = ("step", "g", "mprime", "grad_norm")


def write_energy_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ENERGY_FIELDS, delimiter="\t")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in ENERGY_FIELDS})


def read_energy_log(path: Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        rows = []
        for raw in reader:
            rows.append(
                {
                    "step": int(raw["step"]),
                    "g": float(raw["g"]),
                    "mprime": float(raw["mprime"]) if raw.get("mprime") else 0.0,
                    "grad_norm": float(raw["grad_norm"]) if raw.get("grad_norm") else 0.0,
                }
            )
        return rows


@dataclass
class StepStats:
    step: int
    g: float
    mprime: float
    grad_norm: float
    flow_mean_mag: float | None = None


def collect_stats(diag_dir: Path) -> list[StepStats]:
    rows = read_energy_log(diag_dir / ENERGY_LOG)
    stats = []
    for row in rows:
        flow_mag = None
        flow_path = diag_dir / "steps" / str(row["step"]) / "flow.dmt"
        if flow_path.exists():
            disp = frames.read_frame(flow_path)
            flow_mag = float(np.linalg.norm(disp, axis=2).mean())
        stats.append(
            StepStats(
                step=row["step"],
                g=row["g"],
                mprime=row["mprime"],
                grad_norm=row["grad_norm"],
                flow_mean_mag=flow_mag,
            )
        )
    return sorted(stats, key=lambda s: s.step, reverse=True)


def _line_figure(path: Path, xs, ys, xlabel: str, ylabel: str, title: str) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.invert_xaxis()  # sampling runs from high t to low t
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_report(diag_dir: Path, out_dir: Path) -> list[Path]:
    """Write summary.csv plus figures; returns the created paths."""
    stats = collect_stats(diag_dir)
    if not stats:
        raise ValueError(f"no step records found under {diag_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    created = []

    summary = out_dir / "summary.csv"
    with open(summary, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "g", "mprime_pixels", "grad_norm", "flow_mean_mag"])
        for s in stats:
            writer.writerow(
                [s.step, f"{s.g:.8g}", f"{s.mprime:.8g}", f"{s.grad_norm:.8g}",
                 "" if s.flow_mean_mag is None else f"{s.flow_mean_mag:.8g}"]
            )
    created.append(summary)

    steps = [s.step for s in stats]
    figures = [
        ("energy.png", [s.g for s in stats], "guidance energy g", "Matching energy per step"),
        ("mask_coverage.png", [s.mprime for s in stats], "|M'| pixels", "Consistent-mask coverage"),
        ("grad_norm.png", [s.grad_norm for s in stats], "gradient norm", "Guidance gradient norm"),
    ]
    if all(s.flow_mean_mag is not None for s in stats):
        figures.append(
            ("flow_magnitude.png", [s.flow_mean_mag for s in stats],
             "mean |F| (px)", "Mean flow magnitude")
        )
    for name, ys, ylabel, title in figures:
        path = out_dir / name
        _line_figure(path, steps, ys, "step t", ylabel, title)
        created.append(path)
    return created
