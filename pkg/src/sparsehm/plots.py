"""Static figures from the report artifacts.

All data is loaded and validated before the first file is written, so a
failure never leaves partial output.  PNG metadata is pinned to keep
regenerated charts byte-identical for identical inputs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_emit"]

_PNG_META = {"Software": "sparsehm"}


def _read_wells_csv(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing report artifact {path}")
    wells = {}
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        n_members = len(header) - 3
        if n_members < 1:
            raise ValueError(f"{path} holds no ensemble members")
        for row in r:
            well = row[0]
            entry = wells.setdefault(well, {"t": [], "truth": [], "members": []})
            entry["t"].append(float(row[1]))
            entry["truth"].append(float(row[2]))
            entry["members"].append([float(v) for v in row[3:]])
    for well, entry in wells.items():
        entry["t"] = np.array(entry["t"])
        entry["truth"] = np.array(entry["truth"])
        entry["members"] = np.array(entry["members"])  # (n_times, n_members)
    return wells


def _read_matrix_csv(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing report artifact {path}")
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def _fan_chart(path, wells, quantity, title, history_end):
    names = list(wells)
    n = len(names)
    ncols = min(3, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.2 * ncols, 3.0 * nrows), squeeze=False)
    for ax in axes.ravel()[n:]:
        ax.set_visible(False)
    for ax, name in zip(axes.ravel(), names):
        e = wells[name]
        ax.plot(e["t"], e["members"], color="c", lw=0.6, alpha=0.7)
        ax.plot(e["t"], e["truth"], color="r", lw=1.6)
        if history_end is not None:
            ax.axvline(history_end, color="k", ls="--", lw=0.8)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("time (days)", fontsize=8)
        ax.set_ylabel(quantity, fontsize=8)
    fig.suptitle(title)
    fig.tight_layout(rect=(0, 0, 1, 0.96))
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def _triptych(path, panels, title):
    fig, axes = plt.subplots(1, len(panels), figsize=(3.6 * len(panels), 3.4))
    if len(panels) == 1:
        axes = [axes]
    vmin = min(np.nanmin(m) for _, m in panels)
    vmax = max(np.nanmax(m) for _, m in panels)
    for ax, (label, m) in zip(axes, panels):
        im = ax.imshow(m, origin="lower", vmin=vmin, vmax=vmax, cmap="viridis")
        ax.set_title(label, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.85)
    fig.suptitle(title)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def _rmse_bars(path, columns):
    fig, axes = plt.subplots(1, len(columns), figsize=(4.0 * len(columns), 3.2), sharey=True)
    if len(columns) == 1:
        axes = [axes]
    for ax, (label, values) in zip(axes, columns.items()):
        ax.bar(np.arange(values.size), values, color="tab:blue")
        ax.set_title(label, fontsize=9)
        ax.set_xlabel("realisation")
    axes[0].set_ylabel("production RMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_emit(cfg, stage_dir: Path) -> list:
    """Render fan charts, impedance triptychs and RMSE bars; returns filenames."""
    report_dir = cfg.workdir / "report"
    truth_dir = cfg.workdir / "truth"

    # load everything first; any missing artifact aborts before writing
    fan_data = {}
    for label in ("initial", "esmda", "shm_ked"):
        for quantity in ("bhp", "wct"):
            fan_data[(label, quantity)] = _read_wells_csv(
                report_dir / f"wells_{quantity}_{label}.csv"
            )
    rmse_cols = {}
    with open(report_dir / "member_rmse.csv", newline="") as f:
        r = csv.reader(f)
        header = next(r)
        data = np.array([[float(v) for v in row[1:]] for row in r])
        for i, label in enumerate(header[1:]):
            rmse_cols[label] = data[:, i]
    if not rmse_cols or next(iter(rmse_cols.values())).size == 0:
        raise ValueError("member RMSE table is empty")

    triptychs = []
    for t in cfg.schedule.survey_times:
        panels = [
            ("ES-MDA", _read_matrix_csv(cfg.workdir / "assim_esmda" / f"impedance_mean_t{t:g}.csv")),
            ("SHM-KED", _read_matrix_csv(cfg.workdir / "assim_shm-ked" / f"impedance_mean_t{t:g}.csv")),
            ("True", _read_matrix_csv(truth_dir / f"impedance_t{t:g}.csv")),
        ]
        triptychs.append((t, panels))

    stage_dir.mkdir(parents=True, exist_ok=True)
    files = []
    history_end = cfg.schedule.history_end
    for (label, quantity), wells in fan_data.items():
        name = f"fan_{quantity}_{label}.png"
        _fan_chart(stage_dir / name, wells, quantity.upper(),
                   f"{quantity.upper()} - {label}", history_end)
        files.append(name)
    for t, panels in triptychs:
        name = f"impedance_t{t:g}.png"
        _triptych(stage_dir / name, panels, f"Mean impedance at {t:g} days")
        files.append(name)
    _rmse_bars(stage_dir / "rmse_members.png", rmse_cols)
    files.append("rmse_members.png")
    return files
