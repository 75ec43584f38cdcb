"""Delimited outputs (CSV, JSON) and the figures rendered next to them."""

from __future__ import annotations

import csv
import json
import platform
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402

ROUNDS_HEADER = ("round", "acc", "asr")
SWEEP_HEADER = ("ratio", "pre_asr", "retrain_asr", "federaser_asr", "acc")
NC_HEADER = ("class", "l1_norm", "index", "flagged")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return "nan" if np.isnan(value) else repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def versions() -> dict[str, str]:
    return {"badfu": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_json(path: Path, data: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --- figures -------------------------------------------------------------------

def _style(ax) -> None:
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.6)


def plot_rounds(rows: Sequence[dict], path: Path, title: str = "") -> None:
    rounds = [r["round"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    ax.plot(rounds, [100 * r["acc"] for r in rows], marker="o", markersize=3, label="ACC")
    if any(r.get("asr") is not None for r in rows):
        ax.plot(rounds, [100 * r["asr"] if r.get("asr") is not None else np.nan for r in rows],
                marker="s", markersize=3, label="ASR")
    ax.set_xlabel("communication round")
    ax.set_ylabel("%")
    ax.set_ylim(-2, 102)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title, fontsize=10)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows: Sequence[dict], path: Path) -> None:
    ratios = [r["ratio"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.plot(ratios, [100 * r["pre_asr"] for r in rows], "o-", color="tab:blue", label="pre-activation")
    ax.plot(ratios, [100 * r["retrain_asr"] for r in rows], "s-", color="tab:green", label="retrain")
    ax.plot(ratios, [100 * r["federaser_asr"] for r in rows], "^-", color="tab:orange", label="FedEraser")
    ax.set_xlabel("camouflage / backdoor sample ratio")
    ax.set_ylabel("ASR (%)")
    ax.set_xticks(ratios)
    ax.set_ylim(-2, 102)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_nc(rows: Sequence[dict], path: Path, target: int | None = None) -> None:
    classes = [r["class"] for r in rows]
    idx = [r["index"] if r["index"] is not None else np.nan for r in rows]
    colors = ["tab:red" if r["flagged"] else ("tab:orange" if c == target else "tab:gray")
              for c, r in zip(classes, rows)]
    fig, ax = plt.subplots(figsize=(4.6, 3.0))
    ax.bar(classes, idx, color=colors)
    ax.axhline(-2.0, color="tab:red", linestyle="--", linewidth=1)
    ax.set_xticks(classes)
    ax.set_xlabel("class")
    ax.set_ylabel("anomaly index")
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
