"""Static return, loss and collapse curves from one or more metrics files."""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from storage import read_metrics  # noqa: E402

logger = logging.getLogger(__name__)

PANELS = (
    ("returns", "env steps", (("episode", "episode_return"), ("eval", "eval_return"))),
    ("world model losses", "gradient steps", (("train", "total"), ("train", "l_dyn"), ("train", "l_rep"), ("train", "reward"), ("train", "value"), ("train", "action"))),
    ("actor critic", "gradient steps", (("train", "actor_loss"), ("train", "critic_loss"), ("train", "range_ema"))),
    ("collapse (channel std)", "gradient steps", (("train", "x_std"), ("train", "h_std"))),
)


def series(records: list[dict], kind: str, key: str) -> tuple[list[float], list[float]]:
    """(step, value) pairs for one metric; env steps for episodes and evals, gradient steps otherwise."""
    step_key = "env_steps" if kind in ("episode", "eval") else "grad_steps"
    xs, ys = [], []
    for record in records:
        if record.get("kind") == kind and key in record:
            xs.append(record[step_key])
            ys.append(record[key])
    return xs, ys


def resolve_metrics(path: str | os.PathLike) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no metrics file at {path}")
    return path


def plot_metrics(paths: Sequence[str | os.PathLike], output: str | os.PathLike) -> Path:
    """Render every run onto one figure with a panel per metric group."""
    if not paths:
        raise ValueError("plot needs at least one metrics file or run directory")
    runs = []
    for raw in paths:
        path = resolve_metrics(raw)
        label = path.parent.name if path.name == "metrics.jsonl" else path.stem
        runs.append((label, read_metrics(path)))

    fig, axes = plt.subplots(1, len(PANELS), figsize=(5 * len(PANELS), 4))
    for ax, (title, xlabel, metrics) in zip(axes, PANELS):
        for label, records in runs:
            for kind, key in metrics:
                xs, ys = series(records, kind, key)
                if xs:
                    name = key if len(runs) == 1 else f"{label}: {key}"
                    ax.plot(xs, ys, label=name, linewidth=1)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize="small")
    fig.tight_layout()
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, dpi=120)
    plt.close(fig)
    logger.info("Wrote %s", output)
    return output
