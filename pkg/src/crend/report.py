"""Static plots and a markdown summary from ``eval`` outputs and training logs."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STRUCTURES = ("follicle", "ovary")
TABLE_METRICS = ("dsc", "jc", "hd", "asd")


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _cell(agg: dict, key: str) -> str:
    stat = agg.get(key) or {}
    if stat.get("mean") is None:
        return "n/a"
    return f"{stat['mean']:.2f} ± {stat['sd']:.2f}"


def summary_table(runs: dict[str, dict]) -> str:
    """Markdown table: method, four follicle metrics, four ovary metrics, params."""
    head = ["Method"] + [f"{s.capitalize()} {m.upper()}" for s in STRUCTURES for m in TABLE_METRICS] + ["Params"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, summary in runs.items():
        agg = summary["aggregate"]
        params = summary.get("params")
        cells = [name] + [_cell(agg, f"{s}_{m}") for s in STRUCTURES for m in TABLE_METRICS]
        cells.append(f"{params / 1e6:.2f}M" if params else "n/a")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def plot_losses(logs: dict[str, list[dict]], path: Path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for name, records in logs.items():
        steps = [r["step"] for r in records]
        for ax, key in zip(axes, ("loss_ori", "loss_r", "loss_c")):
            ax.plot(steps, [r[key] for r in records], label=name, linewidth=0.8)
    for ax, key in zip(axes, ("loss_ori", "loss_r", "loss_c")):
        ax.set_title(key)
        ax.set_xlabel("step")
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_dsc_bars(runs: dict[str, dict], path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5), sharey=True)
    width = 0.8 / max(len(runs), 1)
    for i, (name, summary) in enumerate(runs.items()):
        vols = summary["per_volume"]
        for ax, s in zip(axes, STRUCTURES):
            xs = [j + i * width for j in range(len(vols))]
            ax.bar(xs, [v[f"{s}_dsc"] for v in vols], width=width, label=name)
    for ax, s in zip(axes, STRUCTURES):
        ax.set_title(f"{s} DSC per volume")
        ax.set_xlabel("volume")
    axes[0].set_ylabel("DSC (%)")
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_hd_summary(runs: dict[str, dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    data, labels = [], []
    for name, summary in runs.items():
        for s in STRUCTURES:
            vals = [v[f"{s}_hd"] for v in summary["per_volume"] if v.get(f"{s}_hd") is not None]
            data.append(vals)
            labels.append(f"{name}\n{s}")
    ax.boxplot(data)
    ax.set_xticks(range(1, len(labels) + 1), labels, fontsize="small")
    ax.set_ylabel("HD (mm)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def write_report(eval_dirs: dict[str, str], logs: dict[str, str], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = {}
    for name, d in eval_dirs.items():
        path = Path(d)
        path = path / "metrics.json" if path.is_dir() else path
        runs[name] = json.loads(path.read_text())
    written = [
        plot_dsc_bars(runs, out_dir / "dsc_per_volume.png"),
        plot_hd_summary(runs, out_dir / "hd_summary.png"),
    ]
    if logs:
        written.append(plot_losses({n: read_log(p) for n, p in logs.items()}, out_dir / "loss_curves.png"))
    md = out_dir / "summary.md"
    md.write_text("# Segmentation summary\n\n" + summary_table(runs))
    written.append(md)
    return written
