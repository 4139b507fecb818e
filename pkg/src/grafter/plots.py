"""Figure rendering for run and sweep outputs.

Everything here reads the delimited files back rather than taking live
objects, so `report` can be pointed at any old run directory. Figures land
next to the CSV they were read from unless told otherwise.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import ParseError  # noqa: E402

TRAINING_FIGURE = "training_curves.png"
ALPHA_FIGURE = "alpha_heatmap.png"
SWEEP_FIGURE = "sweep_curves.png"


def _read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path} is empty")
        rows = list(reader)
    if not rows:
        raise ParseError(f"{path} has a header but no rows")
    return list(reader.fieldnames), rows


def _floats(rows, key) -> list[float]:
    return [float(r[key]) for r in rows]


def render_training_curves(metrics_csv, out_png=None) -> Path:
    """Loss components on top, evaluation quality below, both against epoch."""
    metrics_csv = Path(metrics_csv)
    out_png = Path(out_png) if out_png else metrics_csv.parent / TRAINING_FIGURE
    _, rows = _read_csv(metrics_csv)
    epochs = _floats(rows, "epoch")

    fig, (ax_loss, ax_eval) = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    for key, label in [
        ("l_total", "total"),
        ("l_task", "task"),
        ("l_reg", "consistency"),
        ("l_rel", "relation"),
    ]:
        ax_loss.plot(epochs, _floats(rows, key), label=label)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize="small")
    ax_loss.set_title("training losses")

    ax_eval.plot(epochs, _floats(rows, "ap_mean"), label="mean AP", color="tab:blue")
    awa = [float(r["awa"]) if r["awa"] != "" else None for r in rows]
    if any(v is not None for v in awa):
        pts = [(e, v) for e, v in zip(epochs, awa) if v is not None]
        ax_eval.plot([p[0] for p in pts], [p[1] for p in pts], label="cluster agreement", color="tab:green")
    act = _floats(rows, "active_adapters_mean")
    scale = max(act + [1.0])
    ax_eval.plot(epochs, [v / scale for v in act], label="active adapters (scaled)",
                 color="tab:gray", linestyle=":")
    ax_eval.set_xlabel("epoch")
    ax_eval.set_ylabel("score")
    ax_eval.set_ylim(-0.05, 1.05)
    ax_eval.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_alpha_heatmap(alpha_csv, out_png=None) -> Path:
    """Task-by-adapter mixing weights; hatched cells are gated off."""
    alpha_csv = Path(alpha_csv)
    out_png = Path(out_png) if out_png else alpha_csv.parent / ALPHA_FIGURE
    _, rows = _read_csv(alpha_csv)
    tasks = sorted({int(r["task_id"]) for r in rows})
    adapters = sorted({int(r["adapter_id"]) for r in rows})
    weight = [[0.0] * len(adapters) for _ in tasks]
    active = [[False] * len(adapters) for _ in tasks]
    for r in rows:
        t, i = int(r["task_id"]), int(r["adapter_id"])
        weight[t][i] = float(r["weight"])
        active[t][i] = r["active"] == "1"

    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(adapters), 1.0 + 0.6 * len(tasks)))
    im = ax.imshow(weight, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
    for t in tasks:
        for i in adapters:
            if not active[t][i]:
                ax.text(i, t, "x", ha="center", va="center", color="white", fontsize=8)
            else:
                ax.text(i, t, f"{weight[t][i]:.2f}", ha="center", va="center",
                        color="white" if weight[t][i] < 0.6 else "black", fontsize=8)
    ax.set_xticks(adapters)
    ax.set_yticks(tasks)
    ax.set_xlabel("adapter")
    ax.set_ylabel("task")
    ax.set_title("mixing weights (x = gated off)")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


_LOG_AXES = {"tau", "rho", "lambda"}


def render_sweep_curves(sweep_csv, out_png=None) -> Path:
    """Final-epoch quality against the swept value(s).

    With two axes the first is the x-axis and the second becomes one line per
    value. Multiplicative axes get a log scale when every value is positive.
    """
    sweep_csv = Path(sweep_csv)
    out_png = Path(out_png) if out_png else sweep_csv.parent / SWEEP_FIGURE
    header, rows = _read_csv(sweep_csv)
    axis_names = header[: header.index("epoch")]
    if not 1 <= len(axis_names) <= 2:
        raise ParseError(f"{sweep_csv} does not look like a sweep table")

    fig, (ax_ap, ax_awa) = plt.subplots(1, 2, figsize=(10, 4))
    x_name = axis_names[0]
    if len(axis_names) == 1:
        groups = {None: rows}
    else:
        groups = {}
        for r in rows:
            groups.setdefault(r[axis_names[1]], []).append(r)
    for key, group in sorted(groups.items(), key=lambda kv: (kv[0] is not None, kv[0])):
        xs = _floats(group, x_name)
        label = None if key is None else f"{axis_names[1]}={key}"
        ax_ap.plot(xs, _floats(group, "ap_mean"), marker="o", label=label)
        awa = [float(r["awa"]) if r["awa"] != "" else float("nan") for r in group]
        ax_awa.plot(xs, awa, marker="o", label=label)
    for ax, ylabel in [(ax_ap, "mean AP"), (ax_awa, "cluster agreement")]:
        ax.set_xlabel(x_name)
        ax.set_ylabel(ylabel)
        xs_all = _floats(rows, x_name)
        if x_name in _LOG_AXES and all(v > 0 for v in xs_all) and max(xs_all) / min(xs_all) > 20:
            ax.set_xscale("log")
        if len(groups) > 1:
            ax.legend(fontsize="small")
    fig.suptitle(f"final-epoch quality over {', '.join(axis_names)}")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_run_dir(run_dir) -> list[Path]:
    """All figures a run directory supports; skips files that are absent."""
    run_dir = Path(run_dir)
    written = []
    if (run_dir / "metrics.csv").exists():
        written.append(render_training_curves(run_dir / "metrics.csv"))
    if (run_dir / "alpha.csv").exists():
        written.append(render_alpha_heatmap(run_dir / "alpha.csv"))
    if (run_dir / "sweep.csv").exists():
        written.append(render_sweep_curves(run_dir / "sweep.csv"))
    return written
