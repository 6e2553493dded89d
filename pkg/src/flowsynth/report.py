"""Benchmark-style tables and matplotlib figures written next to delimited outputs."""
import json
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .flow import colorize_flow
from .metrics import MetricReport, average_reports

COLUMNS = (("S", "S↑"), ("F", "F↑"), ("M", "M↓"))
NOT_COMPARABLE = (
    "Scores are computed by this toolkit at the stated scale; they are not comparable to\n"
    "published benchmark numbers, which need pretrained generators, flow networks and\n"
    "backbones plus multi-day training."
)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=fig.get_dpi(), bbox_inches="tight")
    return path


def format_table(rows):
    """Render ``{label: [MetricReport, ...]}`` as a fixed-width table.

    Columns are one S/F/M block per dataset (in first-seen order) followed by
    the unweighted cross-dataset Average. Values are scaled by 100.
    """
    datasets = []
    for reports in rows.values():
        for r in reports:
            if r.dataset not in datasets:
                datasets.append(r.dataset)
    blocks = datasets + ["Average"]
    label_w = max([len("Method")] + [len(k) for k in rows]) + 2
    cell = 7
    block_w = cell * 3
    names = [b if len(b) <= block_w - 1 else b[: block_w - 2] + "." for b in blocks]
    lines = [
        "Method".ljust(label_w) + "|" + "|".join(n.center(block_w) for n in names),
        " " * label_w + "|" + "|".join("".join(s.rjust(cell) for _, s in COLUMNS) for _ in blocks),
    ]
    lines.insert(1, "-" * len(lines[0]))
    protocols = set()
    for label, reports in rows.items():
        by_name = {r.dataset: r for r in reports}
        protocols.update(r.protocol for r in reports)
        cells = []
        for d in datasets:
            r = by_name.get(d)
            vals = r.scaled() if r else None
            cells.append("".join((f"{vals[k]:.1f}" if vals else "-").rjust(cell) for k, _ in COLUMNS))
        if len(by_name) == len(datasets):
            avg = average_reports(reports)
            cells.append("".join(f"{100 * avg[k]:.1f}".rjust(cell) for k, _ in COLUMNS))
        else:
            cells.append("".join("-".rjust(cell) for _ in COLUMNS))
        lines.append(label.ljust(label_w) + "|" + "|".join(cells))
    lines.append("")
    lines.append(f"S/F/M x100; F protocol: {', '.join(sorted(protocols)) or 'n/a'}; "
                 "Average = unweighted mean of dataset means.")
    lines.append(NOT_COMPARABLE)
    return "\n".join(lines) + "\n"


def merged_records(rows):
    recs = []
    for label, reports in rows.items():
        for r in reports:
            for rec in r.to_records():
                recs.append({"method": label, **rec})
        avg = average_reports(reports)
        recs.append({"method": label, "kind": "average", "datasets": [r.dataset for r in reports], **avg})
    return recs


def plot_scores(rows, path):
    """Grouped bars of S, F and M (x100) per dataset, one panel per metric."""
    fig = Figure(figsize=(10, 3.2))
    axes = fig.subplots(1, 3)
    labels = list(rows)
    datasets = [r.dataset for r in next(iter(rows.values()))] if rows else []
    x = np.arange(len(datasets) + 1)
    width = 0.8 / max(len(labels), 1)
    for ax, (key, title) in zip(axes, COLUMNS):
        for i, label in enumerate(labels):
            by_name = {r.dataset: r for r in rows[label]}
            vals = [100 * getattr(by_name[d], key) if d in by_name else np.nan for d in datasets]
            vals.append(100 * average_reports(rows[label])[key])
            ax.bar(x + i * width, vals, width, label=label)
        ax.set_xticks(x + width * (len(labels) - 1) / 2, datasets + ["Average"], rotation=30, ha="right")
        ax.set_title(title)
    if len(labels) > 1:
        axes[0].legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def write_report(rows, out_dir):
    """Write ``table.txt``, ``report.jsonl`` and ``report.png`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(format_table(rows))
    with open(out / "report.jsonl", "w") as f:
        for rec in merged_records(rows):
            f.write(json.dumps(rec) + "\n")
    plot_scores(rows, out / "report.png")
    return out


def load_reports(paths):
    reports = []
    for p in paths:
        reports.extend(MetricReport.read_jsonl(p))
    return reports


def plot_traces(traces, path, metric="S"):
    """Eval metric vs step, one line per label (e.g. per mixing ratio).

    A label may map to a list of traces (one per seed); the line is then their mean.
    """
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    for label, trace in traces.items():
        runs = trace if trace and isinstance(trace[0], list) else [trace]
        evals = [[r for r in run if r.get("kind") == "eval"] for run in runs]
        if evals and evals[0]:
            steps = [r["step"] for r in evals[0]]
            values = np.mean([[r[metric] for r in ev] for ev in evals], axis=0)
            ax.plot(steps, values, marker="o", label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    if traces:
        ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss(trace, path):
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    steps = [r["step"] for r in trace if r.get("kind") == "step"]
    ax.plot(steps, [r["loss"] for r in trace if r.get("kind") == "step"], lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("BCE")
    ax.set_yscale("log")
    fig.tight_layout()
    return _save(fig, path)


def flow_panel(path, flows, image=None, titles=None, max_magnitude=None):
    """Side-by-side panel: optional source image followed by colorized flows."""
    n = len(flows) + (image is not None)
    fig = Figure(figsize=(2.4 * n, 2.6))
    axes = np.atleast_1d(fig.subplots(1, n))
    i = 0
    if image is not None:
        axes[0].imshow(image)
        axes[0].set_title("image", fontsize="small")
        i = 1
    for k, fl in enumerate(flows):
        axes[i + k].imshow(colorize_flow(fl, max_magnitude))
        if titles:
            axes[i + k].set_title(titles[k], fontsize="small")
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)
