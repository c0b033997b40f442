"""Figures rendered next to the metric files: loss curves from step JSONL
and grouped bars for ablation tables."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .objectives import PAIRS, LossReport


def loss_curves(jsonl_path, out_png):
    """Total and per-pair loss over steps, read back from the metrics JSONL."""
    steps, totals = [], []
    per_pair = {p: [] for p in PAIRS}
    with open(jsonl_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rep = LossReport.from_json(line)
            steps.append(rep.step)
            totals.append(rep.total)
            for p in PAIRS:
                per_pair[p].append(sum(rep.components[p].values()))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(steps, totals, lw=1.2)
    ax1.set_xlabel("step")
    ax1.set_ylabel("total loss")
    ax1.set_title("pre-training loss")
    for p in PAIRS:
        ax2.plot(steps, per_pair[p], lw=1.0, label=f"pair {p.upper()}")
    ax2.set_xlabel("step")
    ax2.set_ylabel("pair loss")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def ablation_bars(rows, metric_keys, out_png, title="ablation"):
    """One bar group per ablation cell, one bar per reported metric."""
    labels = [r["cell"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(rows), 4))
    width = 0.8 / max(len(metric_keys), 1)
    for mi, mk in enumerate(metric_keys):
        xs = [i + mi * width for i in range(len(rows))]
        ax.bar(xs, [r.get(mk, 0.0) for r in rows], width=width, label=mk)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))])
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("percent")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def ablation_markdown(rows, metric_keys):
    head = "| cell | " + " | ".join(metric_keys) + " |"
    sep = "|" + "---|" * (len(metric_keys) + 1)
    lines = [head, sep]
    for r in rows:
        cells = " | ".join(f"{r.get(mk, float('nan')):.2f}" for mk in metric_keys)
        lines.append(f"| {r['cell']} | {cells} |")
    return "\n".join(lines) + "\n"


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
