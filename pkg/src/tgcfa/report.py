"""Tables and plots for finished trend studies."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import ValidationError

PLOTS = ("loss_curves.png", "domain_dice.png", "paired_differences.png")


def load_study(run_dir) -> dict:
    run_dir = Path(run_dir)
    path = run_dir / "trend.json"
    if not run_dir.is_dir():
        raise ValidationError(f"run directory not found: {run_dir}")
    if not path.is_file():
        raise ValidationError(f"{run_dir} holds no completed trend study (missing trend.json)")
    return json.loads(path.read_text())


def table_rows(study: dict) -> tuple[list[str], list[list[str]]]:
    """Header and formatted rows shared by the text and CSV renderings."""
    source = study["source"]
    header = ["seed", f"baseline {source}", "baseline target", f"tgcfa {source}", "tgcfa target", "difference"]
    rows = []
    for run in study["runs"]:
        b, t = run["baseline"], run["tgcfa"]
        rows.append([
            str(run["seed"]),
            f"{b['per_domain'][source]:.2f}",
            f"{b['target_mean']:.2f}",
            f"{t['per_domain'][source]:.2f}",
            f"{t['target_mean']:.2f}",
            f"{run['difference']:+.2f}",
        ])
    mean = lambda arm, key: np.mean([r[arm][key] if key == "target_mean" else r[arm]["per_domain"][source]
                                     for r in study["runs"]])
    rows.append([
        "mean",
        f"{mean('baseline', 'src'):.2f}",
        f"{mean('baseline', 'target_mean'):.2f}",
        f"{mean('tgcfa', 'src'):.2f}",
        f"{mean('tgcfa', 'target_mean'):.2f}",
        f"{study['mean_difference']:+.2f}",
    ])
    return header, rows


def render_text(study: dict) -> str:
    header, rows = table_rows(study)
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))
    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    lines.append(
        f"targets: {', '.join(study['targets'])}; positive seeds {study['positive']}/{len(study['runs'])}"
    )
    return "\n".join(lines) + "\n"


def render_csv(study: dict) -> str:
    header, rows = table_rows(study)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _run_epochs(run_dir) -> list:
    path = Path(run_dir) / "run.json"
    if not path.is_file():
        return []
    return json.loads(path.read_text()).get("epochs", [])


def write_plots(study: dict, out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / name for name in PLOTS]
    colors = {"baseline": "tab:gray", "tgcfa": "tab:blue"}

    fig, ax = plt.subplots(figsize=(6, 4))
    for run in study["runs"]:
        for arm in ("baseline", "tgcfa"):
            epochs = _run_epochs(run[arm]["run_dir"])
            if epochs:
                ax.plot([e["l_total"] for e in epochs], color=colors[arm], alpha=0.7,
                        label=f"{arm}" if run is study["runs"][0] else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(paths[0])
    plt.close(fig)

    domains = list(study["runs"][0]["baseline"]["per_domain"])
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(domains))
    for i, arm in enumerate(("baseline", "tgcfa")):
        vals = np.array([[r[arm]["per_domain"][d] for d in domains] for r in study["runs"]])
        ax.bar(x + (i - 0.5) * 0.38, vals.mean(0), 0.38, yerr=vals.std(0), color=colors[arm], label=arm)
    ax.set_xticks(x, domains)
    ax.set_ylabel("mean foreground Dice (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(paths[1])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    seeds = [str(r["seed"]) for r in study["runs"]]
    diffs = study["differences"]
    ax.bar(seeds, diffs, color=["tab:green" if d > 0 else "tab:red" for d in diffs])
    ax.axhline(study["mean_difference"], color="black", linestyle="--", label="mean")
    ax.axhline(0, color="black", linewidth=0.8)
    ax.set_xlabel("seed")
    ax.set_ylabel("target Dice difference (tgcfa - baseline)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(paths[2])
    plt.close(fig)
    return paths
