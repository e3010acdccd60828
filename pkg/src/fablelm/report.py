"""Report rendering: run logs, prune sweeps, and eval reports to CSV and PNG.

Every renderer takes already-computed results and only formats them, so the
figures and delimited files always agree with the JSON artifacts they sit
next to.
"""

import csv
import dataclasses
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

RUNLOG_COLUMNS = ["step", "lr", "train_ce", "grad_norm", "tokens_per_sec", "eval_ce", "eval_ppl"]
SWEEP_COLUMNS = ["mlp_rate", "head_rate", "ce", "ppl", "delta_ce_pct", "pruned_params"]


def runlog_to_csv(run_log, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RUNLOG_COLUMNS, restval="")
        writer.writeheader()
        for record in run_log:
            writer.writerow({k: record.get(k, "") for k in RUNLOG_COLUMNS})


def plot_runlog(run_log, path):
    """Training CE per step with eval CE points overlaid."""
    steps = [r["step"] for r in run_log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r["train_ce"] for r in run_log], label="train CE", lw=1.2)
    evals = [(r["step"], r["eval_ce"]) for r in run_log if "eval_ce" in r]
    if evals:
        ax.plot(*zip(*evals), "o-", label="eval CE", ms=4)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy (nats)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _sweep_rows(sweep):
    for (m, h) in sorted(sweep.points):
        p = sweep.points[(m, h)]
        yield {"mlp_rate": m, "head_rate": h, **{k: p[k] for k in SWEEP_COLUMNS[2:]}}


def sweep_to_csv(sweep, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in _sweep_rows(sweep):
            writer.writerow(row)


def plot_sweep(sweep, path):
    """Heatmap of CE degradation (%) over the pruning-rate grid."""
    mlp_rates = sorted({m for m, _ in sweep.points})
    head_rates = sorted({h for _, h in sweep.points})
    grid = [[sweep.points[(m, h)]["delta_ce_pct"] for h in head_rates] for m in mlp_rates]
    fig, ax = plt.subplots(figsize=(1.2 * len(head_rates) + 2, 0.9 * len(mlp_rates) + 2))
    im = ax.imshow(grid, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(head_rates)), [f"{h:g}" for h in head_rates])
    ax.set_yticks(range(len(mlp_rates)), [f"{m:g}" for m in mlp_rates])
    ax.set_xlabel("head prune rate")
    ax.set_ylabel("mlp prune rate")
    for i in range(len(mlp_rates)):
        for j in range(len(head_rates)):
            ax.text(j, i, f"{grid[i][j]:.1f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="delta CE (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report_rows(report):
    """Flat (metric, value) pairs; distinct-n expands to one row per order."""
    rows = []
    for f in dataclasses.fields(report):
        value = getattr(report, f.name)
        if f.name == "distinct_n":
            for n in sorted(value):
                rows.append((f"distinct_{n}", value[n]))
        else:
            rows.append((f.name, value))
    return rows


def report_to_csv(report, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(report_rows(report))


def plot_report(report, path):
    """Horizontal bars for the bounded scores; unbounded ones in the title."""
    rows = report_rows(report)
    bounded = [(k, v) for k, v in rows
               if k.startswith("distinct_")
               or k in ("agreement_acc", "coherence", "grammar_score", "self_bleu")]
    names = [k for k, _ in bounded]
    values = [v for _, v in bounded]
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(bounded) + 1.5))
    ax.barh(names, values)
    ax.set_xlim(0, 1)
    for i, v in enumerate(values):
        ax.text(min(v + 0.01, 0.93), i, f"{v:.3f}", va="center", fontsize=8)
    ax.invert_yaxis()
    ax.set_title(f"ce {report.ce:.3f}  ppl {report.ppl:.2f}  "
                 f"readability {report.readability:.1f}  tok/s {report.tokens_per_sec:.0f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_all(out_dir, run_log=None, sweep=None, report=None):
    """Render whichever artifacts are given into out_dir; returns paths."""
    out_dir = Path(out_dir)
    written = []
    if run_log is not None:
        runlog_to_csv(run_log, out_dir / "runlog.csv")
        plot_runlog(run_log, out_dir / "loss_curve.png")
        written += [out_dir / "runlog.csv", out_dir / "loss_curve.png"]
    if sweep is not None:
        sweep_to_csv(sweep, out_dir / "sweep.csv")
        plot_sweep(sweep, out_dir / "sweep.png")
        written += [out_dir / "sweep.csv", out_dir / "sweep.png"]
    if report is not None:
        report_to_csv(report, out_dir / "report.csv")
        plot_report(report, out_dir / "report.png")
        written += [out_dir / "report.csv", out_dir / "report.png"]
    return written
