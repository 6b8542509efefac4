"""Trace CSVs, convergence plot and summary table for a set of result records."""

from __future__ import annotations

import csv
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from .pipeline import ResultRecord

TRACE_FIELDS = ["method", "batch", "samples", "p_hat", "sigma_hat"]
CURVE_FIELDS = ["method", "samples", "p_hat", "sigma_hat"]


def _labels(records: Sequence[ResultRecord]) -> list[str]:
    """Method names, numbered when a method occurs more than once."""
    counts = Counter(r.estimate.method for r in records)
    seen: Counter = Counter()
    out = []
    for r in records:
        m = r.estimate.method
        seen[m] += 1
        out.append(m if counts[m] == 1 else f"{m}-{seen[m]}")
    return out


def write_trace_csv(records: Sequence[ResultRecord], path) -> Path:
    """One row per batch; alpha columns are padded with blanks to the widest mixture."""
    D = max(len(row.alpha) for r in records for row in r.estimate.trace)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS + [f"alpha_{d + 1}" for d in range(D)])
        for label, r in zip(_labels(records), records):
            for row in r.estimate.trace:
                alpha = [repr(float(a)) for a in row.alpha] + [""] * (D - len(row.alpha))
                w.writerow([label, row.batch, row.samples, repr(float(row.p_hat)), repr(float(row.sigma_hat))] + alpha)
    return path


def read_trace_csv(path) -> dict[str, list[dict]]:
    """Inverse of :func:`write_trace_csv`: rows grouped by method label."""
    out: dict[str, list[dict]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            alpha = [float(v) for k, v in row.items() if k.startswith("alpha_") and v != ""]
            out.setdefault(row["method"], []).append({
                "batch": int(row["batch"]), "samples": int(row["samples"]),
                "p_hat": float(row["p_hat"]), "sigma_hat": float(row["sigma_hat"]), "alpha": alpha,
            })
    return out


def write_curve_csv(records: Sequence[ResultRecord], path) -> Path:
    """Running estimates at sample checkpoints; this is what the plot draws."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for label, r in zip(_labels(records), records):
            c = r.estimate.curve
            if not c:
                rows = [(row.samples, row.p_hat, row.sigma_hat) for row in r.estimate.trace]
            else:
                rows = zip(c["samples"], c["p_hat"], c["sigma_hat"])
            for n, p, s in rows:
                w.writerow([label, int(n), repr(float(p)), repr(float(s))])
    return path


def read_curve_csv(path) -> dict[str, dict[str, np.ndarray]]:
    cols: dict[str, dict[str, list]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            c = cols.setdefault(row["method"], {"samples": [], "p_hat": [], "sigma_hat": []})
            c["samples"].append(int(row["samples"]))
            c["p_hat"].append(float(row["p_hat"]))
            c["sigma_hat"].append(float(row["sigma_hat"]))
    return {m: {k: np.asarray(v) for k, v in c.items()} for m, c in cols.items()}


def plot_curves(curves: dict[str, dict[str, np.ndarray]], path, oracle: float | None = None) -> Path:
    """SVG of p_hat with a +-1 sigma_hat band against the sample count."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "trajcp"
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, c in curves.items():
        n, p, s = c["samples"], 100 * c["p_hat"], 100 * c["sigma_hat"]
        (line,) = ax.plot(n, p, label=label, lw=1.4)
        ax.fill_between(n, p - s, p + s, color=line.get_color(), alpha=0.2, lw=0)
    if oracle is not None:
        ax.axhline(100 * oracle, color="k", ls="--", lw=0.8, label="reference")
    ax.set_xlabel("samples")
    ax.set_ylabel("collision probability [%]")
    ax.set_ylim(bottom=0.0)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def summary_table(records: Sequence[ResultRecord]) -> str:
    """Final estimates, one line per record."""
    head = f"{'method':<8}{'p_hat [%]':>12}{'sigma_hat [%]':>15}{'samples':>9}{'hits':>6}{'setup [s]':>11}{'sampling [s]':>14}"
    lines = [head, "-" * len(head)]
    for label, r in zip(_labels(records), records):
        e = r.estimate
        lines.append(f"{label:<8}{100 * e.p_hat:>12.4f}{100 * e.sigma_hat:>15.4f}{e.samples_used:>9d}{e.hits:>6d}"
                     f"{r.setup_time:>11.2f}{r.timings.get('estimate', e.wall_time):>14.2f}")
    for label, r in zip(_labels(records), records):
        if len(r.weights) > 1:
            ws = " ".join(f"{w:.3f}" for w in r.weights)
            lines.append(f"weights {label}: {ws}")
    return "\n".join(lines) + "\n"


def emit_report(records: Sequence[ResultRecord], out_dir, oracle: float | None = None) -> dict[str, Path]:
    """Write trace.csv, curve.csv, convergence.svg and summary.txt into ``out_dir``."""
    if not records:
        raise ValueError("at least one record is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "trace": write_trace_csv(records, out / "trace.csv"),
        "curve": write_curve_csv(records, out / "curve.csv"),
    }
    files["plot"] = plot_curves(read_curve_csv(files["curve"]), out / "convergence.svg", oracle)
    table = out / "summary.txt"
    table.write_text(summary_table(records), encoding="utf-8")
    files["table"] = table
    return files

