"""Log-log RMSE-vs-n convergence figures from experiment CSV files.

Consumes the convergence CSV schema
(model,method,qoi,component,n,R,qmean,rmse,status,seconds); vector
quantities are collapsed to the Euclidean norm over their component RMSE
values.  One figure per CSV: one curve per quantity with a fitted-rate
legend, plus dashed reference-slope guides.  The CSV is never modified.
"""

from __future__ import annotations

import argparse
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

COLORS = {"u": "tab:blue", "grad": "tab:red", "flux": "black",
          "quad": "tab:green"}
MARKERS = {"u": "o", "grad": "s", "flux": "^", "quad": "d"}
LABELS = {"u": "scalar mean", "grad": "gradient mean", "flux": "flux mean",
          "quad": "quadratic flux"}


@dataclass
class FigureSpec:
    csv_path: str
    out_path: str
    qois: tuple = ("u", "grad", "flux")
    slopes: tuple = (1.0,)
    title: str | None = None


def load_series(csv_path, qois):
    """Per-quantity (n, rmse) series from a convergence CSV; components of
    vector quantities are combined by the Euclidean norm."""
    rows = []
    with open(csv_path) as fh:
        body = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(body):
        rows.append(row)
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    available = sorted({r["qoi"] for r in rows})
    series = {}
    for q in qois:
        mine = [r for r in rows if r["qoi"] == q and r["rmse"]]
        if not mine:
            raise ValueError(
                f"{csv_path}: quantity {q!r} not present; available: {available}")
        acc = {}
        for r in mine:
            acc.setdefault(int(r["n"]), []).append(float(r["rmse"]) ** 2)
        ns = np.array(sorted(acc), dtype=np.float64)
        es = np.array([np.sqrt(np.sum(acc[int(n)])) for n in ns])
        series[q] = (ns, es)
    return series


def fit_slope(ns, es):
    keep = es > 0
    if keep.sum() < 2:
        return float("nan")
    return float(-np.polyfit(np.log2(ns[keep]), np.log2(es[keep]), 1)[0])


def build_figure(spec: FigureSpec):
    """Figure object plus the plotted series (for numeric checks)."""
    series = load_series(spec.csv_path, spec.qois)
    fig = Figure(figsize=(5.2, 4.0), dpi=150)
    ax = fig.subplots()
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    anchor_n = None
    anchor_e = None
    for q, (ns, es) in series.items():
        rate = fit_slope(ns, es)
        ax.plot(ns, es, color=COLORS.get(q, "gray"),
                marker=MARKERS.get(q, "o"), markersize=4, linewidth=1.2,
                label=f"{LABELS.get(q, q)} (rate {rate:.2f})")
        if anchor_n is None:
            anchor_n, anchor_e = ns, es
    for slope in spec.slopes:
        guide = anchor_e[0] * (anchor_n / anchor_n[0]) ** (-slope)
        ax.plot(anchor_n, guide, linestyle="--", color="gray", linewidth=0.9,
                label=f"slope {slope:g}")
    ax.set_xlabel("lattice points per shift $n$")
    ax.set_ylabel("shift-based RMSE")
    if spec.title:
        ax.set_title(spec.title)
    ax.grid(True, which="both", alpha=0.25)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig, series


def render(spec: FigureSpec) -> Path:
    """Write the figure for ``spec`` and return the output path."""
    fig, _ = build_figure(spec)
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="render",
        description="Render a log-log convergence figure from an experiment CSV")
    parser.add_argument("--csv", required=True, help="input CSV path")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--qois", default="u,grad,flux",
                        help="comma-separated quantities to plot")
    parser.add_argument("--slopes", default="1.0",
                        help="comma-separated reference slopes")
    parser.add_argument("--title", default=None)
    args = parser.parse_args(argv)
    spec = FigureSpec(csv_path=args.csv, out_path=args.out,
                      qois=tuple(q for q in args.qois.split(",") if q),
                      slopes=tuple(float(s) for s in args.slopes.split(",") if s),
                      title=args.title)
    out = render(spec)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
