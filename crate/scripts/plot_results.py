#!/usr/bin/env python3
"""Plot carate sweep/vif CSV output.

Usage:
    python3 scripts/plot_results.py sweep sweep.csv out.png
    python3 scripts/plot_results.py vif vif.csv out.png

Documentation helper only; the CLI itself has no plotting dependency.
"""

import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_rows(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if not r[next(iter(r))].startswith("#")]
    return rows


def plot_sweep(path, out):
    rows = read_rows(path)
    by_method = defaultdict(list)
    for r in rows:
        by_method[r["method"]].append((float(r["kappa"]), float(r["reject_rate"])))
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, pts in sorted(by_method.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.axhline(0.05, color="gray", lw=0.8, ls="--")
    ax.set_xlabel(r"$\kappa$ (regressors / cell size)")
    ax.set_ylabel("rejection rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_vif(path, out):
    rows = read_rows(path)
    kappa = [float(r["kappa"]) for r in rows]
    vif = [float(r["vif"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(kappa, vif)
    ax.set_xlabel(r"$\kappa$")
    ax.set_ylabel("variance inflation factor")
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def main():
    if len(sys.argv) != 4 or sys.argv[1] not in {"sweep", "vif"}:
        print(__doc__)
        sys.exit(64)
    kind, path, out = sys.argv[1:]
    if kind == "sweep":
        plot_sweep(path, out)
    else:
        plot_vif(path, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
