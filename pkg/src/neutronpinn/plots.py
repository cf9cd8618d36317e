"""Plot-data emission: a CSV plus a gnuplot script per figure, PNG when matplotlib is importable."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

try:  # optional extra; figures degrade to data + script without it
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    HAVE_MPL = True
except ImportError:  # pragma: no cover - depends on the environment
    HAVE_MPL = False


def write_columns(path, columns: dict) -> int:
    """Write equal-length columns as CSV; returns the number of data rows."""
    names = list(columns)
    cols = [np.asarray(columns[k]).ravel() for k in names]
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])
    return n


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def line_plot(out_dir, name: str, columns: dict, x: str, ys, *, xlabel=None, ylabel=None,
              title="", logy=False) -> list[Path]:
    """One figure: ``name.csv``, ``name.gp`` and (optionally) ``name.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = out_dir / f"{name}.csv"
    write_columns(data, columns)
    names = list(columns)
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set terminal pngcairo size 800,600",
        f"set output '{name}_gnuplot.png'",
        f"set title '{title}'",
        f"set xlabel '{xlabel or x}'",
        f"set ylabel '{ylabel or ', '.join(ys)}'",
    ]
    if logy:
        lines.append("set logscale y")
    xi = names.index(x) + 1
    parts = [f"'{data.name}' using {xi}:{names.index(y) + 1} with lines" for y in ys]
    lines.append("plot " + ", \\\n     ".join(parts))
    script = out_dir / f"{name}.gp"
    script.write_text("\n".join(lines) + "\n")
    written = [data, script]
    if HAVE_MPL:
        fig, ax = plt.subplots(figsize=(6.4, 4.8))
        xv = np.asarray(columns[x], dtype=float)
        for y in ys:
            ax.plot(xv, np.asarray(columns[y], dtype=float), label=y)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel or x)
        ax.set_ylabel(ylabel or ", ".join(ys))
        ax.set_title(title)
        ax.legend()
        png = out_dir / f"{name}.png"
        fig.savefig(png, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(png)
    return written


def heatmap(out_dir, name: str, x, y, z, *, title="", label="") -> list[Path]:
    """Scalar field on an (x, y) tensor grid; ``z`` has shape ``(len(x), len(y))``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    X, Y = np.meshgrid(x, y, indexing="ij")
    data = out_dir / f"{name}.csv"
    write_columns(data, {"x": X.ravel(), "y": Y.ravel(), label or "z": np.asarray(z).ravel()})
    script = out_dir / f"{name}.gp"
    script.write_text("\n".join([
        "set datafile separator ','",
        "set terminal pngcairo size 800,700",
        f"set output '{name}_gnuplot.png'",
        f"set title '{title}'",
        "set view map",
        f"set dgrid3d {len(y)},{len(x)}",
        f"splot '{data.name}' using 1:2:3 with pm3d notitle",
    ]) + "\n")
    written = [data, script]
    if HAVE_MPL:
        fig, ax = plt.subplots(figsize=(6.4, 5.6))
        m = ax.pcolormesh(np.asarray(x), np.asarray(y), np.asarray(z).T, shading="auto")
        fig.colorbar(m, ax=ax, label=label)
        ax.set_title(title)
        ax.set_aspect("equal" if np.ptp(x) and abs(np.ptp(x) / np.ptp(y) - 1) < 0.5 else "auto")
        png = out_dir / f"{name}.png"
        fig.savefig(png, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(png)
    return written
