"""Optional PNG rendering of report tables (``report --figures``)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .tables import read_table  # noqa: E402


def plot_curve(curve_path, dense_path=None, out=None) -> Path:
    t = read_table(curve_path, "curve")
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.fill_between(t["alpha"], t["band_lo"], t["band_hi"], color="0.8", label="1 sigma")
    ax.plot(t["alpha"], t["w_theory"], color="tab:red", label="analytic")
    if dense_path is not None and Path(dense_path).is_file():
        d = read_table(dense_path, "dense")
        ax.plot(d["alpha"], d["w_fit"], color="tab:blue", label="fit")
    ax.plot(t["alpha"], t["w_mean"], ".", color="tab:blue", ms=3, label="pointwise")
    ax.set_xlabel("alpha")
    ax.set_ylabel("W")
    ax.set_title(f"{t.meta.get('label', '')} k={t.meta.get('outcome', '')}")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out = Path(out) if out else Path(curve_path).with_suffix(".png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_gamma(path, out=None) -> Path:
    t = read_table(path, "gamma")
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    g, d = t["gamma"], t["delta"]
    pos = g > 0
    ax.plot(g[pos], d[pos], "d--", label="regularized")
    for d0 in d[~pos]:
        ax.axhline(d0, color="k", label="gamma = 0")
    ax.set_xscale("log")
    ax.set_xlabel("gamma")
    ax.set_ylabel("relative error")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out = Path(out) if out else Path(path).with_suffix(".png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_report_figures(report_dir) -> list[Path]:
    rep = Path(report_dir)
    outs = []
    for curve in sorted(rep.glob("curve_*.tsv")):
        dense = rep / curve.name.replace("curve_", "dense_", 1)
        outs.append(plot_curve(curve, dense))
    if (rep / "gamma_delta.tsv").is_file():
        outs.append(plot_gamma(rep / "gamma_delta.tsv"))
    return outs
