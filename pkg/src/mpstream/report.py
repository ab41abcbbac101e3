"""Figure rendering for experiment outputs.

Each experiment kind that produces a curve can be rendered to an image file
next to its CSV. The CSV stays the canonical artifact; figures are a
convenience for eyeballing results.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

PLOTTABLE = ("simulate", "bound", "variance", "trace")


def render_figure(kind: str, header: list[str], rows: list[list], path, title: str | None = None):
    """Render the rows of one experiment to an image file."""
    if kind not in PLOTTABLE:
        raise ValueError(f"no figure defined for kind {kind!r}")
    col = {name: i for i, name in enumerate(header)}
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    if kind == "simulate":
        _curve(ax, rows, col, x="prebuffer", y="p_hat", err="stderr", label="simulated")
        ax.set_yscale("log")
        ax.set_xlabel("pre-buffering time")
        ax.set_ylabel("starvation probability")
    elif kind == "bound":
        _curve(ax, rows, col, x="b", y="bound", label="bound")
        ax.set_yscale("log")
        ax.set_xlabel("margin b")
        ax.set_ylabel("starvation bound")
    elif kind == "variance":
        if "phi" in col:
            _curve(ax, rows, col, x="phi", y="ratio", label="simulated / asymptotic")
            ax.set_xscale("log")
            ax.axhline(1.0, color="gray", lw=0.8, ls="--")
            ax.set_xlabel("speed")
            ax.set_ylabel("variance ratio")
        else:
            ax.bar([0], [rows[0][col["sigma2_analytic"]]])
            ax.set_xticks([0], ["asymptotic variance"])
    elif kind == "trace":
        _curve(ax, rows, col, x="b", y="trace_p", err="trace_stderr", label="trace")
        _curve(ax, rows, col, x="b", y="gaussian_p", err="gaussian_stderr", label="gaussian")
        _curve(ax, rows, col, x="b", y="analytic_bound", label="analytic")
        ax.set_yscale("log")
        ax.set_xlabel("margin b")
        ax.set_ylabel("starvation probability")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _floor(values, eps=1e-12):
    return [max(float(v), eps) for v in values]


def _curve(ax, rows, col, x, y, err=None, label=None):
    xs = [float(r[col[x]]) for r in rows]
    ys = _floor(r[col[y]] for r in rows)
    if err is not None:
        es = [float(r[col[err]]) for r in rows]
        ax.errorbar(xs, ys, yerr=es, marker="o", ms=3, capsize=2, label=label)
    else:
        ax.plot(xs, ys, marker="s", ms=3, label=label)
