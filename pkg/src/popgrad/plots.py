"""SVG figures of loss curves. Presentation only: nothing else reads them."""
from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "popgrad"
    return plt


def effective_time(times, mode, eta):
    """``eta * T`` for GD records, plain time for flow records."""
    return np.asarray(times, dtype=float) * (eta if mode == "discrete_gd" else 1.0)


def running_slope(x, loss):
    """``log L / log x`` for ``x > 1``; tends to the power-law exponent."""
    x = np.asarray(x, dtype=float)
    loss = np.asarray(loss, dtype=float)
    ok = (x > 1) & (loss > 0)
    return x[ok], np.log(loss[ok]) / np.log(x[ok])


def loss_figure(curves, path, title=""):
    """Write a two-panel SVG.

    ``curves`` is a list of ``(label, n, x, loss)``; curves sharing ``n``
    share a colour. Left: log-log loss with a slope -3 guide. Right: the
    running slope ``log L / log x``.
    """
    plt = _pyplot()
    fig, (ax_l, ax_r) = plt.subplots(1, 2, figsize=(10, 4))
    cmap = plt.get_cmap("tab10")
    widths = sorted({c[1] for c in curves})
    colour = {n: cmap(i % 10) for i, n in enumerate(widths)}
    labelled = set()
    xmax = 1.0
    for label, n, x, loss in curves:
        x = np.asarray(x, dtype=float)
        loss = np.asarray(loss, dtype=float)
        ok = (x > 0) & (loss > 0)
        lab = f"n={n}" if n not in labelled else None
        labelled.add(n)
        ax_l.loglog(x[ok], loss[ok], color=colour[n], lw=1, label=lab)
        xs, slope = running_slope(x, loss)
        ax_r.semilogx(xs, slope, color=colour[n], lw=1)
        if ok.any():
            xmax = max(xmax, float(x[ok].max()))
    if xmax > 10:
        ref_x = np.array([xmax / 100, xmax])
        ax_l.loglog(ref_x, 1e-2 * (ref_x / ref_x[0]) ** -3.0, "k--", lw=1, label="slope -3")
    ax_r.axhline(-3.0, color="k", ls="--", lw=1)
    ax_l.set_xlabel("eta T")
    ax_l.set_ylabel("loss")
    ax_l.legend(fontsize=8)
    ax_r.set_xlabel("eta T")
    ax_r.set_ylabel("log L / log(eta T)")
    ax_r.set_ylim(-6, 0.5)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
