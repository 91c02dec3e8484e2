"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # fixed metadata keeps repeated renders byte-identical
    "svg.hashsalt": "ssl-rul",
}


def _label(r):
    if r.task == "none":
        return "no pre-training"
    q = f", q={r.q}" if r.task == "MSPA" else ""
    fr = "frozen" if r.freeze else "unfrozen"
    return f"{r.task}{q}, N_U={r.N_U}, d={r.d:g}, {fr}"


def plot_summary(reports, path):
    """Mean +- std test MAPE against the number of labelled structures."""
    groups = {}
    for r in reports:
        groups.setdefault(_label(r), []).append(r)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        for label, rs in groups.items():
            rs = sorted(rs, key=lambda r: r.N_L)
            x = np.array([r.N_L for r in rs])
            y = np.array([r.mean for r in rs])
            e = np.array([r.std for r in rs])
            ax.errorbar(x, y, yerr=e, marker="o", ms=3, capsize=2, lw=1, label=label)
        ax.set_xscale("log")
        ax.set_xlabel("labelled training structures $N_L$")
        ax.set_ylabel("test MAPE (%)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_sequences(structures, path, delta_k=500, max_structures=3):
    """Strain histories of the first few structures, one panel per gauge."""
    structures = list(structures)[:max_structures]
    if not structures:
        return None
    n_g = structures[0].measurements.shape[1]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n_g, figsize=(2.6 * n_g, 2.6), sharey=False, squeeze=False)
        for s in structures:
            cycles = (np.arange(s.length) + 1) * delta_k
            for j, ax in enumerate(axes[0]):
                ax.plot(cycles, s.measurements[:, j] * 1e6, lw=1, label=s.id)
        for j, ax in enumerate(axes[0]):
            ax.set_title(f"gauge {j + 1}")
            ax.set_xlabel("cycles")
        axes[0, 0].set_ylabel("strain ($\\mu\\varepsilon$)")
        axes[0, -1].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path
