"""Matplotlib setup for file-only SVG output."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "svg.fonttype": "none",
    "svg.hashsalt": "kgmem",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}


def curve_figure(series, metric: str, ylabel: str, zoom_epochs: int, title: str = ""):
    """Two panels, early epochs on the left and the full run on the right.

    ``series`` is a list of ``(label, epochs, values)``. Each line carries a
    gid ``series-<panel>-<i>`` so the SVG can be checked structurally.
    """
    with plt.rc_context(RC):
        fig, (ax_zoom, ax_full) = plt.subplots(1, 2, figsize=(10, 3.8), gridspec_kw={"width_ratios": [1, 2]})
        last = max((e[-1] for _, e, _ in series if len(e)), default=1)
        top = max((max(v) for _, _, v in series if len(v)), default=1)
        for panel, ax, xmax in (("zoom", ax_zoom, min(zoom_epochs, last)), ("full", ax_full, last)):
            for i, (label, epochs, values) in enumerate(series):
                (line,) = ax.plot(epochs, values, label=label, marker="." if len(epochs) < 40 else None)
                line.set_gid(f"series-{panel}-{i}")
            ax.set_xlim(0, xmax)
            ax.set_ylim(0, 1.0 if metric == "accuracy" else top * 1.05)
            ax.set_xlabel("epoch")
            ax.set_gid(f"panel-{panel}")
            ax.grid(alpha=0.3)
        ax_zoom.set_ylabel(ylabel)
        ax_zoom.set_title(f"first {zoom_epochs} epochs")
        ax_full.set_title(title or "full training")
        if len(series) <= 12:
            ax_full.legend(loc="lower right", frameon=False)
        fig.tight_layout()
    return fig


def save_svg(fig, path) -> None:
    with plt.rc_context(RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
