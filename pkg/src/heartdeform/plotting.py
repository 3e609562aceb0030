"""SVG figures for loss curves and volume traces.

Output is deterministic: the SVG id salt is fixed and the date stamp dropped.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "svg.hashsalt": "heartdeform",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_loss_curve(trace, path) -> None:
    """Loss (log scale) against iteration, block boundaries dashed."""
    trace = np.asarray(trace)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.semilogy(trace[:, 0], np.maximum(trace[:, 2], 1e-300), color="k")
        blocks = trace[:, 1]
        for i in np.nonzero(np.diff(blocks))[0]:
            ax.axvline(trace[i + 1, 0], color="0.6", ls="--", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        fig.tight_layout()
        _save(fig, path)


def plot_volume_trace(trace, path) -> None:
    """Enclosed volume (mL) over time (s)."""
    trace = np.asarray(trace)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(trace[:, 0], trace[:, 1] / 1000.0, color="k")
        ax.set_xlabel("time (s)")
        ax.set_ylabel("volume (mL)")
        fig.tight_layout()
        _save(fig, path)
